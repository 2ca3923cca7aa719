"""Provider allocation, user best responses and the contract equilibrium.

The provider's allocation for a type is a concave knapsack solved exactly by a
continuous greedy. Each user's best response is an exact search over a sample
grid: because every constraint coupling the per-type offers (monotonicity,
adjacent downward incentive compatibility, participation at the lowest type)
only links neighbouring types, the search is a dynamic program over types.
Candidate offers are evaluated with the provider's allocation re-solved for
that candidate, so a user anticipates how much of its offer is trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .market import (
    MONEY_TOL,
    ContractBook,
    MapTypeProfile,
    MuProfile,
    PricingParams,
    encrypted_surplus,
    map_utility,
    mu_expected_utility,
    privacy_cost,
    social_welfare,
)

TIE_TOL = 1e-12
# Constraint slack used while searching; verification uses the full MONEY_TOL,
# so float noise between the two evaluation paths cannot flip a verdict.
SEARCH_TOL = 0.5 * MONEY_TOL


@dataclass(frozen=True)
class SolverConfig:
    sigma: float = 1e-6
    grid_step: float = 100.0
    max_iters: int = 100
    seed: int = 0
    # Also enforce the adjacent upward incentive constraints. Together with the
    # downward chain and monotone offers they imply every pairwise constraint.
    local_upward: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.grid_step >= 1:
            raise ValueError("grid_step must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class EquilibriumResult:
    book: ContractBook
    eta: np.ndarray
    iterations: int
    utility_trace: list[list[float]] = field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "book": self.book.to_dict(),
            "eta": self.eta.tolist(),
            "iterations": self.iterations,
            "utility_trace": self.utility_trace,
            "converged": self.converged,
        }


# ---------------------------------------------------------------------------
# provider allocation


def _unit_cost_keys(unit: np.ndarray) -> np.ndarray:
    # Linear pricing makes every ratio pay/size equal up to float noise; round
    # to 12 significant digits so that noise never reorders users.
    return np.array([float(f"{u:.12g}") for u in unit])


def _greedy_order(d_row: np.ndarray, pay_row: np.ndarray, energy: float) -> tuple[np.ndarray, np.ndarray]:
    n = d_row.shape[0]
    safe = np.where(d_row > 0, d_row, 1.0)
    unit = np.where(d_row > 0, pay_row / safe, 0.0) + energy
    order = np.lexsort((np.arange(n), _unit_cost_keys(unit)))
    return order, unit


def solve_eta(i: int, book: ContractBook, types: MapTypeProfile, pricing: PricingParams) -> np.ndarray:
    """Share of every user's offer the provider of type ``i`` trains.

    Users are filled in order of marginal unit cost while the marginal gain
    exceeds that cost and capacity remains; the last one may be fractional.
    """
    d = book.d_enc[i]
    pay = book.pay_enc[i]
    eta = np.zeros(book.n_mus)
    weight = types.types[i] * pricing.upsilon_enc
    cap = types.caps[i]
    order, unit = _greedy_order(d, pay, pricing.map_energy_per_sample)
    s = 0.0
    for m in order:
        if d[m] <= 0:
            continue
        stop = (weight / (2.0 * unit[m])) ** 2
        take = min(d[m], cap - s, stop - s)
        if take <= 0:
            continue
        eta[m] = take / d[m]
        s += take
    return eta


def solve_eta_all(book: ContractBook, types: MapTypeProfile, pricing: PricingParams) -> np.ndarray:
    return np.array([solve_eta(i, book, types, pricing) for i in range(types.n_types)]).reshape(
        types.n_types, book.n_mus)


def _allocation_curve(i: int, n: int, offers: np.ndarray, book: ContractBook,
                      types: MapTypeProfile, pricing: PricingParams):
    """Replay ``solve_eta`` for every candidate offer of user ``n`` at type ``i``.

    Returns the user's trained share, the total trained samples and the total
    encrypted payment, one entry per candidate.
    """
    d = book.d_enc[i].copy()
    pay = book.pay_enc[i].copy()
    energy = pricing.map_energy_per_sample
    # position of user n in the greedy order for a positive offer
    d[n] = 1.0
    pay[n] = pricing.alpha_enc
    order, unit = _greedy_order(d, pay, energy)
    weight = types.types[i] * pricing.upsilon_enc
    cap = types.caps[i]
    k = offers.shape[0]
    s = np.zeros(k)
    paid = np.zeros(k)
    trained = np.zeros(k)
    share_n = np.zeros(k)
    safe_offers = np.where(offers > 0, offers, 1.0)
    for m in order:
        stop = (weight / (2.0 * unit[m])) ** 2
        if m == n:
            take = np.minimum(np.minimum(offers, cap - s), stop - s)
            take = np.where((offers > 0) & (take > 0), take, 0.0)
            share = take / safe_offers
            share_n = share
            trained = trained + share * offers
            paid = paid + share * (pricing.alpha_enc * offers)
        else:
            if book.d_enc[i, m] <= 0:
                continue
            take = np.minimum(np.minimum(book.d_enc[i, m], cap - s), stop - s)
            take = np.where(take > 0, take, 0.0)
            share = take / book.d_enc[i, m]
            trained = trained + share * book.d_enc[i, m]
            paid = paid + share * book.pay_enc[i, m]
        s = s + take
    return share_n, trained, paid


def _surplus(type_value: float, trained: np.ndarray, paid: np.ndarray, pricing: PricingParams) -> np.ndarray:
    return (type_value * pricing.upsilon_enc * np.sqrt(trained) - paid
            - pricing.map_energy_per_sample * trained)


# ---------------------------------------------------------------------------
# verification


def verify_ir(book: ContractBook, eta: np.ndarray, types: MapTypeProfile,
              pricing: PricingParams) -> list[bool]:
    return [map_utility(i, eta, book, types, pricing) >= -MONEY_TOL for i in range(types.n_types)]


def ic_matrix(book: ContractBook, eta: np.ndarray, types: MapTypeProfile,
              pricing: PricingParams) -> np.ndarray:
    """Entry (i, j): encrypted surplus of true type i under the bundle for type j."""
    n_types = types.n_types
    out = np.empty((n_types, n_types))
    for i in range(n_types):
        for j in range(n_types):
            out[i, j] = encrypted_surplus(types.types[i], eta[j], book.pay_enc[j], book.d_enc[j], pricing)
    return out


def verify_ic(book: ContractBook, eta: np.ndarray, types: MapTypeProfile,
              pricing: PricingParams) -> tuple[np.ndarray, bool]:
    mat = ic_matrix(book, eta, types, pricing)
    ok = bool(np.all(np.diag(mat) >= mat.max(axis=1) - MONEY_TOL))
    return mat, ok


def check_monotonicity(book: ContractBook) -> bool:
    if book.n_types < 2:
        return True
    return bool(np.all(np.diff(book.d_enc, axis=0) >= -MONEY_TOL)
                and np.all(np.diff(book.pay_enc, axis=0) >= -MONEY_TOL))


def check_capacity(book: ContractBook, eta: np.ndarray, profiles: Sequence[MuProfile],
                   types: MapTypeProfile) -> bool:
    """Local caps, per-user data budgets and the provider's per-type capacity."""
    d_total = np.array([p.d_total for p in profiles])
    local_cap = np.array([p.d_local_cap for p in profiles])
    trained = eta * book.d_enc
    return bool(np.all(book.d_local <= local_cap + MONEY_TOL)
                and np.all(trained + book.d_local[None, :] <= d_total[None, :] + MONEY_TOL)
                and np.all(trained.sum(axis=1) <= types.caps + MONEY_TOL)
                and np.all((eta >= 0) & (eta <= 1)))


def check_ldic(book: ContractBook, eta: np.ndarray, types: MapTypeProfile,
               pricing: PricingParams) -> bool:
    mat = ic_matrix(book, eta, types, pricing)
    return all(mat[i, i] >= mat[i, i - 1] - MONEY_TOL for i in range(1, types.n_types))


# ---------------------------------------------------------------------------
# best response


def _grid(upper: float, step: float, *extra: float) -> np.ndarray:
    """Multiples of ``step`` up to ``upper`` plus the given endpoints."""
    pts = step * np.arange(int(np.floor(upper / step + 1e-9)) + 1)
    return np.unique(np.concatenate([pts, [upper], extra]))


def offer_grid(mu: MuProfile, step: float) -> np.ndarray:
    local_cap = min(mu.d_local_cap, mu.d_total)
    return _grid(mu.d_total, step, mu.d_total - local_cap)


def local_grid(mu: MuProfile, step: float) -> np.ndarray:
    return _grid(min(mu.d_local_cap, mu.d_total), step)


def _others_local_surplus(book: ContractBook, n: int, d_local: np.ndarray,
                          pricing: PricingParams) -> np.ndarray:
    others = np.delete(book.d_local, n).sum()
    others_pay = np.delete(book.pay_local, n).sum()
    return (pricing.upsilon_local * np.sqrt(others + d_local)
            - (others_pay + pricing.alpha_local * d_local))


@dataclass
class _TypeTables:
    offers: np.ndarray
    value: np.ndarray          # (I, G) expected encrypted utility of user n per type
    own: np.ndarray            # (I, G) surplus of type i under bundle i
    down: np.ndarray           # (I, G) surplus of type i under bundle i - 1 (row 0 unused)
    up: np.ndarray             # (I, G) surplus of type i - 1 under bundle i (row 0 unused)


def _type_tables(n: int, book: ContractBook, profiles: Sequence[MuProfile],
                 types: MapTypeProfile, pricing: PricingParams, step: float) -> _TypeTables:
    mu = profiles[n]
    offers = offer_grid(mu, step)
    n_types = types.n_types
    value = np.empty((n_types, offers.size))
    own = np.empty_like(value)
    down = np.full_like(value, np.nan)
    up = np.full_like(value, np.nan)
    curves = [_allocation_curve(i, n, offers, book, types, pricing) for i in range(n_types)]
    for i, (share, trained, paid) in enumerate(curves):
        actual = share * offers
        value[i] = types.dist[i] * (share * (pricing.alpha_enc * offers)
                                    - privacy_cost(mu.eps_priv, actual, mu.a_fn, pricing.beta_priv)
                                    - pricing.gamma_tx * actual)
        own[i] = _surplus(types.types[i], trained, paid, pricing)
        if i > 0:
            _, trained_prev, paid_prev = curves[i - 1]
            down[i] = _surplus(types.types[i], trained_prev, paid_prev, pricing)
            up[i] = _surplus(types.types[i - 1], trained, paid, pricing)
    return _TypeTables(offers, value, own, down, up)


def _chain_program(tab: _TypeTables, start_mask: np.ndarray, local_upward: bool):
    """Best monotone, downward-compatible offer chain for each final offer.

    Returns the value, total offered data and back-pointers per type.
    """
    n_types, g = tab.value.shape
    val = np.where(start_mask, tab.value[0], -np.inf)
    tot = np.where(start_mask, tab.offers, np.inf)
    back = []
    upper = np.triu(np.ones((g, g), dtype=bool))  # [prev, cur]: cur >= prev
    for i in range(1, n_types):
        feasible = upper & (tab.own[i][None, :] >= tab.down[i][:, None] - SEARCH_TOL)
        if local_upward:
            feasible &= tab.own[i - 1][:, None] >= tab.up[i][None, :] - SEARCH_TOL
        feasible &= np.isfinite(val)[:, None]
        cand = np.where(feasible, val[:, None], -np.inf)
        best = cand.max(axis=0)
        near = feasible & (cand >= best[None, :] - TIE_TOL)
        pick = np.where(near, tot[:, None], np.inf).argmin(axis=0)
        reachable = np.isfinite(best)
        new_val = np.where(reachable, val[pick] + tab.value[i], -np.inf)
        new_tot = np.where(reachable, tot[pick] + tab.offers, np.inf)
        back.append(pick)
        val, tot = new_val, new_tot
    return val, tot, back


def _backtrack(back: list[np.ndarray], last: int) -> list[int]:
    path = [last]
    for pick in reversed(back):
        path.append(int(pick[path[-1]]))
    return path[::-1]


def best_response(n: int, book: ContractBook, profiles: Sequence[MuProfile],
                  types: MapTypeProfile, pricing: PricingParams,
                  cfg: SolverConfig) -> tuple[float, np.ndarray, float]:
    """Exact grid best response of user ``n`` with the other users fixed.

    Returns ``(d_local, d_enc_column, expected_utility)``. If no grid point
    satisfies the constraints the zero contract is returned.
    """
    mu = profiles[n]
    step = cfg.grid_step
    tab = _type_tables(n, book, profiles, types, pricing, step)
    locals_ = local_grid(mu, step)
    local_value = (pricing.alpha_local - mu.local_energy_per_sample) * locals_
    base_local = _others_local_surplus(book, n, locals_, pricing)

    best = (-np.inf, np.inf, None, None, None)  # value, total data, d_local, last, back
    programs: dict[bytes, tuple] = {}
    for li, d_local in enumerate(locals_):
        start = tab.own[0] + base_local[li] >= -SEARCH_TOL
        key = start.tobytes()
        if key not in programs:
            programs[key] = _chain_program(tab, start, cfg.local_upward)
        val, tot, back = programs[key]
        room = tab.offers <= mu.d_total - d_local + 1e-9
        total_val = np.where(room, val + local_value[li], -np.inf)
        if not np.any(np.isfinite(total_val)):
            continue
        top = total_val.max()
        near = np.isfinite(total_val) & (total_val >= top - TIE_TOL)
        last = int(np.where(near, tot + d_local, np.inf).argmin())
        cand_val, cand_tot = total_val[last], tot[last] + d_local
        if cand_val > best[0] + TIE_TOL or (cand_val >= best[0] - TIE_TOL and cand_tot < best[1]):
            best = (cand_val, cand_tot, float(d_local), last, back)

    if best[2] is None:
        return 0.0, np.zeros(types.n_types), _zero_utility(n, book, profiles, types, pricing)
    path = _backtrack(best[4], best[3])
    return best[2], tab.offers[path], float(best[0])


def _zero_utility(n, book, profiles, types, pricing) -> float:
    zero = book.with_user(n, 0.0, np.zeros(types.n_types), pricing)
    return mu_expected_utility(n, zero, solve_eta_all(zero, types, pricing), profiles, types, pricing)


# ---------------------------------------------------------------------------
# equilibrium and comparators


def iterate_contracts(profiles: Sequence[MuProfile], types: MapTypeProfile,
                      pricing: PricingParams, cfg: SolverConfig = SolverConfig(),
                      initial: ContractBook | None = None) -> EquilibriumResult:
    """Sequential best-response sweeps until no user changes its contract."""
    if len(profiles) < 1:
        raise ValueError("at least one user is required")
    book = initial.copy() if initial is not None else ContractBook.zeros(types.n_types, len(profiles))
    trace: list[list[float]] = []
    converged = False
    sweeps = 0
    for sweeps in range(1, cfg.max_iters + 1):
        changed = False
        for n in range(len(profiles)):
            eta = solve_eta_all(book, types, pricing)
            current = mu_expected_utility(n, book, eta, profiles, types, pricing)
            d_local, d_enc, value = best_response(n, book, profiles, types, pricing, cfg)
            if value > current + cfg.sigma:
                book = book.with_user(n, d_local, d_enc, pricing)
                changed = True
        eta = solve_eta_all(book, types, pricing)
        trace.append([mu_expected_utility(n, book, eta, profiles, types, pricing)
                      for n in range(len(profiles))])
        if not changed:
            converged = True
            break
    eta = solve_eta_all(book, types, pricing)
    return EquilibriumResult(book, eta, sweeps, trace, converged)


def _info_symmetry_response(n: int, i: int, book: ContractBook, profiles: Sequence[MuProfile],
                            types: MapTypeProfile, pricing: PricingParams, step: float):
    mu = profiles[n]
    offers = offer_grid(mu, step)
    share, trained, paid = _allocation_curve(i, n, offers, book, types, pricing)
    actual = share * offers
    enc_value = (share * (pricing.alpha_enc * offers)
                 - privacy_cost(mu.eps_priv, actual, mu.a_fn, pricing.beta_priv)
                 - pricing.gamma_tx * actual)
    surplus = _surplus(types.types[i], trained, paid, pricing)
    locals_ = local_grid(mu, step)
    local_value = (pricing.alpha_local - mu.local_energy_per_sample) * locals_
    base_local = _others_local_surplus(book, n, locals_, pricing)

    total = local_value[:, None] + enc_value[None, :]
    feasible = ((surplus[None, :] + base_local[:, None] >= -SEARCH_TOL)
                & (offers[None, :] + locals_[:, None] <= mu.d_total + 1e-9))
    total = np.where(feasible, total, -np.inf)
    if not np.any(feasible):
        return 0.0, 0.0, None
    top = total.max()
    near = feasible & (total >= top - TIE_TOL)
    size = np.where(near, locals_[:, None] + offers[None, :], np.inf)
    li, gi = np.unravel_index(int(size.argmin()), size.shape)
    return float(locals_[li]), float(offers[gi]), float(total[li, gi])


def solve_info_symmetry(i_true: int, profiles: Sequence[MuProfile], types: MapTypeProfile,
                        pricing: PricingParams, cfg: SolverConfig = SolverConfig()) -> ContractBook:
    """Contracts when every user knows the provider's type is ``i_true``.

    Coordinate ascent over users on the shared grid, subject only to the
    user's data budget and the provider's participation at the known type.
    Every type row carries the same offer; only row ``i_true`` matters.
    """
    n_types = types.n_types
    # Utilities at a known type are evaluated with a point-mass prior.
    dist = [0.0] * n_types
    dist[i_true] = 1.0
    point = MapTypeProfile(types.types, tuple(dist), types.d_max_enc)
    book = ContractBook.zeros(n_types, len(profiles))
    for _ in range(cfg.max_iters):
        changed = False
        for n in range(len(profiles)):
            eta = solve_eta_all(book, types, pricing)
            current = mu_expected_utility(n, book, eta, profiles, point, pricing)
            d_local, d_enc, value = _info_symmetry_response(n, i_true, book, profiles, types,
                                                           pricing, cfg.grid_step)
            if value is not None and value > current + cfg.sigma:
                book = book.with_user(n, d_local, np.full(n_types, d_enc), pricing)
                changed = True
        if not changed:
            break
    return book


def baseline_proportional(profiles: Sequence[MuProfile], types: MapTypeProfile,
                          pricing: PricingParams) -> ContractBook:
    """Each user offers its data-size share of every type's capacity."""
    d_total = np.array([p.d_total for p in profiles])
    d_local = np.array([p.d_local_cap for p in profiles])
    share = d_total / d_total.sum()
    d_enc = np.minimum(types.caps[:, None] * share[None, :], (d_total - d_local)[None, :])
    return ContractBook.from_sizes(d_local, d_enc, pricing)


def expected_welfare(book: ContractBook, eta: np.ndarray, profiles: Sequence[MuProfile],
                     types: MapTypeProfile, pricing: PricingParams) -> float:
    return float(sum(p * social_welfare(i, eta, book, profiles, types, pricing)
                     for i, p in enumerate(types.dist)))
