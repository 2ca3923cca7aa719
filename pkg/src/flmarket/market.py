"""Economic quantities of the marketplace.

Gains, costs and the privacy cost of encrypted offloading, the provider's
utility per type, the users' expected and realized utilities, and social
welfare. All functions are pure; money is a float64 and comparisons use an
absolute slack of ``MONEY_TOL``.

Indexing convention: types are 0-based positions into ``MapTypeProfile.types``
and users are 0-based positions into the profile list (not their ``id``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MONEY_TOL = 1e-9


class ParameterError(ValueError):
    """An economic parameter is outside its admissible range."""


@dataclass(frozen=True)
class MapTypeProfile:
    """Provider types, their prior and the encrypted-data capacity per type."""

    types: tuple[float, ...]
    dist: tuple[float, ...]
    d_max_enc: float

    def __post_init__(self):
        types = tuple(float(t) for t in self.types)
        dist = tuple(float(p) for p in self.dist)
        object.__setattr__(self, "types", types)
        object.__setattr__(self, "dist", dist)
        if not types:
            raise ParameterError("at least one provider type is required")
        if len(dist) != len(types):
            raise ParameterError("types and dist must have equal length")
        if any(t <= 0 for t in types):
            raise ParameterError("types must be positive")
        if any(b <= a for a, b in zip(types, types[1:])):
            raise ParameterError("types must be strictly increasing")
        if any(p < 0 for p in dist) or abs(sum(dist) - 1.0) > 1e-9:
            raise ParameterError("dist must be non-negative and sum to 1")
        if not self.d_max_enc > 0:
            raise ParameterError("d_max_enc must be positive")

    @classmethod
    def uniform(cls, types: Sequence[float], d_max_enc: float) -> "MapTypeProfile":
        return cls(tuple(types), tuple([1.0 / len(types)] * len(types)), d_max_enc)

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def caps(self) -> np.ndarray:
        """Encrypted samples each type can train, proportional to the type."""
        t = np.asarray(self.types)
        return t / t[-1] * self.d_max_enc


@dataclass(frozen=True)
class MuProfile:
    """Static description of one mobile user."""

    id: int
    d_total: float
    d_local_cap: float
    eps_priv: float
    a_fn: float = 10.0
    zeta: float = 0.5e-26
    cycles_per_sample: float = 44880.0
    freq: float = 2e9
    rate: float = 293e6
    compute: float = 1.0

    def __post_init__(self):
        for name in ("d_total", "d_local_cap", "eps_priv", "a_fn", "zeta",
                     "cycles_per_sample", "freq", "rate", "compute"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"user {self.id}: {name} must be positive")
        if self.d_local_cap > self.d_total:
            raise ParameterError(f"user {self.id}: d_local_cap exceeds d_total")
        if self.eps_priv > 1:
            raise ParameterError(f"user {self.id}: eps_priv must be in (0, 1]")

    @property
    def local_energy_per_sample(self) -> float:
        return self.zeta * self.cycles_per_sample * self.freq ** 2


@dataclass(frozen=True)
class PricingParams:
    """Unit prices, monetary conversion factors and provider energy constants."""

    alpha_enc: float = 0.001
    alpha_local: float = 0.005
    upsilon_enc: float = 0.125
    upsilon_local: float = 3.0
    beta_priv: float = 1.0
    gamma_tx: float = 1e-4
    zeta_map: float = 0.5e-26
    cycles_map: float = 4488.0
    freq_map: float = 2e9

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ParameterError(f"pricing.{name} must be positive")

    @property
    def map_energy_per_sample(self) -> float:
        return self.zeta_map * self.cycles_map * self.freq_map ** 2


@dataclass
class ContractBook:
    """Offered sizes and payments of every user.

    ``d_local``/``pay_local`` have shape (N,); ``d_enc``/``pay_enc`` have
    shape (I, N) with one row per provider type.
    """

    d_local: np.ndarray
    pay_local: np.ndarray
    d_enc: np.ndarray
    pay_enc: np.ndarray

    def __post_init__(self):
        self.d_local = np.asarray(self.d_local, dtype=float).reshape(-1)
        self.pay_local = np.asarray(self.pay_local, dtype=float).reshape(-1)
        self.d_enc = np.asarray(self.d_enc, dtype=float)
        self.pay_enc = np.asarray(self.pay_enc, dtype=float)
        if self.d_enc.ndim != 2 or self.d_enc.shape[1] != self.d_local.shape[0]:
            raise ValueError("d_enc must have shape (n_types, n_mus)")
        if self.pay_enc.shape != self.d_enc.shape or self.pay_local.shape != self.d_local.shape:
            raise ValueError("payment and size shapes differ")
        for name in ("d_local", "pay_local", "d_enc", "pay_enc"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_sizes(cls, d_local, d_enc, pricing: PricingParams) -> "ContractBook":
        """Build a book whose payments follow the linear unit prices."""
        d_local = np.asarray(d_local, dtype=float)
        d_enc = np.asarray(d_enc, dtype=float)
        return cls(d_local, pricing.alpha_local * d_local, d_enc, pricing.alpha_enc * d_enc)

    @classmethod
    def zeros(cls, n_types: int, n_mus: int) -> "ContractBook":
        return cls(np.zeros(n_mus), np.zeros(n_mus), np.zeros((n_types, n_mus)),
                   np.zeros((n_types, n_mus)))

    @property
    def n_mus(self) -> int:
        return self.d_local.shape[0]

    @property
    def n_types(self) -> int:
        return self.d_enc.shape[0]

    def copy(self) -> "ContractBook":
        return ContractBook(self.d_local.copy(), self.pay_local.copy(),
                            self.d_enc.copy(), self.pay_enc.copy())

    def with_user(self, n: int, d_local: float, d_enc_col, pricing: PricingParams) -> "ContractBook":
        """Return a copy where user ``n`` offers the given linear-priced contract."""
        book = self.copy()
        book.d_local[n] = d_local
        book.pay_local[n] = pricing.alpha_local * d_local
        book.d_enc[:, n] = d_enc_col
        book.pay_enc[:, n] = pricing.alpha_enc * np.asarray(d_enc_col, dtype=float)
        return book

    def to_dict(self) -> dict:
        return {
            "d_local": self.d_local.tolist(),
            "pay_local": self.pay_local.tolist(),
            "d_enc": self.d_enc.tolist(),
            "pay_enc": self.pay_enc.tolist(),
        }


def _check_type(i: int, n_types: int) -> None:
    if not 0 <= i < n_types:
        raise IndexError(f"type index {i} outside [0, {n_types})")


def _rows(*arrays) -> list[np.ndarray]:
    out = [np.asarray(a, dtype=float).reshape(-1) for a in arrays]
    if len({a.shape[0] for a in out}) > 1:
        raise ValueError("row lengths differ")
    return out


def privacy_cost(eps, d_enc_actual, a_fn, beta):
    """Privacy cost of releasing ``d_enc_actual`` encrypted samples.

    (beta / 2) * log2(1 + eps * d / a_fn**2). Works elementwise on arrays.
    """
    if np.any(np.asarray(a_fn) <= 0) or np.any(np.asarray(beta) <= 0):
        raise ParameterError("a_fn and beta must be positive")
    eps = np.asarray(eps, dtype=float)
    if np.any(eps <= 0) or np.any(eps > 1):
        raise ParameterError("eps must be in (0, 1]")
    d = np.asarray(d_enc_actual, dtype=float)
    if np.any(d < 0):
        raise ParameterError("sample count must be non-negative")
    out = 0.5 * np.asarray(beta) * np.log1p(eps * d / np.asarray(a_fn, dtype=float) ** 2) / math.log(2)
    return float(out) if out.ndim == 0 else out


def gain_encrypted(eta_row, d_enc_row, upsilon_enc: float) -> float:
    eta, d = _rows(eta_row, d_enc_row)
    if np.any(eta < 0) or np.any(d < 0):
        raise ValueError("negative proportion or size")
    return upsilon_enc * math.sqrt(float(np.sum(eta * d)))


def gain_local(d_local, upsilon_local: float) -> float:
    (d,) = _rows(d_local)
    if np.any(d < 0):
        raise ValueError("negative local size")
    return upsilon_local * math.sqrt(float(np.sum(d)))


def cost_encrypted(eta_row, pay_enc_row, d_enc_row, pricing: PricingParams) -> float:
    eta, pay, d = _rows(eta_row, pay_enc_row, d_enc_row)
    return float(np.sum(eta * pay)) + pricing.map_energy_per_sample * float(np.sum(eta * d))


def cost_local(pay_local) -> float:
    (pay,) = _rows(pay_local)
    if np.any(pay < 0):
        raise ValueError("negative payment")
    return float(np.sum(pay))


def encrypted_surplus(type_value: float, eta_row, pay_enc_row, d_enc_row,
                      pricing: PricingParams) -> float:
    """Provider surplus from the encrypted part of one type's bundle."""
    return (type_value * gain_encrypted(eta_row, d_enc_row, pricing.upsilon_enc)
            - cost_encrypted(eta_row, pay_enc_row, d_enc_row, pricing))


def local_surplus(book: ContractBook, pricing: PricingParams) -> float:
    return gain_local(book.d_local, pricing.upsilon_local) - cost_local(book.pay_local)


def map_utility(i: int, eta: np.ndarray, book: ContractBook, profile: MapTypeProfile,
                pricing: PricingParams) -> float:
    """Provider utility when its true type is ``i``."""
    _check_type(i, profile.n_types)
    if book.n_mus == 0:
        return 0.0
    eta = np.asarray(eta, dtype=float)
    return (encrypted_surplus(profile.types[i], eta[i], book.pay_enc[i], book.d_enc[i], pricing)
            + local_surplus(book, pricing))


def mu_realized_utility(n: int, i: int, book: ContractBook, eta: np.ndarray,
                        profiles: Sequence[MuProfile], pricing: PricingParams) -> float:
    """Utility of user ``n`` when the provider's type turns out to be ``i``."""
    if not 0 <= n < len(profiles):
        raise IndexError(f"user index {n} out of range")
    _check_type(i, book.n_types)
    mu = profiles[n]
    share = float(eta[i][n])
    actual = share * book.d_enc[i, n]
    enc = (share * book.pay_enc[i, n]
           - privacy_cost(mu.eps_priv, actual, mu.a_fn, pricing.beta_priv)
           - pricing.gamma_tx * actual)
    loc = book.pay_local[n] - mu.local_energy_per_sample * book.d_local[n]
    return enc + loc


def mu_expected_utility(n: int, book: ContractBook, eta: np.ndarray,
                        profiles: Sequence[MuProfile], profile: MapTypeProfile,
                        pricing: PricingParams) -> float:
    """Expected utility of user ``n`` over the provider's type prior."""
    if not 0 <= n < len(profiles):
        raise IndexError(f"user index {n} out of range")
    return float(sum(p * mu_realized_utility(n, i, book, eta, profiles, pricing)
                     for i, p in enumerate(profile.dist)))


def mu_total_actual_utility(i: int, book: ContractBook, eta: np.ndarray,
                            profiles: Sequence[MuProfile], pricing: PricingParams) -> float:
    _check_type(i, book.n_types)
    return float(sum(mu_realized_utility(n, i, book, eta, profiles, pricing)
                     for n in range(len(profiles))))


def social_welfare(i: int, eta: np.ndarray, book: ContractBook,
                   profiles: Sequence[MuProfile], profile: MapTypeProfile,
                   pricing: PricingParams) -> float:
    """Provider utility plus all users' realized utilities at type ``i``."""
    return (map_utility(i, eta, book, profile, pricing)
            + mu_total_actual_utility(i, book, eta, profiles, pricing))
