import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flmarket.market import (ContractBook, MapTypeProfile, MuProfile, ParameterError, PricingParams,
                             cost_encrypted, cost_local, gain_encrypted, gain_local, map_utility,
                             mu_expected_utility, mu_realized_utility, mu_total_actual_utility,
                             privacy_cost, social_welfare)

# (beta/2) * log2(1 + 0.5 * 1000 / 10**2) = log2(6) / 2, evaluated at 50 digits
PRIVACY_ORACLE = 1.292481250360578090726869


def test_privacy_cost_trivial_points():
    assert privacy_cost(1.0, 0.0, 3.0, 1.0) == 0.0
    for a in (0.5, 3.0, 17.0):
        assert privacy_cost(1.0, a * a, a, 1.0) == pytest.approx(0.5, abs=1e-15)


def test_privacy_cost_high_precision_oracle():
    mpmath.mp.dps = 50
    exact = mpmath.mpf(1) / 2 * mpmath.log(1 + mpmath.mpf("0.5") * 1000 / 100, 2)
    assert float(exact) == pytest.approx(PRIVACY_ORACLE, abs=1e-15)
    assert privacy_cost(0.5, 1000.0, 10.0, 1.0) == pytest.approx(PRIVACY_ORACLE, abs=1e-14)
    # extended-precision evaluation through numpy's long double
    ld = np.longdouble(0.5) * np.log2(np.longdouble(1) + np.longdouble(0.5) * 1000 / 100)
    assert float(ld) == pytest.approx(PRIVACY_ORACLE, abs=1e-15)


@pytest.mark.parametrize("args", [(0.5, 10.0, 0.0, 1.0), (0.5, 10.0, 1.0, 0.0), (0.0, 10.0, 1.0, 1.0),
                                  (1.5, 10.0, 1.0, 1.0), (0.5, -1.0, 1.0, 1.0)])
def test_privacy_cost_rejects_bad_parameters(args):
    eps, d, a, beta = args
    with pytest.raises(ParameterError):
        privacy_cost(eps, d, a, beta)


@settings(max_examples=200, deadline=None)
@given(eps=st.floats(0.01, 1.0), a=st.floats(0.1, 50.0), beta=st.floats(0.1, 5.0),
       d=st.lists(st.floats(0.0, 1e6), min_size=3, max_size=3))
def test_privacy_cost_increasing_and_concave(eps, a, beta, d):
    x, y, z = sorted(d)
    assert privacy_cost(eps, 0.0, a, beta) == 0.0
    px, py, pz = (privacy_cost(eps, v, a, beta) for v in (x, y, z))
    assert px <= py + 1e-12 <= pz + 2e-12
    if z > x:
        t = 0.37
        mid = t * x + (1 - t) * z
        assert privacy_cost(eps, mid, a, beta) >= t * px + (1 - t) * pz - 1e-9


def test_gain_examples():
    assert gain_encrypted([1] * 4, [2500] * 4, 0.125) == pytest.approx(12.5)
    assert gain_encrypted([0, 0], [5, 7], 0.125) == 0.0
    assert gain_encrypted([0.5, 0.5], [200, 600], 1.0) == pytest.approx(20.0)
    assert gain_local([0, 0, 0], 3.0) == 0.0
    assert gain_local([400, 500], 3.0) == pytest.approx(90.0)
    assert gain_local([2500], 3.0) == pytest.approx(150.0)


def test_gain_errors():
    with pytest.raises(ValueError):
        gain_encrypted([1, 1], [1, 2, 3], 1.0)
    with pytest.raises(ValueError):
        gain_local([-1.0, 2.0], 3.0)


@settings(max_examples=200, deadline=None)
@given(x=st.lists(st.floats(0, 1e5), min_size=3, max_size=3),
       y=st.lists(st.floats(0, 1e5), min_size=3, max_size=3), t=st.floats(0, 1))
def test_gains_concave(x, y, t):
    x, y = np.array(x), np.array(y)
    mix = t * x + (1 - t) * y
    assert gain_local(mix, 3.0) >= t * gain_local(x, 3.0) + (1 - t) * gain_local(y, 3.0) - 1e-9
    ones = np.ones(3)
    lhs = gain_encrypted(ones, mix, 0.125)
    assert lhs >= t * gain_encrypted(ones, x, 0.125) + (1 - t) * gain_encrypted(ones, y, 0.125) - 1e-9


def test_cost_examples():
    p = PricingParams(zeta_map=1.0, cycles_map=0.001, freq_map=1.0)
    assert cost_encrypted([0, 0], [3, 4], [10, 20], p) == 0.0
    assert cost_encrypted([1], [5], [1000], p) == pytest.approx(6.0)
    assert cost_local([]) == 0.0
    assert cost_local([1, 2, 3]) == 6.0
    d = np.array([1000.0, 2000.0])
    assert cost_local(0.005 * d) == pytest.approx(15.0)
    with pytest.raises(ValueError):
        cost_local([1.0, -2.0])
    with pytest.raises(ValueError):
        cost_encrypted([1, 1], [1], [1, 1], p)


def test_cost_encrypted_default_energy_exact_oracle():
    p = PricingParams()
    energy = Fraction(5, 10 ** 27) * 4488 * (2 * 10 ** 9) ** 2
    oracle = Fraction(10) + energy * 10 ** 4
    assert float(oracle) == 10.8976
    assert cost_encrypted([1.0], [10.0], [1e4], p) == pytest.approx(float(oracle), abs=1e-12)


def test_type_profile_invariants():
    prof = MapTypeProfile.uniform([1, 2, 4], 8.0)
    assert np.allclose(prof.caps, [2.0, 4.0, 8.0])
    assert prof.caps[-1] == 8.0
    for bad in (dict(types=(2, 1), dist=(0.5, 0.5)), dict(types=(1, 2), dist=(0.7, 0.7)),
                dict(types=(0, 1), dist=(0.5, 0.5)), dict(types=(), dist=())):
        with pytest.raises(ParameterError):
            MapTypeProfile(d_max_enc=1.0, **bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=12, unique=True))
def test_caps_monotone(vals):
    prof = MapTypeProfile.uniform(sorted(vals), 5e5)
    assert np.all(np.diff(prof.caps) >= 0)
    assert prof.caps[-1] == pytest.approx(5e5)


def test_mu_profile_validation():
    with pytest.raises(ParameterError):
        MuProfile(0, 100.0, 200.0, 0.5)
    with pytest.raises(ParameterError):
        MuProfile(0, 100.0, 50.0, 1.5)
    with pytest.raises(ParameterError):
        MuProfile(0, 100.0, 50.0, 0.5, a_fn=0.0)


def _two_user_case():
    p = PricingParams()
    types = MapTypeProfile.uniform([1.0, 2.0], 5e5)
    profs = [MuProfile(0, 3e4, 1e4, 0.4), MuProfile(1, 5e4, 2e4, 0.9)]
    book = ContractBook.from_sizes([5000.0, 8000.0], [[4000.0, 6000.0], [9000.0, 12000.0]], p)
    eta = np.array([[1.0, 0.5], [0.75, 1.0]])
    return p, types, profs, book, eta


def test_map_utility_trivial_cases(pricing):
    types = MapTypeProfile.uniform([1.0, 2.0], 100.0)
    empty = ContractBook.zeros(2, 0)
    assert map_utility(0, np.zeros((2, 0)), empty, types, pricing) == 0.0
    single = ContractBook.zeros(2, 1)
    assert map_utility(1, np.zeros((2, 1)), single, types, pricing) == 0.0
    with pytest.raises(IndexError):
        map_utility(2, np.zeros((2, 1)), single, types, pricing)


def test_map_utility_component_oracle():
    p, types, profs, book, eta = _two_user_case()
    for i in range(2):
        trained = sum(eta[i, n] * book.d_enc[i, n] for n in range(2))
        paid = sum(eta[i, n] * p.alpha_enc * book.d_enc[i, n] for n in range(2))
        energy = 0.5e-26 * 4488 * 4e18 * trained
        local = 3.0 * math.sqrt(13000.0) - 0.005 * 13000.0
        oracle = types.types[i] * 0.125 * math.sqrt(trained) - paid - energy + local
        assert map_utility(i, eta, book, types, p) == pytest.approx(oracle, abs=1e-9)


def test_mu_utilities():
    p, types, profs, book, eta = _two_user_case()
    zero = ContractBook.zeros(2, 2)
    assert mu_expected_utility(0, zero, np.zeros((2, 2)), profs, types, p) == 0.0
    # per-user oracle from the closed form
    def oracle(n, i):
        mu = profs[n]
        actual = eta[i, n] * book.d_enc[i, n]
        xi = 0.5 * math.log2(1 + mu.eps_priv * actual / 100.0)
        loc = 0.005 * book.d_local[n] - 0.5e-26 * 44880 * 4e18 * book.d_local[n]
        return eta[i, n] * 0.001 * book.d_enc[i, n] - xi - 1e-4 * actual + loc
    for n in range(2):
        for i in range(2):
            assert mu_realized_utility(n, i, book, eta, profs, p) == pytest.approx(oracle(n, i), abs=1e-9)
        expected = 0.5 * oracle(n, 0) + 0.5 * oracle(n, 1)
        assert mu_expected_utility(n, book, eta, profs, types, p) == pytest.approx(expected, abs=1e-9)
    for i in range(2):
        assert mu_total_actual_utility(i, book, eta, profs, p) == pytest.approx(
            oracle(0, i) + oracle(1, i), abs=1e-9)
    with pytest.raises(IndexError):
        mu_expected_utility(5, book, eta, profs, types, p)


def test_point_mass_prior_equals_realized_utility():
    p, types, profs, book, eta = _two_user_case()
    point = MapTypeProfile(types.types, (0.0, 1.0), types.d_max_enc)
    assert mu_expected_utility(1, book, eta, profs, point, p) == pytest.approx(
        mu_realized_utility(1, 1, book, eta, profs, p), abs=1e-12)


def test_identical_type_contracts_expectation_is_constant():
    p = PricingParams()
    profs = [MuProfile(0, 3e4, 1e4, 0.4)]
    book = ContractBook.from_sizes([1000.0], [[5000.0], [5000.0]], p)
    eta = np.ones((2, 1))
    single = MapTypeProfile.uniform([1.0], 5e5)
    two = MapTypeProfile.uniform([1.0, 2.0], 5e5)
    book1 = ContractBook.from_sizes([1000.0], [[5000.0]], p)
    assert mu_expected_utility(0, book, eta, profs, two, p) == pytest.approx(
        mu_expected_utility(0, book1, np.ones((1, 1)), profs, single, p), abs=1e-12)


def test_social_welfare_zero_economy(pricing):
    types = MapTypeProfile.uniform([1.0], 10.0)
    profs = [MuProfile(0, 10.0, 5.0, 0.5)]
    assert social_welfare(0, np.zeros((1, 1)), ContractBook.zeros(1, 1), profs, types, pricing) == 0.0


@settings(max_examples=60, deadline=None)
@given(a_enc=st.floats(1e-4, 1e-1), a_loc=st.floats(1e-4, 1e-1), seed=st.integers(0, 10 ** 6))
def test_social_welfare_invariant_to_prices(a_enc, a_loc, seed):
    rng = np.random.default_rng(seed)
    types = MapTypeProfile.uniform([1.0, 3.0], 5e5)
    profs = [MuProfile(n, 4e4, 1e4, float(rng.uniform(0.1, 1))) for n in range(3)]
    d_loc = rng.uniform(0, 1e4, 3)
    d_enc = rng.uniform(0, 3e4, (2, 3))
    eta = rng.uniform(0, 1, (2, 3))
    base = PricingParams()
    other = PricingParams(alpha_enc=a_enc, alpha_local=a_loc)
    for i in range(2):
        w1 = social_welfare(i, eta, ContractBook.from_sizes(d_loc, d_enc, base), profs, types, base)
        w2 = social_welfare(i, eta, ContractBook.from_sizes(d_loc, d_enc, other), profs, types, other)
        assert w1 == pytest.approx(w2, abs=1e-9 * max(1.0, abs(w1)))
        # transfer-free recomputation
        trained = eta[i] * d_enc[i]
        strip = (types.types[i] * 0.125 * math.sqrt(trained.sum()) - base.map_energy_per_sample * trained.sum()
                 + 3.0 * math.sqrt(d_loc.sum())
                 - sum(privacy_cost(profs[n].eps_priv, trained[n], 10.0, 1.0) for n in range(3))
                 - 1e-4 * trained.sum() - profs[0].local_energy_per_sample * d_loc.sum())
        assert w1 == pytest.approx(strip, abs=1e-9 * max(1.0, abs(strip)))


def test_book_validation(pricing):
    with pytest.raises(ValueError):
        ContractBook(np.zeros(2), np.zeros(2), np.zeros((3, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        ContractBook.from_sizes([-1.0], [[1.0]], pricing)
    book = ContractBook.from_sizes([100.0], [[10.0], [20.0]], pricing)
    assert book.pay_local[0] == pytest.approx(0.5)
    assert np.allclose(book.pay_enc[:, 0], [0.01, 0.02])
