import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedleak import udp
from fedleak.errors import ConfigError, DomainError
from fedleak.nn import ParamSet


def test_sigma_reference_values():
    # sqrt(2 * 0.1 * 200 * ln 2) / eps = sqrt(40 ln 2) / eps
    ref = math.sqrt(40 * math.log(2))
    assert ref == pytest.approx(5.265537695, rel=1e-9)
    assert udp.sigma(1.0, 0.1, 200, 0.5, 10) == pytest.approx(ref / 10, rel=1e-12)
    assert udp.sigma(1.0, 0.1, 200, 0.5, 5) == pytest.approx(ref / 5, rel=1e-12)
    assert udp.sigma(1.0, 0.1, 200, 0.5, 5) == 2 * udp.sigma(1.0, 0.1, 200, 0.5, 10)


@given(T=st.integers(1, 500), k=st.integers(2, 5))
def test_sigma_increases_with_rounds_and_rate(T, k):
    assert udp.sigma(1.0, 0.1, T * k, 0.5, 5) > udp.sigma(1.0, 0.1, T, 0.5, 5)
    assert udp.sigma(1.0, 0.1 * k / 5, T, 0.5, 5) > udp.sigma(1.0, 0.1 / 5, T, 0.5, 5)


def test_sigma_vanishes_as_delta_tends_to_one():
    vals = [udp.sigma(1.0, 0.1, 200, d, 5) for d in (0.5, 0.9, 0.99, 0.9999)]
    assert all(a > b > 0 for a, b in zip(vals, vals[1:]))


def test_sigma_off_is_zero():
    assert udp.sigma(1.0, 0.1, 200, 0.5, math.inf) == 0.0
    assert udp.sigma(1.0, 0.1, 200, 0.5, "inf") == 0.0


@given(sens=st.floats(1e-6, 10), q=st.floats(1e-3, 1.0), T=st.integers(1, 1000),
       delta=st.floats(1e-6, 0.999), eps=st.floats(0.01, 100))
def test_calibration_equality(sens, q, T, delta, eps):
    sig = udp.sigma(sens, q, T, delta, eps)
    lhs = udp.privacy_log_term(sens, q, T, eps, sig)
    assert lhs == pytest.approx(math.log(1 / delta), rel=1e-9)
    assert udp.satisfies(sens, q, T, delta, eps, sig)
    assert not udp.satisfies(sens, q, T, delta, eps, sig * 0.99)


@given(eps=st.floats(0.1, 50), k=st.floats(1.1, 10))
def test_sigma_decreases_with_epsilon(eps, k):
    assert udp.sigma(1.0, 0.1, 200, 0.5, eps * k) < udp.sigma(1.0, 0.1, 200, 0.5, eps)


def test_sensitivity():
    assert udp.sensitivity(0.0005, 0.25, 20) == pytest.approx(2 * 0.0005 * 0.25 / 20)
    with pytest.raises(ConfigError):
        udp.sensitivity(0.1, 0.25, 0)


@pytest.mark.parametrize("args", [(1.0, 0.1, 200, 0.0, 1.0), (1.0, 0.1, 200, 1.0, 1.0),
                                  (1.0, 0.0, 200, 0.5, 1.0), (1.0, 1.5, 200, 0.5, 1.0),
                                  (1.0, 0.1, 0, 0.5, 1.0), (1.0, 0.1, 200, 0.5, 0.0),
                                  (1.0, 0.1, 200, 0.5, -3.0)])
def test_sigma_domain_errors(args):
    with pytest.raises(DomainError):
        udp.sigma(*args)


@pytest.mark.parametrize("text,value", [("inf", math.inf), ("Infinity", math.inf), ("off", math.inf),
                                        (None, math.inf), ("2.5", 2.5), (7, 7.0)])
def test_parse_epsilon(text, value):
    assert udp.parse_epsilon(text) == value


def test_parse_epsilon_rejects_garbage():
    with pytest.raises(ConfigError):
        udp.parse_epsilon("big")
    with pytest.raises(DomainError):
        udp.parse_epsilon("0")


def test_privacy_spec_derive():
    spec = udp.PrivacySpec.derive(10, 0.5, 0.0005, 0.25, 20, 0.1, 200)
    assert spec.sensitivity == pytest.approx(1.25e-5)
    assert spec.sigma == pytest.approx(1.25e-5 * math.sqrt(40 * math.log(2)) / 10, rel=1e-12)
    assert not spec.off
    off = udp.PrivacySpec.derive("inf", 0.5, 0.0005, 0.25, 20, 0.1, 200)
    assert off.off and off.sigma == 0.0 and off.to_dict()["epsilon"] == "inf"


def test_perturb_statistics(rng):
    p = ParamSet([(np.zeros((1000, 999)), np.zeros(1000))])
    flat = udp.perturb(p, 1.0, rng).flatten()
    assert flat.size == 10 ** 6
    assert abs(flat.mean()) <= 0.004
    assert 0.997 <= flat.std() <= 1.003
    assert udp.perturb(p, 0.0, rng) is p


def test_perturb_is_unbiased(rng):
    base = ParamSet([(rng.normal(size=(3, 4)), rng.normal(size=3))])
    draws = np.stack([udp.perturb(base, 0.5, rng).flatten() for _ in range(1000)])
    assert np.all(np.abs(draws.mean(axis=0) - base.flatten()) <= 3 * 0.5 / np.sqrt(1000))


def test_perturb_keeps_dtype(rng):
    p = ParamSet([(np.zeros((3, 4), np.float32), np.zeros(3, np.float32))])
    assert udp.perturb(p, 1.0, rng).dtype == np.float32


# (epsilon, delta, n) -> (n*eps, n*delta, vacuous); vacuous iff n*delta >= 1
COMPOSITION_TABLE = [
    (1.0, 0.1, 1, 1.0, 0.1, False), (1.0, 0.1, 5, 5.0, 0.5, False), (1.0, 0.1, 9, 9.0, 0.9, False),
    (1.0, 0.1, 10, 10.0, 1.0, True), (1.0, 0.1, 11, 11.0, 1.1, True), (5.0, 0.5, 1, 5.0, 0.5, False),
    (5.0, 0.5, 2, 10.0, 1.0, True), (5.0, 0.5, 3, 15.0, 1.5, True), (10.0, 1e-5, 10, 100.0, 1e-4, False),
    (25.0, 0.25, 4, 100.0, 1.0, True), (25.0, 0.25, 3, 75.0, 0.75, False), (50.0, 0.01, 99, 4950.0, 0.99, False),
    (50.0, 0.01, 100, 5000.0, 1.0, True), (0.5, 0.2, 5, 2.5, 1.0, True), (0.5, 0.2, 4, 2.0, 0.8, False),
    (2.0, 0.125, 8, 16.0, 1.0, True), (2.0, 0.125, 7, 14.0, 0.875, False), (3.0, 0.5, 1, 3.0, 0.5, False),
    (math.inf, 0.5, 1, math.inf, 0.5, False), (math.inf, 0.5, 2, math.inf, 1.0, True),
]


@pytest.mark.parametrize("eps,delta,n,ce,cd,vac", COMPOSITION_TABLE)
def test_compose_table(eps, delta, n, ce, cd, vac):
    rep = udp.compose(eps, delta, n)
    assert rep.composed_epsilon == ce
    assert rep.composed_delta == pytest.approx(cd, rel=1e-15)
    assert rep.vacuous is vac


@given(st.floats(0.01, 100), st.floats(1e-6, 0.99), st.integers(1, 50), st.integers(1, 50))
def test_compose_is_additive(eps, delta, a, b):
    ra, rb, rab = udp.compose(eps, delta, a), udp.compose(eps, delta, b), udp.compose(eps, delta, a + b)
    assert rab.composed_epsilon == pytest.approx(ra.composed_epsilon + rb.composed_epsilon, rel=1e-12)
    assert rab.composed_delta == pytest.approx(ra.composed_delta + rb.composed_delta, rel=1e-12)
    assert rab.vacuous == (rab.composed_delta >= 1)


def test_compose_rejects_bad_n():
    for n in (0, -1, 2.5):
        with pytest.raises(DomainError):
            udp.compose(1.0, 0.1, n)


def test_snr_db():
    clean = ParamSet([(np.ones((2, 2)), np.ones(2))])
    noise = ParamSet([(np.full((2, 2), 0.1), np.full(2, 0.1))])
    assert udp.snr_db(clean, noise) == pytest.approx(20.0)
    assert udp.snr_db(clean, clean.zeros_like()) == math.inf
    assert udp.snr_in_reference_band(15.0) and not udp.snr_in_reference_band(25.0)
