from fractions import Fraction

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from nsdiff.src.errors import ConfigurationError
from nsdiff.src.schedule import (build_linear_schedule, build_schedule, coefficients_at,
                                 schedule_from_betas)


def direct_sums(alpha: np.ndarray):
    """alpha_tilde, alpha_hat by explicit summation over products (1-based steps)."""
    T = alpha.size
    tilde, hat = np.zeros(T + 1), np.zeros(T + 1)
    for t in range(1, T + 1):
        for k in range(1, t + 1):
            prod = np.prod(alpha[k - 1:t])
            tilde[t] += prod
            hat[t] += alpha[k - 1] * prod
    return tilde, hat


def test_default_linear_schedule(default_schedule):
    s = default_schedule
    assert s.T == 20
    assert s.beta[1] == pytest.approx(1e-4, abs=1e-15)
    assert s.beta[20] == pytest.approx(0.02, abs=1e-15)
    assert s.beta[2] == pytest.approx(0.00114737, abs=1e-8)
    assert s.alpha_bar[20] == pytest.approx(np.prod(1.0 - s.beta[1:]), rel=1e-12)


def test_single_step_schedule():
    s = build_linear_schedule(1, 0.01, 0.01)
    a = 0.99
    assert s.alpha_bar[1] == pytest.approx(a)
    assert s.alpha_tilde[1] == pytest.approx(a)
    assert s.alpha_hat[1] == pytest.approx(a * a)
    assert s.beta_tilde[1] == pytest.approx(a * (1 - a))


def test_worked_values(toy_schedule):
    s = toy_schedule
    assert s.alpha_bar[5] == pytest.approx(0.1512, abs=1e-12)
    assert s.alpha_tilde[4] == pytest.approx(1.6584, abs=1e-12)
    assert s.alpha_hat[4] == pytest.approx(1.19496, abs=1e-12)
    assert s.beta_tilde[4] == pytest.approx(0.46344, abs=1e-12)
    assert s.beta_tilde[5] == pytest.approx(0.48172, abs=1e-12)


def test_boundary_coefficients(default_schedule):
    c = coefficients_at(default_schedule, 1)
    assert c.alpha_bar_prev == 1.0
    assert c.beta_bar_prev == 0.0
    assert c.beta_tilde_prev == 0.0
    assert coefficients_at(default_schedule, 20).beta == pytest.approx(0.02)
    assert default_schedule.at(5) == coefficients_at(default_schedule, 5)


@pytest.mark.parametrize("t", [0, 21, -1])
def test_out_of_range_step(default_schedule, t):
    with pytest.raises(IndexError):
        coefficients_at(default_schedule, t)


@pytest.mark.parametrize("T, start, end, bound", [
    (20, 0.0, 0.02, "beta_start"),
    (20, 1e-4, 1.0, "beta_end"),
    (20, 0.1, 0.01, "must not exceed"),
    (0, 1e-4, 0.02, "T must be"),
])
def test_invalid_bounds(T, start, end, bound):
    with pytest.raises(ConfigurationError, match=bound):
        build_linear_schedule(T, start, end)


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        build_schedule("cosine", 20, 1e-4, 0.02)


def test_arrays_are_read_only(default_schedule):
    with pytest.raises(ValueError):
        default_schedule.beta_bar[3] = 0.5


def test_params_round_trip(default_schedule):
    p = default_schedule.params()
    rebuilt = build_schedule(p["kind"], p["T"], p["beta_start"], p["beta_end"])
    np.testing.assert_array_equal(rebuilt.beta_tilde, default_schedule.beta_tilde)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(min_value=1e-4, max_value=0.2), min_size=1, max_size=100))
def test_recurrences_match_direct_summation(betas):
    s = schedule_from_betas(betas)
    tilde, hat = direct_sums(1.0 - np.asarray(betas))
    np.testing.assert_allclose(s.alpha_tilde, tilde, rtol=0, atol=1e-10)
    np.testing.assert_allclose(s.alpha_hat, hat, rtol=0, atol=1e-10)
    np.testing.assert_allclose(s.beta_tilde, tilde - hat, rtol=0, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=1e-4, max_value=0.2), min_size=1, max_size=100))
@example([0.0024840942897659288])
def test_invariants(betas):
    s = schedule_from_betas(betas)
    t = slice(1, s.T + 1)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(np.diff(s.beta_bar) > 0)
    assert np.all(s.beta_tilde[t] > 0)
    assert np.all(s.beta_gap[t] > 0)
    assert s.beta_gap[1] >= s.beta[1] ** 2


def exact_gaps(betas):
    """beta_bar - beta_tilde per step in rational arithmetic, from the closed forms."""
    alpha_bar, tilde, hat, gaps = Fraction(1), Fraction(0), Fraction(0), [Fraction(0)]
    for b in betas:
        a = 1 - Fraction(b)
        alpha_bar *= a
        tilde = a * (1 + tilde)
        hat = a * a + a * hat
        gaps.append((1 - alpha_bar) - (tilde - hat))
    return gaps


def test_gap_is_accurate_at_small_steps(default_schedule):
    s = default_schedule
    exact = exact_gaps(s.beta[1:].tolist())
    for t in range(1, s.T + 1):
        assert s.beta_gap[t] == pytest.approx(float(exact[t]), rel=1e-12), t
    assert s.beta_gap[1] == s.beta[1] ** 2


def test_bundle_carries_the_gap(toy_schedule):
    c = coefficients_at(toy_schedule, 3)
    assert c.beta_gap == toy_schedule.beta_gap[3]
    assert c.beta_gap_prev == pytest.approx(c.beta_bar_prev - c.beta_tilde_prev, abs=1e-12)
