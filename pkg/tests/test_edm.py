"""Noise sampling, weights, gating analytics, preconditioning, schedule and sampler."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowloss.edm import (
    EdmConfig,
    add_noise,
    euler_generate,
    gating_fraction,
    gating_weight,
    lambda_weight,
    make_sigma_schedule,
    precondition,
    sample_sigma,
    sample_sigmas,
)
from flowloss.rng import stream

CFG = EdmConfig(p_mean=-1.2, p_std=1.2)
positive = st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False)


@pytest.fixture(scope="module")
def million_sigmas():
    return sample_sigmas(stream(2024, "mc"), CFG, 10**6)


# ------------------------------------------------------------ sample_sigma


def test_sample_median_matches_lognormal(million_sigmas):
    assert abs(np.median(million_sigmas) / math.exp(-1.2) - 1.0) < 0.02


def test_samples_are_positive(million_sigmas):
    assert np.all(million_sigmas > 0)


def test_sample_sigma_deterministic_per_stream():
    a = [sample_sigma(stream(7, "s", i), CFG) for i in range(20)]
    b = [sample_sigma(stream(7, "s", i), CFG) for i in range(20)]
    assert a == b


def test_vectorised_sampling_matches_scalar_draws():
    rng1, rng2 = stream(3, "v"), stream(3, "v")
    scalar = [sample_sigma(rng1, CFG) for _ in range(50)]
    np.testing.assert_allclose(sample_sigmas(rng2, CFG, 50), scalar, rtol=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        EdmConfig(p_std=0.0)
    with pytest.raises(ValueError):
        EdmConfig(sigma_data=-1.0)


# ------------------------------------------------------------------ lambda


@pytest.mark.parametrize("sigma, expected", [(1.0, 2.0), (0.5, 5.0), (10.0, 1.01)])
def test_lambda_examples(sigma, expected):
    assert lambda_weight(sigma) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
def test_lambda_rejects_invalid_sigma(bad):
    with pytest.raises(ValueError):
        lambda_weight(bad)


def test_lambda_strictly_decreasing_and_above_one():
    grid = [1e-2, 1e-1, 1.0, 10.0, 100.0]
    values = [lambda_weight(s) for s in grid]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert all(v > 1 for v in values)
    assert values[-1] - 1 < 1e-3


# ------------------------------------------------------------------ gating


def test_gating_examples():
    assert gating_weight(0.3, 0.25) == 0.0
    assert gating_weight(0.1, 0.125) == pytest.approx(1 / 1.01, rel=1e-12)
    assert gating_weight(0.125, 0.125) == 0.0


@settings(max_examples=200)
@given(sigma=positive, psi=positive)
def test_gating_bounded_by_envelope_and_zero_above_psi(sigma, psi):
    w = gating_weight(sigma, psi)
    assert 0.0 <= w <= 1.0 / (sigma * sigma + 1.0)
    if sigma >= psi:
        assert w == 0.0


def test_gating_fraction_examples(million_sigmas):
    assert gating_fraction(1e9, CFG) == pytest.approx(1.0, abs=1e-6)
    for psi, expected in [(0.125, 0.2318), (0.0625, 0.0951)]:
        assert gating_fraction(psi, CFG) == pytest.approx(expected, abs=5e-4)
        assert np.mean(million_sigmas < psi) == pytest.approx(expected, abs=0.002)


@pytest.mark.parametrize("psi", [0.0625, 0.125, 0.25])
def test_gating_fraction_within_three_standard_errors(psi, million_sigmas):
    p = gating_fraction(psi, CFG)
    se = math.sqrt(p * (1 - p) / million_sigmas.size)
    assert abs(np.mean(million_sigmas < psi) - p) <= 3 * se


@settings(max_examples=100)
@given(a=st.floats(1e-4, 1e3), b=st.floats(1e-4, 1e3), m1=st.floats(-3, 3), m2=st.floats(-3, 3))
def test_gating_fraction_monotone(a, b, m1, m2):
    lo, hi = sorted((a, b))
    assert gating_fraction(lo, CFG) <= gating_fraction(hi, CFG)
    p_lo, p_hi = sorted((m1, m2))
    # Lowering p_mean can only put more mass below psi.
    assert gating_fraction(a, EdmConfig(p_mean=p_lo)) >= gating_fraction(a, EdmConfig(p_mean=p_hi))


# --------------------------------------------------------------- add_noise


def test_vanishing_noise_returns_input():
    clip = np.random.default_rng(0).uniform(-1, 1, (4, 8, 8, 1))
    np.testing.assert_allclose(add_noise(clip, 1e-12, stream(0, "n")), clip, atol=1e-9)


def test_unit_noise_variance():
    clip = np.zeros(10**6)
    out = add_noise(clip, 1.0, stream(1, "n"))
    assert np.mean(out**2) == pytest.approx(1.0, rel=0.01)


def test_add_noise_deterministic_and_invertible():
    clip = np.random.default_rng(2).uniform(-1, 1, (3, 5, 5, 2))
    a = add_noise(clip, 0.7, stream(5, "n"))
    b = add_noise(clip, 0.7, stream(5, "n"))
    assert np.array_equal(a, b)
    assert a.shape == clip.shape
    # Replaying the stream reproduces the noise bit-exactly ...
    n = stream(5, "n").standard_normal(clip.shape)
    assert np.array_equal(a, clip + 0.7 * n)
    # ... but (y + s*n) - s*n is only y up to one rounding step in IEEE arithmetic.
    recovered = a - 0.7 * n
    assert np.all(np.abs(recovered - clip) <= np.spacing(np.maximum(np.abs(a), np.abs(clip))))


# ------------------------------------------------------------ precondition


def test_precondition_examples():
    c = precondition(0.5, CFG)
    assert c.c_skip == pytest.approx(0.5) and c.c_in == pytest.approx(1 / math.sqrt(0.5))
    tiny = precondition(1e-9, CFG)
    assert tiny.c_skip == pytest.approx(1.0) and tiny.c_out == pytest.approx(0.0, abs=1e-8)
    assert precondition(1.0, CFG).c_out == pytest.approx(0.5 / math.sqrt(1.25), rel=1e-12)
    assert precondition(2.0, CFG).c_noise == pytest.approx(math.log(2.0) / 4)


@settings(max_examples=200)
@given(sigma=st.floats(1e-4, 1e3), sd=st.floats(0.05, 5.0))
def test_precondition_identity(sigma, sd):
    c = precondition(sigma, EdmConfig(sigma_data=sd))
    total = c.c_skip**2 + c.c_out**2 / sd**2
    assert total <= 1 + 1e-12
    assert c.c_skip == pytest.approx(sd**2 / (sigma**2 + sd**2), rel=1e-12)
    assert c.c_out == pytest.approx(sigma * sd / math.sqrt(sigma**2 + sd**2), rel=1e-12)
    assert c.c_in == pytest.approx(1 / math.sqrt(sigma**2 + sd**2), rel=1e-12)


# ---------------------------------------------------------------- schedule


def test_schedule_endpoints_and_terminal_zero():
    assert list(make_sigma_schedule(2, 0.002, 80.0)) == [80.0, 0.002, 0.0]


def test_linear_schedule_with_rho_one():
    np.testing.assert_allclose(make_sigma_schedule(3, 1.0, 3.0, rho=1.0), [3.0, 2.0, 1.0, 0.0], atol=1e-12)


@settings(max_examples=100)
@given(n=st.integers(2, 60), lo=st.floats(1e-4, 1.0), span=st.floats(1.01, 1e4), rho=st.floats(0.5, 10))
def test_schedule_strictly_decreasing(n, lo, span, rho):
    s = make_sigma_schedule(n, lo, lo * span, rho)
    assert len(s) == n + 1 and s[-1] == 0.0
    assert np.all(np.diff(s) < 0)


@pytest.mark.parametrize("args", [(1, 0.1, 1.0), (5, 1.0, 0.5), (5, 1.0, 1.0), (5, -1.0, 1.0)])
def test_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        make_sigma_schedule(*args)


# ----------------------------------------------------------------- sampler


SHAPE = (3, 4, 4, 1)
COND = np.zeros((4, 4, 1))


def test_identity_denoiser_keeps_initial_noise():
    schedule = make_sigma_schedule(8, 0.01, 2.0)
    out = euler_generate(lambda x, s, c: x, 11, schedule, COND, SHAPE)
    initial = np.clip(2.0 * np.random.default_rng(11).standard_normal(SHAPE), -1, 1)
    assert np.array_equal(out, initial)


def test_oracle_denoiser_reaches_target():
    target = np.random.default_rng(3).uniform(-0.9, 0.9, SHAPE)
    out = euler_generate(lambda x, s, c: target, 4, make_sigma_schedule(12, 0.002, 80.0), COND, SHAPE)
    assert np.max(np.abs(out - target)) < 1e-3


def test_sampler_is_deterministic_and_clamped():
    schedule = make_sigma_schedule(6, 0.01, 5.0)
    den = lambda x, s, c: 0.5 * x  # noqa: E731
    a = euler_generate(den, 9, schedule, COND, SHAPE)
    b = euler_generate(den, 9, schedule, COND, SHAPE)
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
