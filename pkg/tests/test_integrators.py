import math

import numpy as np
import pytest

from revode.dynamics import CountingField, LinearField, VectorField, make_duffing, make_kepler
from revode.integrators import (
    ALF,
    ALF2,
    RK45,
    Y4,
    Y6,
    Adaptive,
    AugmentedState,
    DivergenceError,
    Fixed,
    StiffnessError,
    alf2_step,
    alf_backward,
    alf_forward,
    get_method,
    init_augmented,
    integrate_backward,
    integrate_forward,
    method_step,
    propose_step,
    rk45_reference,
    rk45_solve,
    step_with_error,
    yoshida_coefficients,
    yoshida_step,
)

NONE = np.zeros(0)
IDENT = LinearField(np.eye(1))
ZERO = LinearField(np.zeros((2, 2)))
KEPLER_X0 = np.array([0.75, 0.0, 0.0, 0.9 * math.pi / 4 * math.sqrt(5 / 3)])
ALPHA = np.array([math.pi / 4])


def phi(z, v, t=0.0):
    return AugmentedState(np.atleast_1d(np.asarray(z, dtype=float)), np.atleast_1d(np.asarray(v, dtype=float)), t)


# init_augmented ---------------------------------------------------------------


def test_init_augmented_examples():
    p = init_augmented(IDENT, [1.0], 0.0, NONE)
    assert p.z[0] == 1.0 and p.v[0] == 1.0 and p.t == 0.0
    p = init_augmented(make_kepler(), KEPLER_X0, 0.0, ALPHA)
    np.testing.assert_array_equal(p.v, make_kepler().eval(KEPLER_X0, 0.0, ALPHA))
    p = init_augmented(ZERO, [0.3, -0.1], 0.0, NONE)
    assert np.all(p.v == 0)
    with pytest.raises(ValueError):
        init_augmented(ZERO, [np.nan, 0.0], 0.0, NONE)


# single steps -----------------------------------------------------------------


def test_alf_forward_example():
    p = alf_forward(phi(1.0, 1.0), 0.2, IDENT, NONE)
    assert p.z[0] == pytest.approx(1.22, abs=1e-15)
    assert p.v[0] == pytest.approx(1.2, abs=1e-15)
    assert p.t == pytest.approx(0.2)


def test_alf_zero_field_and_zero_step():
    p = alf_forward(phi([1.0, 2.0], [3.0, -4.0]), 0.1, ZERO, NONE)
    np.testing.assert_array_equal(p.z, [1.0, 2.0])
    np.testing.assert_array_equal(p.v, [-3.0, 4.0])
    back = alf_backward(p, 0.1, ZERO, NONE)
    np.testing.assert_array_equal(back.v, [3.0, -4.0])
    with pytest.raises(ValueError):
        alf_forward(p, 0.0, ZERO, NONE)


def test_alf_backward_example():
    p = alf_backward(phi(1.22, 1.2, 0.2), 0.2, IDENT, NONE)
    assert p.z[0] == pytest.approx(1.0, abs=1e-14)
    assert p.v[0] == pytest.approx(1.0, abs=1e-14)
    assert p.t == pytest.approx(0.0, abs=1e-15)


def test_alf2_example():
    p = alf2_step(phi(1.0, 1.0), 0.2, IDENT, NONE)
    # midpoints 1.05 and 1.16: z = 1.105 + 0.1 * 1.16
    assert p.z[0] == pytest.approx(1.221, abs=1e-14)
    assert p.v[0] == pytest.approx(1.22, abs=1e-14)
    assert abs(p.z[0] - math.exp(0.2)) < abs(1.22 - math.exp(0.2))


def test_yoshida_coefficients_k1():
    a, b = yoshida_coefficients(1)
    assert a == pytest.approx(1.3512071919, abs=1e-9)
    assert b == pytest.approx(-1.7024143839, abs=1e-9)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_yoshida_identities(k):
    a, b = yoshida_coefficients(k)
    assert abs(2 * a + b - 1) <= 1e-15
    assert abs(2 * a ** (2 * k + 1) + b ** (2 * k + 1)) <= 1e-13
    assert b < 0


def test_yoshida_coefficients_invalid():
    with pytest.raises(ValueError):
        yoshida_coefficients(0)


def test_y4_step_example():
    p = yoshida_step(4, phi(1.0, 1.0), 0.1, IDENT, NONE)
    assert abs(p.z[0] - math.exp(0.1)) <= 1e-6
    assert p.t == pytest.approx(0.1, abs=1e-15)


@pytest.mark.parametrize("method,count", [(ALF, 1), (ALF2, 2), (Y4, 6), (Y6, 18), (get_method("Y8"), 54)])
def test_evaluation_counts(method, count):
    f = CountingField(make_kepler())
    method_step(method, init_augmented(make_kepler(), KEPLER_X0, 0.0, ALPHA), 0.05, f, ALPHA)
    assert f.evals == count == method.evals_per_step
    assert len(method.substeps(0.05)) == count


@pytest.mark.parametrize("method", [ALF2, Y4, Y6])
def test_substeps_sum_to_h(method):
    assert sum(method.substeps(0.3)) == pytest.approx(0.3, abs=1e-15)
    subs = method.substeps(0.3)
    assert subs == subs[::-1]


def test_get_method():
    assert get_method("y4") is not None and get_method("Y4").order == 4
    assert get_method("alf") == ALF
    for bad in ("Y3", "Y2", "RK4", "Yx"):
        with pytest.raises(ValueError):
            get_method(bad)
    assert not RK45.reversible
    with pytest.raises(ValueError):
        RK45.substeps(0.1)


# error estimate and controller -----------------------------------------------


@pytest.mark.parametrize("method", [ALF, ALF2, Y4, Y6])
def test_step_with_error_slope(method):
    f = LinearField(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    start = init_augmented(f, [1.0, 0.5], 0.0, NONE)
    hs = [0.4, 0.2, 0.1]
    errs = [step_with_error(method, start, h, f, NONE, atol=1e-10, rtol=0.0)[1] for h in hs]
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - (method.order + 1)) <= 0.3, slope


def test_step_with_error_zero_field():
    p, err = step_with_error(Y4, phi([1.0, 2.0], [0.0, 0.0]), 0.3, ZERO, NONE)
    assert err == 0.0
    np.testing.assert_array_equal(p.z, [1.0, 2.0])


def test_step_with_error_returns_two_half_steps():
    f = make_kepler()
    start = init_augmented(f, KEPLER_X0, 0.0, ALPHA)
    p, _ = step_with_error(Y4, start, 0.1, f, ALPHA)
    ref = method_step(Y4, method_step(Y4, start, 0.05, f, ALPHA), 0.05, f, ALPHA)
    np.testing.assert_array_equal(p.z, ref.z)
    np.testing.assert_array_equal(p.v, ref.v)


@pytest.mark.parametrize("method", [ALF2, Y4])
def test_step_with_error_scale_invariant(method):
    f = LinearField(np.array([[0.0, 1.0], [-2.0, -0.1]]))
    start = init_augmented(f, [1.0, 0.5], 0.0, NONE)
    big = AugmentedState(10 * start.z, 10 * start.v, 0.0)
    e1 = step_with_error(method, start, 0.2, f, NONE, atol=0.0, rtol=1e-6)[1]
    e2 = step_with_error(method, big, 0.2, f, NONE, atol=0.0, rtol=1e-6)[1]
    assert abs(e2 / e1 - 1) < 0.01


def test_propose_step_examples():
    ok, h = propose_step(1.0, 1.0, 4)
    assert ok and h == pytest.approx(0.9)
    ok, h = propose_step(0.0, 0.1, 4)
    assert ok and h == pytest.approx(0.5)
    ok, h = propose_step(1e4, 1.0, 1)
    assert not ok and h == pytest.approx(0.2)
    ok, h = propose_step(math.inf, 1.0, 4)
    assert not ok and h == pytest.approx(0.5)
    ok, h = propose_step(1e-30, 1.0, 4)
    assert ok and h == pytest.approx(5.0)


# drivers ------------------------------------------------------------------------


def test_fixed_exact_division():
    f = CountingField(IDENT)
    states, trace = integrate_forward(ALF2, f, NONE, [1.0], 0.0, [0.5, 1.0], Fixed(0.1))
    assert trace.n_steps == 10
    assert all(h == 0.1 for h in trace.steps)
    assert trace.segment_ends == [5, 10]
    assert [s.t for s in states] == [0.5, 1.0]
    assert f.evals == trace.fevals == 1 + 10 * 2


def test_fixed_clipping():
    _, trace = integrate_forward(ALF, IDENT, NONE, [1.0], 0.0, [0.25, 1.0], Fixed(0.1))
    assert trace.segment(0) == pytest.approx([0.1, 0.1, 0.05])
    assert sum(trace.segment(1)) == pytest.approx(0.75, abs=1e-14)


@pytest.mark.parametrize("mode", [Fixed(0.07), Adaptive(1e-8, 1e-8)])
def test_trace_segment_sums(mode):
    obs = [0.2, 0.4, 0.6, 0.8, 1.0]
    _, trace = integrate_forward(Y4, make_kepler(), ALPHA, KEPLER_X0, 0.0, obs, mode)
    start = 0.0
    for i, t in enumerate(obs):
        assert abs(sum(trace.segment(i)) - (t - start)) <= 1e-14
        start = t


def test_kepler_adaptive_accuracy():
    f = make_kepler()
    states, trace = integrate_forward(Y4, f, ALPHA, KEPLER_X0, 0.0, [1.0], Adaptive(1e-8, 1e-8))
    ref = rk45_reference(f, ALPHA, KEPLER_X0, 0.0, 1.0, atol=1e-12, rtol=1e-12)
    assert np.max(np.abs(states[-1].z - ref)) <= 1e-6
    assert trace.rejected >= 0 and len(trace.log) >= trace.n_steps // 2


def test_single_fixed_step_round_trip():
    f = make_kepler()
    states, trace = integrate_forward(ALF, f, ALPHA, KEPLER_X0, 0.0, [0.1], Fixed(0.1))
    start = integrate_backward(ALF, f, ALPHA, states[-1], trace)
    assert np.max(np.abs(start.z - KEPLER_X0)) <= 1e-15
    assert start.t == 0.0


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


@pytest.mark.parametrize("method", [ALF, ALF2, Y4, Y6])
def test_kepler_adaptive_round_trip(method):
    f = make_kepler()
    states, trace = integrate_forward(method, f, ALPHA, KEPLER_X0, 0.0, [0.2, 0.4, 0.6, 0.8, 1.0],
                                      Adaptive(1e-8, 1e-8))
    start = integrate_backward(method, f, ALPHA, states[-1], trace)
    assert _rel(start.z, KEPLER_X0) <= 1e-10
    assert _rel(start.v, f.eval(KEPLER_X0, 0.0, ALPHA)) <= 1e-10


def test_duffing10_round_trip(rng):
    f = make_duffing(10)
    theta = rng.uniform(0.5, 1.5, f.P)
    z0 = rng.uniform(-1, 1, (4, 20))
    states, trace = integrate_forward(Y4, f, theta, z0, 0.0, [0.5], Adaptive(1e-8, 1e-8))
    start = integrate_backward(Y4, f, theta, states[-1], trace)
    assert _rel(start.z, z0) <= 1e-10


def test_backward_rejects_wrong_method():
    _, trace = integrate_forward(ALF2, IDENT, NONE, [1.0], 0.0, [0.1], Fixed(0.05))
    with pytest.raises(ValueError):
        integrate_backward(Y4, IDENT, NONE, phi(1.0, 1.0, 0.1), trace)


def test_observation_times_validated():
    for obs in ([], [0.0], [0.5, 0.3], [0.2, 0.2]):
        with pytest.raises(ValueError):
            integrate_forward(ALF, IDENT, NONE, [1.0], 0.0, obs, Fixed(0.1))
    with pytest.raises(ValueError):
        integrate_forward(RK45, IDENT, NONE, [1.0], 0.0, [1.0], Fixed(0.1))
    with pytest.raises(ValueError):
        Fixed(0.0)
    with pytest.raises(ValueError):
        Adaptive(0.0, 0.0)


def test_divergence_error():
    with pytest.raises(DivergenceError):
        integrate_forward(ALF2, IDENT, NONE, [1.0], 0.0, [1.0], Adaptive(1e-12, 1e-12, max_steps=10))


class _BlowsUp(VectorField):
    name = "blows-up"
    d = 1
    layout = {}

    def _eval(self, z, t, theta):
        return np.full_like(np.asarray(z, dtype=float), np.nan if t > 0 else 1.0)


def test_stiffness_error():
    with pytest.raises(StiffnessError):
        integrate_forward(Y4, _BlowsUp(), NONE, [1.0], 0.0, [1.0], Adaptive(1e-6, 1e-6))


def test_adaptive_fevals_include_rejections():
    f = CountingField(make_kepler())
    _, trace = integrate_forward(Y4, f, ALPHA, KEPLER_X0, 0.0, [1.0], Adaptive(1e-9, 1e-9, h0=0.5))
    assert trace.rejected > 0
    assert f.evals == trace.fevals
    trials = len(trace.log)
    assert trace.fevals == 1 + 3 * Y4.evals_per_step * trials


def test_trace_csv(tmp_path):
    _, trace = integrate_forward(ALF2, IDENT, NONE, [1.0], 0.0, [0.5], Adaptive(1e-6, 1e-6))
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "index,t,h,accepted,err_norm"
    assert len(lines) == 1 + len(trace.log)


# reference integrator ------------------------------------------------------------


def test_rk45_linear_and_zero():
    z = rk45_reference(IDENT, NONE, [2.0], 0.5, 1.5, atol=1e-12, rtol=1e-12)
    assert z[0] == pytest.approx(2.0 * math.e, rel=1e-10)
    z = rk45_reference(ZERO, NONE, [1.0, -3.0], 0.0, 2.0)
    np.testing.assert_array_equal(z, [1.0, -3.0])


def test_rk45_circular_orbit():
    f = make_kepler()
    z0 = np.array([1.0, 0.0, 0.0, 1.0])
    states, fevals = rk45_solve(f, np.array([1.0]), z0, 0.0, np.linspace(0.5, 5.0, 10), atol=1e-12, rtol=1e-12)
    radii = np.linalg.norm(states[:, :2], axis=1)
    assert np.max(np.abs(radii - 1.0)) <= 1e-9
    assert fevals > 0


def test_rk45_batched_matches_single(rng):
    f = make_duffing(2)
    theta = rng.uniform(0.5, 1.5, f.P)
    z0 = rng.uniform(-1, 1, (3, 4))
    batch, _ = rk45_solve(f, theta, z0, 0.0, [0.5])
    for i in range(3):
        single, _ = rk45_solve(f, theta, z0[i], 0.0, [0.5])
        np.testing.assert_allclose(batch[0][i], single[0], atol=1e-10)
