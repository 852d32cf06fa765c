"""Randomised properties (hypothesis)."""
import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from revode.adjoint import AdjointPair, scale_pair
from revode.dynamics import make_duffing, make_kepler
from revode.integrators import (
    ALF,
    ALF2,
    Y4,
    Y6,
    Adaptive,
    AugmentedState,
    init_augmented,
    integrate_backward,
    integrate_forward,
    method_step,
    propose_step,
)
from revode.training import halton

METHODS = st.sampled_from([ALF, ALF2, Y4, Y6])
coords = st.floats(-1.0, 1.0, allow_nan=False)
steps = st.floats(1e-3, 0.3).flatmap(lambda h: st.sampled_from([h, -h]))

DUFFING = make_duffing(2)
DUFFING_THETA = DUFFING.pack(a=[1.0, 0.5], b=[0.7, 1.2], e=[0.3])


@settings(max_examples=60, deadline=None)
@given(method=METHODS, h=steps, z=st.lists(coords, min_size=4, max_size=4),
       v=st.lists(coords, min_size=4, max_size=4))
def test_duffing_step_is_reversible(method, h, z, v):
    phi = AugmentedState(np.array(z), np.array(v), 0.3)
    back = method_step(method, method_step(method, phi, h, DUFFING, DUFFING_THETA), -h, DUFFING, DUFFING_THETA)
    x, y = np.r_[phi.z, phi.v], np.r_[back.z, back.v]
    assert np.linalg.norm(x - y) <= 1e-12 * (1 + np.linalg.norm(x))
    assert abs(back.t - phi.t) <= 1e-15


@settings(max_examples=40, deadline=None)
@given(method=METHODS, angle=st.floats(0, 2 * math.pi), radius=st.floats(0.6, 1.4),
       speed=st.floats(0.5, 1.1), tol=st.sampled_from([1e-6, 1e-8]))
def test_kepler_adaptive_replay(method, angle, radius, speed, tol):
    f = make_kepler()
    theta = np.array([math.pi / 4])
    z0 = np.array([radius * math.cos(angle), radius * math.sin(angle),
                   -speed * math.sin(angle), speed * math.cos(angle)])
    states, trace = integrate_forward(method, f, theta, z0, 0.0, [0.5, 1.0], Adaptive(tol, tol))
    start = integrate_backward(method, f, theta, states[-1], trace)
    assert np.max(np.abs(start.z - z0)) <= 1e-10 * max(1.0, np.max(np.abs(z0)))


@given(err=st.floats(0, 1e12), h=st.floats(1e-6, 10.0), p=st.integers(1, 8))
def test_controller_bounds(err, h, p):
    accept, h_new = propose_step(err, h, p)
    assert accept == (err <= 1.0)
    assert 0.2 * h * (1 - 1e-12) <= h_new <= 5.0 * h * (1 + 1e-12)


@given(alpha=st.floats(1e-6, 1e6).flatmap(lambda a: st.sampled_from([a, -a])),
       lv=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=5))
def test_scaling_touches_only_lv(alpha, lv):
    lv = np.array(lv)
    phi = AugmentedState(np.ones(lv.size), np.zeros(lv.size), 0.0)
    p = AdjointPair(phi, np.full(lv.size, 2.0), lv)
    q = scale_pair(scale_pair(p, alpha), 1.0 / alpha)
    assert q.phi is phi and np.array_equal(q.lz, p.lz)
    np.testing.assert_allclose(q.lv, lv, rtol=1e-14, atol=1e-300)


@given(n=st.integers(1, 50), dim=st.integers(1, 6))
def test_halton_in_unit_cube(n, dim):
    pts = halton(n, dim)
    assert pts.shape == (n, dim)
    assert np.all((pts > 0) & (pts < 1))
    assert len({tuple(p) for p in pts}) == n


@settings(max_examples=30, deadline=None)
@given(z=st.lists(coords, min_size=4, max_size=4))
def test_init_augmented_velocity_is_field(z):
    p = init_augmented(DUFFING, np.array(z), 0.0, DUFFING_THETA)
    assert np.array_equal(p.v, DUFFING.eval(np.array(z), 0.0, DUFFING_THETA))
