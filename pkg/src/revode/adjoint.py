"""Exact discrete-adjoint gradients for the ALF family.

The transpose of one ALF step is again an ALF-like step run backward, once
the ``lambda_v`` block is rescaled by ``alpha(s) = -s**2 / 4`` for the ALF
sub-step size ``s``.  Compositions (ALF2, Yoshida) are handled by chaining the
rescaled sub-steps and converting between the scalings of consecutive
sub-steps, so only the current state and adjoint pair are ever alive.

``full_storage_oracle`` and ``finite_difference_oracle`` are independent
references used by the test-suite and by ``revode gradcheck``.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .integrators import (
    AugmentedState,
    Method,
    StepTrace,
    _Tracked,
    alf_forward,
    init_augmented,
    get_method,
    integrate_forward,
    replay_forward,
)

__all__ = [
    "AdjointPair",
    "scale_pair",
    "alf_adjoint_back",
    "alf2_adjoint_back",
    "yoshida_adjoint_back",
    "adjoint_step_back",
    "compute_gradients",
    "full_storage_oracle",
    "finite_difference_oracle",
    "corrupt_scaling",
    "replayed_loss",
]

# negative-control hook: multiplies every exit rescaling; 1.0 in normal use
_EXIT_SCALE_FACTOR = 1.0


@contextmanager
def corrupt_scaling(factor: float):
    """Deliberately break the adjoint rescaling (used to prove gradcheck can fail)."""
    global _EXIT_SCALE_FACTOR
    old = _EXIT_SCALE_FACTOR
    _EXIT_SCALE_FACTOR = factor
    try:
        yield
    finally:
        _EXIT_SCALE_FACTOR = old


class AdjointPair(_Tracked):
    """State ``phi`` together with the adjoints ``lz`` (of ``z``) and ``lv`` (of ``v``)."""

    __slots__ = ("phi", "lz", "lv")

    def __init__(self, phi: AugmentedState, lz, lv):
        self.phi = phi
        self.lz = lz
        self.lv = lv
        self._track()

    def __repr__(self):
        return f"AdjointPair(phi={self.phi!r}, lz={self.lz!r}, lv={self.lv!r})"


def scale_pair(pair: AdjointPair, alpha: float) -> AdjointPair:
    """The map W_alpha: multiply ``lv`` by ``alpha``, leave everything else alone."""
    return AdjointPair(pair.phi, pair.lz, alpha * pair.lv)


def _midpoint(phi, h):
    return phi.z - 0.5 * h * phi.v, phi.t - 0.5 * h


def alf_adjoint_back(pair: AdjointPair, h, field, theta):
    """Transpose of one forward ALF step of size ``h``, in unscaled variables.

    Reconstructs the earlier state and returns it with the pulled-back
    adjoints and this step's parameter-gradient contribution.
    """
    phi = pair.phi
    m, tm = _midpoint(phi, h)
    f = field.eval(m, tm, theta)
    prev = AugmentedState(phi.z - h * f, 2.0 * f - phi.v, phi.t - h)
    w = h * pair.lz + 2.0 * pair.lv
    gz, gtheta = field.vjp(m, tm, theta, w)
    return AdjointPair(prev, pair.lz + gz, 0.5 * h * gz - pair.lv), gtheta


def _scaled_alf_back(pair: AdjointPair, s, field, theta, rescale=1.0):
    """ALF adjoint sub-step with ``lambda_v`` held as ``lambda_v / alpha(s)``.

    ``rescale`` is applied to ``pair.lv`` first; it converts from the scaling
    of the previous sub-step (or from unscaled variables) to ``alpha(s)``.
    In these variables the adjoint recursion has the shape of a backward ALF
    step driven by the vector-Jacobian products at the shared midpoint.
    """
    phi = pair.phi
    lv = pair.lv if rescale == 1.0 else rescale * pair.lv
    m, tm = _midpoint(phi, s)
    f = field.eval(m, tm, theta)
    prev = AugmentedState(phi.z - s * f, 2.0 * f - phi.v, phi.t - s)
    u = pair.lz - 0.5 * s * lv
    g, gtheta = field.vjp(m, tm, theta, u)
    return AdjointPair(prev, pair.lz + s * g, -2.0 * g - lv), s * gtheta


def _alpha(s):
    return -0.25 * s * s


def _entry_factor(alpha, s):
    """Factor taking ``lambda_v`` from scaling ``alpha`` (None: unscaled) to ``alpha(s)``."""
    target = _alpha(s)
    if alpha is None:
        return 1.0 / target, target
    return (1.0 if alpha == target else alpha / target), target


def _exit(pair, alpha):
    return scale_pair(pair, alpha * _EXIT_SCALE_FACTOR)


def _composite_back(substeps, pair, field, theta):
    # W^-1 . back(s_1) . W(s_1 -> s_2) ... back(s_n) . W: rescale only when s changes
    grad = np.zeros(field.P)
    alpha = None
    for s in reversed(substeps):
        factor, alpha = _entry_factor(alpha, s)
        pair, g = _scaled_alf_back(pair, s, field, theta, factor)
        grad += g
    return _exit(pair, alpha), grad


def alf2_adjoint_back(pair: AdjointPair, h, field, theta):
    """Transpose of one ALF2 step; both half steps share one scaling."""
    return _composite_back([0.5 * h, 0.5 * h], pair, field, theta)


def yoshida_adjoint_back(order: int, pair: AdjointPair, h, field, theta):
    """Transpose of one Yoshida step of order ``order``.

    The sub-step list ``ah, bh, ah`` (recursively expanded) is palindromic,
    so the transpose walks the same sizes; consecutive sub-steps of
    different size are joined by the ratio of their scalings, which for
    order 4 gives the ``a^2/b^2`` and ``b^2/a^2`` factors.
    """
    if order < 4 or order % 2:
        raise ValueError(f"Yoshida order must be even and >= 4, got {order}")
    return _composite_back(get_method(f"Y{order}").substeps(h), pair, field, theta)


def adjoint_step_back(method: Method, pair: AdjointPair, h, field, theta):
    """Transpose of one forward step of ``method`` with size ``h``."""
    if method.name == "RK45":
        raise ValueError("RK45 has no reversible adjoint")
    return _composite_back(method.substeps(h), pair, field, theta)


def _init_term(field, z0, t0, theta, lv0):
    # v0 = f(z0, t0, theta) also depends on the parameters
    return field.vjp_params(np.asarray(z0, dtype=float), t0, theta, lv0)


def compute_gradients(method: Method, field, theta, z0, t0, obs_times, loss, mode=None,
                      trace: StepTrace | None = None, checkpoints=None):
    """Loss and its exact parameter gradient with depth-independent memory.

    ``loss(states)`` receives the augmented states at ``obs_times`` and returns
    ``(value, [dL/dz_i ...])``.  When ``trace`` and ``checkpoints`` come from an
    earlier forward call they are reused, otherwise the forward pass runs
    here with ``mode``.
    """
    theta = np.asarray(theta, dtype=float)
    if trace is None or checkpoints is None:
        if mode is None:
            raise ValueError("need either a forward trace with checkpoints or an integration mode")
        checkpoints, trace = integrate_forward(method, field, theta, z0, t0, obs_times, mode)
    if trace.method != method:
        raise ValueError(f"trace was recorded with {trace.method.name}, not {method.name}")
    if len(checkpoints) != len(trace.obs_times):
        raise ValueError("need one checkpoint per observation time")
    value, grads_z = loss(checkpoints)
    grad = np.zeros(field.P)
    lz = np.zeros_like(checkpoints[-1].z)
    lv = np.zeros_like(checkpoints[-1].v)
    for i in range(len(trace.obs_times) - 1, -1, -1):
        pair = AdjointPair(checkpoints[i], lz + grads_z[i], lv)
        # sub-steps are walked inline (not via adjoint_step_back) so that no
        # caller frame pins an outdated pair while the next one is built
        for h in reversed(trace.segment(i)):
            alpha = None
            for s in reversed(method.substeps(h)):
                factor, alpha = _entry_factor(alpha, s)
                pair, g = _scaled_alf_back(pair, s, field, theta, factor)
                grad += g
            pair = _exit(pair, alpha)
        lz, lv = pair.lz, pair.lv
        del pair
    grad += _init_term(field, z0, trace.t0, theta, lv)
    return value, grad


def full_storage_oracle(method: Method, field, theta, z0, t0, obs_times, loss, mode=None,
                        trace: StepTrace | None = None):
    """Plain backpropagation: keep every ALF sub-step state, then pull back.

    Uses the unscaled per-step transpose evaluated at the stored forward
    midpoints, so it shares neither the reconstruction nor the rescaling with
    :func:`compute_gradients`.  Memory grows with the number of steps.
    """
    theta = np.asarray(theta, dtype=float)
    if trace is None:
        _, trace = integrate_forward(method, field, theta, z0, t0, obs_times, mode)
    phi = init_augmented(field, z0, trace.t0, theta)
    tape = []  # (midpoint, midpoint time, h) per ALF sub-step
    checkpoints, boundaries = [], []
    for i, t_end in enumerate(trace.obs_times):
        for h in trace.segment(i):
            for s in method.substeps(h):
                tape.append((phi.z + 0.5 * s * phi.v, phi.t + 0.5 * s, s))
                phi = alf_forward(phi, s, field, theta)
        phi.t = t_end
        checkpoints.append(phi)
        boundaries.append(len(tape))
    value, grads_z = loss(checkpoints)
    grad = np.zeros(field.P)
    lz = np.zeros_like(phi.z)
    lv = np.zeros_like(phi.v)
    pos = len(tape)
    for i in range(len(boundaries) - 1, -1, -1):
        lz = lz + grads_z[i]
        start = boundaries[i - 1] if i > 0 else 0
        while pos > start:
            pos -= 1
            m, tm, s = tape[pos]
            w = s * lz + 2.0 * lv
            gz, gtheta = field.vjp(m, tm, theta, w)
            lz, lv = lz + gz, 0.5 * s * gz - lv
            grad = grad + gtheta
    grad = grad + _init_term(field, z0, trace.t0, theta, lv)
    return value, grad


def finite_difference_oracle(fun, theta, eps=1e-6) -> np.ndarray:
    """Central differences of a scalar function, one component at a time."""
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += eps
        tm[k] -= eps
        grad[k] = (fun(tp) - fun(tm)) / (2 * eps)
    return grad


def replayed_loss(method: Method, field, z0, trace: StepTrace, loss):
    """Loss as a function of ``theta`` with the step sizes frozen to ``trace``."""

    def fun(theta):
        return loss(replay_forward(method, field, theta, z0, trace))[0]

    return fun
