"""Reversible integrators built from the asynchronous leapfrog (ALF) step.

The ALF step acts on an augmented state ``(z, v, t)`` where ``v`` tracks
``dz/dt``.  Two half steps give ALF2 (second order in both ``z`` and ``v``)
and symmetric triple compositions of ALF2 give Yoshida methods of any even
order.  All of them are inverted by flipping the sign of the step size, so a
backward pass only needs the list of accepted step sizes.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field as dc_field

import numpy as np

from .dynamics import NonFiniteError, VectorField

__all__ = [
    "IntegrationError",
    "DivergenceError",
    "StiffnessError",
    "AugmentedState",
    "Method",
    "ALF",
    "ALF2",
    "Y4",
    "Y6",
    "RK45",
    "get_method",
    "Fixed",
    "Adaptive",
    "StepTrace",
    "init_augmented",
    "alf_forward",
    "alf_backward",
    "alf2_step",
    "yoshida_coefficients",
    "yoshida_step",
    "method_step",
    "step_with_error",
    "propose_step",
    "integrate_forward",
    "integrate_backward",
    "replay_forward",
    "rk45_reference",
    "rk45_solve",
    "track_live_states",
]

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
MAX_REJECTIONS = 30


class IntegrationError(RuntimeError):
    pass


class DivergenceError(IntegrationError):
    pass


class StiffnessError(IntegrationError):
    pass


# live-state accounting ---------------------------------------------------------


class _LiveStates:
    def __init__(self):
        self.depth = 0
        self.live = 0
        self.peak = 0

    def created(self):
        self.live += 1
        if self.live > self.peak:
            self.peak = self.live

    def released(self):
        self.live -= 1


_LIVE = _LiveStates()


@contextmanager
def track_live_states():
    """Count integrator state objects alive while the block runs.

    Yields the tracker; ``tracker.peak`` is the largest number of
    simultaneously alive :class:`AugmentedState` and adjoint pair objects
    created inside the block.
    """
    tracker = _LiveStates()
    global _LIVE
    previous = _LIVE
    _LIVE = tracker
    tracker.depth = 1
    try:
        yield tracker
    finally:
        tracker.depth = 0
        _LIVE = previous


class _Tracked:
    __slots__ = ("_tracker",)

    def _track(self):
        if _LIVE.depth:
            self._tracker = _LIVE
            _LIVE.created()
        else:
            self._tracker = None

    def __del__(self):
        tracker = getattr(self, "_tracker", None)
        if tracker is not None:
            tracker.released()


class AugmentedState(_Tracked):
    """Triple ``(z, v, t)``; ``z`` and ``v`` share shape ``(..., d)``."""

    __slots__ = ("z", "v", "t")

    def __init__(self, z, v, t):
        self.z = z
        self.v = v
        self.t = t
        self._track()

    def __repr__(self):
        return f"AugmentedState(z={self.z!r}, v={self.v!r}, t={self.t!r})"

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.z), np.ravel(self.v)])

    def copy(self) -> "AugmentedState":
        return AugmentedState(np.array(self.z, copy=True), np.array(self.v, copy=True), self.t)


# methods -----------------------------------------------------------------------


@dataclass(frozen=True)
class Method:
    """A member of the ALF family (or the RK45 reference).

    ``order`` is the order used by the step-size controller.  For bare ALF it
    is the order in ``z``.
    """

    name: str
    order: int

    @property
    def reversible(self) -> bool:
        return self.name != "RK45"

    @property
    def evals_per_step(self) -> int:
        if self.name == "ALF":
            return 1
        if self.name == "RK45":
            return 6
        return 2 * 3 ** (self.order // 2 - 1)

    def substeps(self, h) -> list[float]:
        """ALF step sizes making up one step of size ``h``, in execution order."""
        if self.name == "ALF":
            return [h]
        if self.name == "RK45":
            raise ValueError("RK45 is not built from ALF steps")
        return _yoshida_substeps(self.order, h)

    def step(self, phi, h, field, theta):
        return method_step(self, phi, h, field, theta)


ALF = Method("ALF", 2)
ALF2 = Method("ALF2", 2)
Y4 = Method("Y4", 4)
Y6 = Method("Y6", 6)
RK45 = Method("RK45", 4)


def get_method(name: str) -> Method:
    key = name.strip().upper()
    if key in ("ALF", "ALF2", "RK45"):
        return {"ALF": ALF, "ALF2": ALF2, "RK45": RK45}[key]
    if key.startswith("Y") and key[1:].isdigit():
        order = int(key[1:])
        if order < 4 or order % 2:
            raise ValueError(f"Yoshida order must be even and >= 4, got {order}")
        return Method(f"Y{order}", order)
    raise ValueError(f"unknown method {name!r}")


def _yoshida_substeps(order, h):
    if order == 2:
        return [h / 2, h / 2]
    a, b = yoshida_coefficients(order // 2 - 1)
    inner = lambda s: _yoshida_substeps(order - 2, s)  # noqa: E731
    return inner(a * h) + inner(b * h) + inner(a * h)


# single steps ------------------------------------------------------------------


def init_augmented(field: VectorField, z0, t0, theta) -> AugmentedState:
    z0 = np.asarray(z0, dtype=float)
    if not np.all(np.isfinite(z0)):
        raise ValueError("initial state must be finite")
    return AugmentedState(z0, field.eval(z0, t0, theta), t0)


def alf_forward(phi: AugmentedState, h, field: VectorField, theta) -> AugmentedState:
    if h == 0:
        raise ValueError("step size must be non-zero")
    half = 0.5 * h
    f = field.eval(phi.z + half * phi.v, phi.t + half, theta)
    return AugmentedState(phi.z + h * f, 2.0 * f - phi.v, phi.t + h)


def alf_backward(phi: AugmentedState, h, field: VectorField, theta) -> AugmentedState:
    """Undo :func:`alf_forward` with the same ``h``."""
    return alf_forward(phi, -h, field, theta)


def alf2_step(phi, h, field, theta):
    phi = alf_forward(phi, 0.5 * h, field, theta)
    return alf_forward(phi, 0.5 * h, field, theta)


def yoshida_coefficients(k: int) -> tuple[float, float]:
    """Step fractions ``(a, b)`` lifting a symmetric order-2k method to order 2k+2."""
    if k < 1:
        raise ValueError("k must be >= 1")
    a = 1.0 / (2.0 - 2.0 ** (1.0 / (2 * k + 1)))
    return a, 1.0 - 2.0 * a


def yoshida_step(order: int, phi, h, field, theta):
    """One step of the order-``order`` composition: Y(2k) = Y(2k-2) at ah, bh, ah.

    The recursion is unrolled into its list of ALF sub-steps so that only the
    current state is alive while the step runs.
    """
    if order == 2:
        return alf2_step(phi, h, field, theta)
    if order < 4 or order % 2:
        raise ValueError(f"Yoshida order must be even and >= 4, got {order}")
    for s in _yoshida_substeps(order, h):
        phi = alf_forward(phi, s, field, theta)
    return phi


def method_step(method: Method, phi, h, field, theta):
    if method.name == "ALF":
        return alf_forward(phi, h, field, theta)
    if method.name == "RK45":
        raise ValueError("RK45 has no augmented-state step; use rk45_reference")
    return yoshida_step(method.order, phi, h, field, theta)


# adaptive control --------------------------------------------------------------


def _error_norm(full, half, before, atol, rtol, order, with_v=True):
    scale = atol + rtol * np.maximum(
        np.maximum(np.abs(before.z), np.abs(full.z)),
        np.abs(half.z),
    )
    scale_v = atol + rtol * np.maximum(
        np.maximum(np.abs(before.v), np.abs(full.v)),
        np.abs(half.v),
    )
    factor = 1.0 / (2.0**order - 1.0)
    ez = (full.z - half.z) * factor / scale
    if not with_v:
        return math.sqrt(np.sum(ez * ez) / ez.size)
    ev = (full.v - half.v) * factor / scale_v
    return math.sqrt((np.sum(ez * ez) + np.sum(ev * ev)) / (ez.size + ev.size))


def step_with_error(method: Method, phi, h, field, theta, atol=1e-6, rtol=1e-6):
    """One full step against two half steps.

    Returns the two-half-steps state and the weighted RMS of the
    Richardson-scaled difference.  Costs three method steps.

    Bare ALF is measured on ``z`` only: one step flips the sign of the
    ``v - f(z)`` oscillation while two steps keep it, so the ``v`` difference
    between full and halved steps does not shrink with ``h``.
    """
    full = method_step(method, phi, h, field, theta)
    mid = method_step(method, phi, 0.5 * h, field, theta)
    half = method_step(method, mid, 0.5 * h, field, theta)
    return half, _error_norm(full, half, phi, atol, rtol, method.order, method.name != "ALF")


def propose_step(err_norm: float, h: float, p: int) -> tuple[bool, float]:
    if err_norm == 0.0:
        return True, MAX_FACTOR * h
    if not math.isfinite(err_norm):
        return False, 0.5 * h
    factor = SAFETY * err_norm ** (-1.0 / (p + 1))
    factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
    return err_norm <= 1.0, h * factor


# drivers -----------------------------------------------------------------------


@dataclass(frozen=True)
class Fixed:
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("fixed step size must be positive")


@dataclass(frozen=True)
class Adaptive:
    atol: float = 1e-6
    rtol: float = 1e-6
    h0: float | None = None
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.atol < 0 or self.rtol < 0 or self.atol + self.rtol == 0:
            raise ValueError("tolerances must be non-negative and not both zero")


@dataclass
class StepTrace:
    """Accepted step sizes of one forward pass and the counters that went with it.

    ``segment_ends[i]`` is the number of accepted steps taken up to the
    observation time ``obs_times[i]``.  ``log`` rows are
    ``(index, t, h, accepted, err_norm)`` for every attempted step.
    """

    method: Method
    t0: float
    obs_times: list[float]
    steps: list[float] = dc_field(default_factory=list)
    segment_ends: list[int] = dc_field(default_factory=list)
    fevals: int = 0
    rejected: int = 0
    log: list[tuple] = dc_field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def segment(self, i) -> list[float]:
        start = self.segment_ends[i - 1] if i > 0 else 0
        return self.steps[start: self.segment_ends[i]]

    def segment_start_time(self, i) -> float:
        return self.obs_times[i - 1] if i > 0 else self.t0

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("index,t,h,accepted,err_norm\n")
            for row in self.log:
                idx, t, h, acc, err = row
                fh.write(f"{idx},{t!r},{h!r},{int(acc)},{err!r}\n")


def _check_obs_times(t0, obs_times):
    obs = [float(t) for t in obs_times]
    if not obs:
        raise ValueError("need at least one observation time")
    if obs[0] <= t0 or any(b <= a for a, b in zip(obs, obs[1:])):
        raise ValueError("observation times must be strictly increasing and after t0")
    return obs


def _fixed_segment(phi, t_end, h, method, field, theta, trace):
    span = t_end - phi.t
    n = max(1, math.ceil(span / h - 1e-9))
    for j in range(n):
        step = h
        if j == n - 1:
            rest = t_end - phi.t
            # an h that divides the interval stays unclipped despite round-off in t
            if abs(rest - h) > 1e-12 * max(1.0, abs(t_end)):
                step = rest
        phi = method_step(method, phi, step, field, theta)
        trace.steps.append(step)
        trace.fevals += method.evals_per_step
        trace.log.append((len(trace.steps) - 1, phi.t, step, True, 0.0))
    phi.t = t_end
    return phi


def _adaptive_segment(phi, t_end, h, mode, method, field, theta, trace):
    rejections = 0
    per_trial = 3 * method.evals_per_step
    while True:
        remaining = t_end - phi.t
        last = h >= remaining * (1.0 - 1e-12) or remaining - h < 1e-12 * max(1.0, abs(t_end))
        step = remaining if last else h
        try:
            cand, err = step_with_error(method, phi, step, field, theta, mode.atol, mode.rtol)
        except (NonFiniteError, FloatingPointError):
            cand, err = None, math.inf
        trace.fevals += per_trial
        accept, h_new = propose_step(err, step, method.order)
        trace.log.append((len(trace.steps), phi.t, step, accept, err))
        if not accept:
            trace.rejected += 1
            rejections += 1
            if rejections > MAX_REJECTIONS:
                raise StiffnessError(f"{rejections} consecutive rejected steps near t={phi.t:g} (h={step:g})")
            h = h_new
            continue
        rejections = 0
        trace.steps.extend([0.5 * step, 0.5 * step])
        if len(trace.steps) > mode.max_steps:
            raise DivergenceError(f"more than {mode.max_steps} steps; the trajectory is likely diverging")
        phi = cand
        if last:
            phi.t = t_end
            # keep the controller's proposal for the next segment, not the clipped size
            return phi, max(h_new, h) if h > step else h_new
        h = h_new


def integrate_forward(method: Method, field, theta, z0, t0, obs_times, mode):
    """Integrate from ``t0`` and return the states at ``obs_times`` plus the trace.

    Only the observation states are retained; intermediate states are dropped
    as soon as the next one exists.
    """
    if not method.reversible:
        raise ValueError("integrate_forward needs a reversible method; use rk45_solve for RK45")
    obs = _check_obs_times(t0, obs_times)
    trace = StepTrace(method, float(t0), obs)
    phi = init_augmented(field, z0, float(t0), theta)
    trace.fevals += 1
    states = []
    if isinstance(mode, Fixed):
        for t_end in obs:
            phi = _fixed_segment(phi, t_end, mode.h, method, field, theta, trace)
            trace.segment_ends.append(len(trace.steps))
            states.append(phi)
    elif isinstance(mode, Adaptive):
        h = mode.h0 if mode.h0 is not None else (obs[-1] - t0) / 100.0
        for t_end in obs:
            phi, h = _adaptive_segment(phi, t_end, h, mode, method, field, theta, trace)
            trace.segment_ends.append(len(trace.steps))
            states.append(phi)
    else:
        raise TypeError(f"unknown integration mode {mode!r}")
    return states, trace


def replay_forward(method: Method, field, theta, z0, trace: StepTrace):
    """Re-run the forward pass with the step sizes recorded in ``trace``."""
    phi = init_augmented(field, z0, trace.t0, theta)
    states = []
    for i, t_end in enumerate(trace.obs_times):
        for h in trace.segment(i):
            phi = method_step(method, phi, h, field, theta)
        phi.t = t_end
        states.append(phi)
    return states


def integrate_backward(method: Method, field, theta, phi_end: AugmentedState, trace: StepTrace):
    """Walk the recorded steps in reverse and return the reconstructed initial state."""
    if method != trace.method:
        raise ValueError(f"trace was recorded with {trace.method.name}, not {method.name}")
    phi = phi_end
    for i in range(len(trace.obs_times) - 1, -1, -1):
        for h in reversed(trace.segment(i)):
            phi = method_step(method, phi, -h, field, theta)
        phi.t = trace.segment_start_time(i)
    return phi


# RK45 reference ----------------------------------------------------------------

# Dormand-Prince 5(4)
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = _DP_B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _dp_step(field, theta, z, t, h, k0):
    ks = [k0]
    for i in range(1, 7):
        dz = sum(a * k for a, k in zip(_DP_A[i], ks) if a != 0.0)
        ks.append(field.eval(z + h * dz, t + _DP_C[i] * h, theta))
    z_new = z + h * sum(b * k for b, k in zip(_DP_B, ks) if b != 0.0)
    err = h * sum(e * k for e, k in zip(_DP_E, ks))
    return z_new, err, ks[-1]


def rk45_solve(field, theta, z0, t0, times, atol=1e-12, rtol=1e-11, h0=None, max_steps=1_000_000):
    """Dormand-Prince 5(4) with the same controller as the reversible drivers.

    Returns the states at each of ``times`` (stacked along a new first axis)
    and the number of field evaluations.
    """
    obs = _check_obs_times(t0, times)
    z = np.asarray(z0, dtype=float)
    t = float(t0)
    h = h0 if h0 is not None else (obs[-1] - t0) / 100.0
    k0 = field.eval(z, t, theta)
    fevals = 1
    out = []
    steps = 0
    for t_end in obs:
        rejections = 0
        while t < t_end:
            remaining = t_end - t
            last = h >= remaining * (1.0 - 1e-12)
            step = remaining if last else h
            try:
                z_new, err, k_last = _dp_step(field, theta, z, t, step, k0)
                scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_new))
                err_norm = math.sqrt(float(np.mean((err / scale) ** 2)))
            except (NonFiniteError, FloatingPointError):
                err_norm = math.inf
            fevals += 6
            accept, h_new = propose_step(err_norm, step, 4)
            if not accept:
                rejections += 1
                if rejections > MAX_REJECTIONS:
                    raise StiffnessError(f"RK45: {rejections} consecutive rejections near t={t:g}")
                h = h_new
                continue
            rejections = 0
            steps += 1
            if steps > max_steps:
                raise DivergenceError(f"RK45: more than {max_steps} steps")
            z, k0 = z_new, k_last
            t = t_end if last else t + step
            if not last or h_new < h:
                h = h_new
        out.append(z.copy())
    return np.stack(out), fevals


def rk45_reference(field, theta, z0, t0, t1, atol=1e-12, rtol=1e-11):
    return rk45_solve(field, theta, z0, t0, [t1], atol, rtol)[0][0]
