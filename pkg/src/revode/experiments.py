"""Experiment drivers shared by the command line and the acceptance tests.

Each study returns plain rows (lists of tuples) plus a small summary dict;
writing files and printing is left to :mod:`revode.cli`.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from itertools import product

import numpy as np

from .adjoint import (
    compute_gradients,
    corrupt_scaling,
    finite_difference_oracle,
    full_storage_oracle,
    replayed_loss,
)
from .dynamics import (
    DynamicsError,
    make_duffing,
    make_duffing_potential_field,
    make_example_ode,
    make_kepler,
    make_mlp_field,
    make_wave_field,
    make_wave_reference_field,
)
from .integrators import Adaptive, Fixed, get_method, integrate_forward, rk45_solve
from .training import (
    Dataset,
    Problem,
    TrainConfig,
    evaluate_loss,
    generate_data,
    halton_box,
    quadratic_loss,
    train,
)

KEPLER_ALPHA = math.pi / 4
KEPLER_X0 = (0.75, 0.0, 0.0, 0.9 * math.pi / 4 * math.sqrt(5.0 / 3.0))
KEPLER_OBS = (0.2, 0.4, 0.6, 0.8, 1.0)
KEPLER_INITS = (0.1, 0.7, 0.75, 0.8, 1.3)

# start value for the example ODE; from z0 = 0 the solution leaves the
# asymptotic regime of the coarsest steps
EXAMPLE_Z0 = -2.0

# desk-scale coupled oscillator ground truth (N = 2)
DUFFING2_TRUTH = {"a": (6.0, 9.0), "b": (3.0, 6.0), "e": (5.0,)}


def parallel_map(fn, items, threads=1):
    """Ordered map, optionally on a thread pool; results keep the input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def fit_slope(xs, ys, floor=1e-12):
    """Least-squares slope of log(y) against log(x), dropping points at or below ``floor``."""
    pts = [(x, y) for x, y in zip(xs, ys) if y > floor and math.isfinite(y)]
    if len(pts) < 2:
        return math.nan
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    return float(np.polyfit(lx, ly, 1)[0])


# order of accuracy -----------------------------------------------------------------


def order_study(methods=("ALF", "ALF2", "Y4", "Y6"), n_levels=10, h_max=0.5, z0=EXAMPLE_Z0,
                t1=1.0, reference_tol=1e-13, threads=1):
    """Global error at ``t1`` on the example ODE for ``h = h_max * 2**-i``.

    Returns rows ``(method, h, err_z, err_v)``.
    """
    field = make_example_ode()
    theta = np.zeros(0)
    z0 = np.array([float(z0)])
    ref_states, _ = rk45_solve(field, theta, z0, 0.0, [t1], atol=reference_tol, rtol=reference_tol)
    z_ref = ref_states[0]
    v_ref = field.eval(z_ref, t1, theta)
    hs = [h_max * 2.0 ** -i for i in range(n_levels)]

    def run(cell):
        name, h = cell
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                (phi,), _ = integrate_forward(get_method(name), field, theta, z0, 0.0, [t1], Fixed(h))
        except DynamicsError:
            # the coarsest steps of a low-order method can blow up; report, don't abort
            return (name, h, math.inf, math.inf)
        return (name, h, float(np.max(np.abs(phi.z - z_ref))), float(np.max(np.abs(phi.v - v_ref))))

    return parallel_map(run, list(product(methods, hs)), threads)


def order_slopes(rows, max_level=7, floor=1e-12):
    """Fitted slopes per method over the first ``max_level`` step sizes."""
    out = {}
    for name in dict.fromkeys(r[0] for r in rows):
        sel = [r for r in rows if r[0] == name][:max_level]
        hs = [r[1] for r in sel]
        out[name] = (fit_slope(hs, [r[2] for r in sel], floor), fit_slope(hs, [r[3] for r in sel], floor))
    return out


# adaptive controller ------------------------------------------------------------------


def tolerance_sweep(method="Y4", tols=None, z0=EXAMPLE_Z0, t1=1.0):
    """Final global error and accepted steps on the example ODE over a tolerance sweep.

    Returns rows ``(rtol, err, accepted_steps, fevals)``; atol = rtol.
    """
    if tols is None:
        tols = [1e-6 * 10.0 ** (-k / 2) for k in range(13)]
    field = make_example_ode()
    theta = np.zeros(0)
    z0 = np.array([float(z0)])
    ref, _ = rk45_solve(field, theta, z0, 0.0, [t1], atol=1e-14, rtol=1e-13)
    z_ref = ref[0]
    v_ref = field.eval(z_ref, t1, theta)
    m = get_method(method)
    rows = []
    for tol in tols:
        (phi,), trace = integrate_forward(m, field, theta, z0, 0.0, [t1], Adaptive(tol, tol))
        err = max(float(np.max(np.abs(phi.z - z_ref))), float(np.max(np.abs(phi.v - v_ref))))
        rows.append((tol, err, trace.n_steps, trace.fevals))
    return rows


# Kepler -------------------------------------------------------------------------------


def kepler_problem(x0=KEPLER_X0, obs_times=KEPLER_OBS, alpha=KEPLER_ALPHA) -> Problem:
    """One elliptic orbit observed in ``q`` at five times."""
    field = make_kepler()
    theta = np.array([alpha])
    data = generate_data(field, theta, np.asarray(x0, dtype=float), list(obs_times), projection=[0, 1])
    return Problem("kepler", field, data, theta)


def kepler_study(inits=KEPLER_INITS, methods=("ALF", "Y4"), tol=1e-9, lr0=0.1, gamma=0.99,
                 target_loss=1e-8, max_epochs=500, threads=1):
    """Adaptive training from each initial alpha.

    Rows ``(init, method, epochs, seconds, fevals, final |alpha - pi/4|, converged, final_loss)``.
    """
    problem = kepler_problem()

    def run(cell):
        a0, name = cell
        cfg = TrainConfig(get_method(name), Adaptive(tol, tol), "sgd", lr0, gamma,
                          max_epochs=max_epochs, target_loss=target_loss)
        start = time.perf_counter()
        theta, rec = train(problem, cfg, np.array([a0]))
        seconds = time.perf_counter() - start
        return (a0, name, len(rec.rows) - 1, seconds, rec.fevals,
                abs(float(theta[0]) - KEPLER_ALPHA), rec.converged, rec.final_loss)

    return parallel_map(run, list(product(inits, methods)), threads)


def kepler_grid_starts(x0=KEPLER_X0, step=0.1):
    """The 81 grid points ``x0 + step * {-1, 0, 1}^4``."""
    x0 = np.asarray(x0, dtype=float)
    offs = np.array(list(product((-1.0, 0.0, 1.0), repeat=4)))
    return x0 + step * offs


def landscape_study(h0=0.1, n_levels=3, n_grid=300, width=1e-4, methods=("ALF", "Y4"),
                    starts=None, threads=1):
    """Fixed-step loss over ``alpha`` near pi/4 for ``h = h0, h0/2, ...``.

    Returns ``(rows, summary)``.  Rows are ``(method, h, alpha, loss)``; the
    summary maps ``(method, h)`` to ``(grid argmin offset, fitted minimiser
    offset)`` where the fitted minimiser is the vertex of a least-squares
    parabola through the grid.
    """
    if starts is None:
        starts = np.asarray(KEPLER_X0, dtype=float)[None, :]
    field = make_kepler()
    truth = np.array([KEPLER_ALPHA])
    data = generate_data(field, truth, starts, list(KEPLER_OBS), projection=[0, 1])
    problem = Problem("kepler-landscape", field, data, truth)
    alphas = KEPLER_ALPHA + np.linspace(-width, width, n_grid)
    hs = [h0 * 2.0 ** -i for i in range(n_levels)]

    def run(cell):
        name, h = cell
        m = get_method(name)
        losses = [evaluate_loss(problem, np.array([a]), m, Fixed(h))[0] for a in alphas]
        return name, h, losses

    rows, summary = [], {}
    for name, h, losses in parallel_map(run, list(product(methods, hs)), threads):
        losses = np.asarray(losses)
        rows.extend((name, h, float(a), float(v)) for a, v in zip(alphas, losses))
        x = alphas - KEPLER_ALPHA
        c2, c1, _ = np.polyfit(x / width, losses, 2)
        vertex = -c1 / (2 * c2) * width if c2 > 0 else math.nan
        summary[(name, h)] = (float(x[int(np.argmin(losses))]), float(vertex))
    return rows, summary


def drift_slopes(summary, use="fit"):
    """Slope of log|minimiser offset| against log h per method."""
    k = 1 if use == "fit" else 0
    out = {}
    for name in dict.fromkeys(key[0] for key in summary):
        hs = sorted(h for (n, h) in summary if n == name)
        out[name] = fit_slope(hs, [abs(summary[(name, h)][k]) for h in hs], floor=0.0)
    return out


# coupled oscillators -------------------------------------------------------------------


def duffing_truth(n, seed=0):
    """Ground-truth parameters: fixed values for N = 2, seeded draws otherwise."""
    field = make_duffing(n)
    if n == 2:
        return field, field.pack(**{k: np.array(v) for k, v in DUFFING2_TRUTH.items()})
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 1.5, n)
    b = rng.uniform(0.5, 1.5, n)
    e = rng.uniform(0.0, 0.5, n * (n - 1) // 2)
    return field, field.pack(a=a, b=b, e=e)


def duffing_problem(n=2, n_traj=200, t_end=0.5, diameter=2.0, seed=0) -> Problem:
    field, truth = duffing_truth(n, seed)
    z0 = halton_box(n_traj, np.zeros(field.d), diameter)
    data = generate_data(field, truth, z0, [t_end])
    return Problem(f"duffing{n}", field, data, truth)


def duffing_init(problem: Problem, radius, seed=0):
    rng = np.random.default_rng(seed)
    return problem.theta_true + rng.uniform(-radius, radius, problem.theta_true.size)


def plateau_study(problem: Problem, theta0, h=0.1, epochs=500, lr0=0.05, gamma=0.995,
                  methods=("ALF", "Y4"), threads=1):
    """Fixed-step AdamW training for each method; returns ``{method: (theta, record)}``."""

    def run(name):
        cfg = TrainConfig(get_method(name), Fixed(h), "adamw", lr0, gamma, max_epochs=epochs)
        return name, train(problem, cfg, theta0)

    return dict(parallel_map(run, methods, threads))


def adaptive_race(problem: Problem, theta0, tol=1e-8, target_loss=1e-5, max_epochs=500, lr0=0.05,
                  gamma=0.995, optimizer="adamw", methods=("ALF", "Y4"), threads=1):
    """Adaptive training to a target loss; returns ``{method: (theta, record)}``."""

    def run(name):
        cfg = TrainConfig(get_method(name), Adaptive(tol, tol), optimizer, lr0, gamma,
                          max_epochs=max_epochs, target_loss=target_loss)
        return name, train(problem, cfg, theta0)

    return dict(parallel_map(run, methods, threads))


# wave equation ---------------------------------------------------------------------------


def wave_initial_data(n, points, rng, length=1.0):
    """Random smooth periodic (u, v) with Fourier coefficients weighted by exp(-4 m^8)."""
    x = np.arange(points) * (length / points)
    out = np.zeros((n, 2 * points))
    for i in range(n):
        for part in range(2):
            s = np.zeros(points)
            for m in range(points // 2):
                w = math.exp(-4.0 * m**8)
                if w < 1e-300:
                    break
                s += w * rng.standard_normal() * np.cos(2 * math.pi * m * x / length)
                if m:
                    s += w * rng.standard_normal() * np.sin(2 * math.pi * m * x / length)
            out[i, part * points:(part + 1) * points] = s
    return out


def wave_datasets(m=20, refine=4, n_train=50, n_test=30, t_end=0.3, seed=0):
    """Train/test sets: fine-mesh stencil solutions subsampled to ``m`` points."""
    fine = m * refine
    rng = np.random.default_rng(seed)
    z_fine = wave_initial_data(n_train + n_test, fine, rng)
    ref = make_wave_reference_field(fine)
    (end_fine,), _ = rk45_solve(ref, np.zeros(0), z_fine, 0.0, [t_end], atol=1e-12, rtol=1e-11)

    def sub(a):
        return np.concatenate([a[:, :fine][:, ::refine], a[:, fine:][:, ::refine]], axis=1)

    z0, z1 = sub(z_fine), sub(end_fine)
    every = np.arange(2 * m)
    train_set = Dataset(z0[:n_train], 0.0, [t_end], [z1[:n_train]], every)
    test_set = Dataset(z0[n_train:], 0.0, [t_end], [z1[n_train:]], every)
    return train_set, test_set


def wave_study(m=20, hidden=100, n_train=50, n_test=30, t_end=0.3, tol=1e-4, lr0=1e-2, gamma=0.995, epochs=300,
               methods=("ALF", "Y4"), seed=0, threads=1):
    """Train the ReLU force network with each method from one shared initialisation.

    Returns ``(field, {method: (theta, record, test_before, test_after)})``.
    """
    train_set, test_set = wave_datasets(m, n_train=n_train, n_test=n_test, t_end=t_end, seed=seed)
    field = make_wave_field(m, hidden=hidden)
    theta0 = field.init_params(np.random.default_rng(seed + 1))
    problem = Problem("wave", field, train_set, None)
    test_problem = Problem("wave-test", field, test_set, None)
    mode = Adaptive(tol, tol)

    def run(name):
        meth = get_method(name)
        cfg = TrainConfig(meth, mode, "adamw", lr0, gamma, max_epochs=epochs)
        theta, rec = train(problem, cfg, theta0)
        before = evaluate_loss(test_problem, theta0, meth, mode)[0]
        after = evaluate_loss(test_problem, theta, meth, mode)[0]
        return name, (theta, rec, before, after)

    return field, dict(parallel_map(run, methods, threads))


# gradient checks -------------------------------------------------------------------------


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0 and b.size == 0:
        return 0.0
    scale = float(np.max(np.abs(b)))
    diff = float(np.max(np.abs(a - b)))
    return diff / scale if scale > 0 else diff


def gradcheck_cases(seed=0):
    """Built-in (name, field, theta, z0, obs_times, targets, projection) test problems.

    Targets come from a nearby "true" parameter so every gradient is nonzero.
    """
    rng = np.random.default_rng(seed)
    cases = []

    f = make_example_ode()
    z0 = np.array([EXAMPLE_Z0])
    cases.append(("example-ode", f, np.zeros(0), z0, [0.5, 1.0], np.arange(1), np.zeros(0)))

    f = make_kepler()
    cases.append(("kepler", f, np.array([0.8]), np.asarray(KEPLER_X0), list(KEPLER_OBS),
                  np.array([0, 1]), np.array([KEPLER_ALPHA])))

    f, truth = duffing_truth(2)
    z0 = halton_box(3, np.zeros(4), 2.0)
    cases.append(("duffing2", f, truth + rng.uniform(-0.5, 0.5, truth.size), z0, [0.25, 0.5],
                  np.arange(4), truth))

    f = make_mlp_field((3, 12, 3), "tanh")
    truth = f.net.init_params(rng)
    z0 = rng.uniform(-1, 1, (2, 3))
    cases.append(("mlp", f, truth + 0.1 * rng.standard_normal(truth.size), z0, [0.5, 1.0],
                  np.arange(3), truth))

    f = make_duffing_potential_field(hidden=8)
    truth = f.init_params(rng)
    z0 = rng.uniform(-0.5, 0.5, (2, 4))
    cases.append(("duffing-potential", f, truth + 0.1 * rng.standard_normal(truth.size), z0, [0.5],
                  np.arange(4), truth))
    return cases


def _case_loss(field, truth, z0, obs_times, projection):
    z0 = np.atleast_2d(z0)
    if truth.size == 0 and field.P == 0:
        # no parameters: compare against a slightly shifted reference
        states, _ = rk45_solve(field, truth, z0 + 0.01, 0.0, obs_times)
    else:
        states, _ = rk45_solve(field, truth, z0, 0.0, obs_times)
    data = Dataset(z0, 0.0, list(obs_times), [s[:, projection] for s in states], projection)
    obs = data.observations()

    def loss(states):
        return quadratic_loss(states, obs, float(len(z0)))

    return loss


GRADCHECK_SYSTEMS = ("example-ode", "kepler", "duffing2", "mlp", "duffing-potential")


def gradcheck(systems=GRADCHECK_SYSTEMS, methods=("ALF", "ALF2", "Y4", "Y6"), h=0.05, tol=1e-6, probes=10, eps=1e-6,
              fd_tol=1e-5, oracle_tol=1e-10, scaling_factor=1.0, seed=0, threads=1):
    """Oracle-equivalence and finite-difference checks on every built-in case.

    Rows ``(system, method, mode, P, oracle_rel_err, fd_rel_err, passed)``.
    ``scaling_factor != 1`` deliberately corrupts the adjoint rescaling.
    """
    unknown = set(systems) - set(GRADCHECK_SYSTEMS)
    if unknown:
        raise ValueError(f"unknown gradcheck systems {sorted(unknown)}")
    cases = [c for c in gradcheck_cases(seed) if c[0] in systems]
    modes = (("fixed", Fixed(h)), ("adaptive", Adaptive(tol, tol)))

    def run(cell):
        (name, field, theta, z0, obs_times, projection, truth), method, (mode_name, mode) = cell
        m = get_method(method)
        loss = _case_loss(field, truth, z0, obs_times, projection)
        z0 = np.atleast_2d(z0)
        checkpoints, trace = integrate_forward(m, field, theta, z0, 0.0, obs_times, mode)
        with corrupt_scaling(scaling_factor):
            _, grad = compute_gradients(m, field, theta, z0, 0.0, obs_times, loss,
                                        trace=trace, checkpoints=checkpoints)
        _, ref = full_storage_oracle(m, field, theta, z0, 0.0, obs_times, loss, trace=trace)
        oracle = rel_err(grad, ref)
        fun = replayed_loss(m, field, z0, trace, loss)
        if field.P <= probes:
            fd = finite_difference_oracle(fun, theta, eps)
            fd_err = rel_err(grad, fd)
        else:
            idx = np.random.default_rng(seed).choice(field.P, probes, replace=False)
            scale = float(np.max(np.abs(ref))) or 1.0
            fd_err = 0.0
            for k in idx:
                e = np.zeros(field.P)
                e[k] = eps
                d = (fun(theta + e) - fun(theta - e)) / (2 * eps)
                fd_err = max(fd_err, float(abs(grad[k] - d)) / scale)
        ok = grad.shape == (field.P,) and oracle <= oracle_tol and fd_err <= fd_tol
        return (name, method, mode_name, field.P, oracle, fd_err, bool(ok))

    cells = list(product(cases, methods, modes))
    # the corruption hook is process-global, so corrupted runs stay on one thread
    return parallel_map(run, cells, threads if scaling_factor == 1.0 else 1)


__all__ = [
    "KEPLER_ALPHA",
    "KEPLER_X0",
    "KEPLER_OBS",
    "KEPLER_INITS",
    "EXAMPLE_Z0",
    "DUFFING2_TRUTH",
    "parallel_map",
    "fit_slope",
    "order_study",
    "order_slopes",
    "tolerance_sweep",
    "kepler_problem",
    "kepler_study",
    "kepler_grid_starts",
    "landscape_study",
    "drift_slopes",
    "duffing_truth",
    "duffing_problem",
    "duffing_init",
    "plateau_study",
    "adaptive_race",
    "wave_initial_data",
    "wave_datasets",
    "wave_study",
    "rel_err",
    "gradcheck_cases",
    "GRADCHECK_SYSTEMS",
    "gradcheck",
]
