"""Losses, optimizers, data generation and the training loop.

A *problem* bundles a vector field with a dataset of trajectories that all
start at ``t0`` and are observed at the same times.  The whole (mini-)batch is
integrated as one stacked system, so the adaptive controller picks one step
sequence per batch.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .adjoint import compute_gradients
from .dynamics import DynamicsError
from .integrators import Adaptive, Fixed, IntegrationError, Method, integrate_forward, rk45_solve

__all__ = [
    "TrainingDiverged",
    "Observation",
    "Dataset",
    "Problem",
    "TrainConfig",
    "TrainRecord",
    "quadratic_loss",
    "SGD",
    "AdamW",
    "make_optimizer",
    "halton",
    "halton_box",
    "generate_data",
    "parameter_error",
    "loss_and_gradient",
    "evaluate_loss",
    "train",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, message):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class Observation:
    t: float
    target: np.ndarray
    projection: np.ndarray  # indices of observed state components


@dataclass
class Dataset:
    """Trajectories sharing ``t0`` and observation times.

    ``z0`` has shape ``(B, d)``; ``targets[i]`` has shape ``(B, len(projection))``.
    """

    z0: np.ndarray
    t0: float
    obs_times: list[float]
    targets: list[np.ndarray]
    projection: np.ndarray

    @property
    def size(self) -> int:
        return self.z0.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.z0[idx], self.t0, self.obs_times, [y[idx] for y in self.targets], self.projection)

    def observations(self) -> list[Observation]:
        return [Observation(t, y, self.projection) for t, y in zip(self.obs_times, self.targets)]

    def to_csv(self, path, trajectory: int) -> None:
        """One trajectory as rows ``t, x_0, x_1, ...`` (initial state first)."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            d = self.z0.shape[1]
            w.writerow(["t"] + [f"x{k}" for k in range(d)])
            w.writerow([repr(self.t0)] + [repr(float(x)) for x in self.z0[trajectory]])
            for t, y in zip(self.obs_times, self.targets):
                row = np.full(d, np.nan)
                row[self.projection] = y[trajectory]
                w.writerow([repr(t)] + ["" if np.isnan(x) else repr(float(x)) for x in row])


@dataclass
class Problem:
    name: str
    field: object
    data: Dataset
    theta_true: np.ndarray | None = None


def quadratic_loss(predicted, observations, normalization: float = 1.0):
    """Sum of squared projected mismatches, divided by ``normalization``.

    Returns the value and, per observation, the gradient with respect to the
    full state ``z`` (zero outside the projection).
    """
    if len(predicted) != len(observations):
        raise ValueError(f"{len(predicted)} predictions for {len(observations)} observations")
    value = 0.0
    grads = []
    for phi, obs in zip(predicted, observations):
        resid = phi.z[..., obs.projection] - obs.target
        value += float(np.sum(resid * resid))
        g = np.zeros_like(phi.z)
        g[..., obs.projection] = 2.0 * resid / normalization
        grads.append(g)
    return value / normalization, grads


# optimizers ----------------------------------------------------------------------


class SGD:
    """Plain gradient descent with an exponentially decaying learning rate."""

    def __init__(self, lr0=0.1, gamma=0.95):
        if not lr0 > 0 or not 0 < gamma <= 1:
            raise ValueError("need lr0 > 0 and 0 < gamma <= 1")
        self.lr0 = lr0
        self.gamma = gamma

    def lr(self, epoch):
        return self.lr0 * self.gamma**epoch

    def step(self, theta, grad, epoch):
        return theta - self.lr(epoch) * grad


class AdamW:
    """Adam with decoupled weight decay and an exponential learning-rate schedule."""

    def __init__(self, lr0=1e-3, gamma=1.0, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        if not lr0 > 0 or not 0 < gamma <= 1:
            raise ValueError("need lr0 > 0 and 0 < gamma <= 1")
        self.lr0, self.gamma = lr0, gamma
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = None
        self.v = None
        self.t = 0

    def lr(self, epoch):
        return self.lr0 * self.gamma**epoch

    def step(self, theta, grad, epoch):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        lr = self.lr(epoch)
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        theta = theta * (1 - lr * self.weight_decay)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name, lr0, gamma, weight_decay=0.01):
    key = name.lower()
    if key == "sgd":
        return SGD(lr0, gamma)
    if key == "adamw":
        return AdamW(lr0, gamma, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


# data --------------------------------------------------------------------------

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97)


def _radical_inverse(i, base):
    inv, f = 0.0, 1.0 / base
    while i > 0:
        i, digit = divmod(i, base)
        inv += digit * f
        f /= base
    return inv


def halton(n: int, dim: int, start: int = 1) -> np.ndarray:
    """First ``n`` points of the unscrambled Halton sequence in ``[0, 1)^dim``.

    Indexing starts at 1, so the base-2 coordinate runs 1/2, 1/4, 3/4, ...
    """
    if dim > len(_PRIMES):
        raise ValueError(f"at most {len(_PRIMES)} dimensions supported")
    return np.array([[_radical_inverse(i, _PRIMES[k]) for k in range(dim)] for i in range(start, start + n)])


def halton_box(n, center, diameter):
    center = np.asarray(center, dtype=float)
    return center + diameter * (halton(n, center.size) - 0.5)


def generate_data(field, theta_true, z0, obs_times, projection=None, t0=0.0, atol=1e-12, rtol=1e-11) -> Dataset:
    """Reference trajectories from the RK45 integrator at tight tolerances."""
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    if projection is None:
        projection = np.arange(field.d)
    projection = np.asarray(projection)
    states, _ = rk45_solve(field, theta_true, z0, t0, obs_times, atol=atol, rtol=rtol)
    targets = [s[:, projection] for s in states]
    return Dataset(z0, float(t0), [float(t) for t in obs_times], targets, projection)


def parameter_error(theta, theta_true) -> float:
    """RMS deviation over all named parameter entries."""
    diff = np.asarray(theta) - np.asarray(theta_true)
    return float(np.sqrt(np.mean(diff * diff))) if diff.size else 0.0


# training --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    method: Method
    mode: object  # Fixed | Adaptive
    optimizer: str = "sgd"
    lr0: float = 0.1
    gamma: float = 0.95
    weight_decay: float = 0.01
    batch_size: int | None = None
    max_epochs: int = 100
    target_loss: float = 0.0
    seed: int = 0
    normalize: str = "batch"  # "batch": divide by trajectories per batch; "sum": no division

    def __post_init__(self):
        if not self.lr0 > 0 or not 0 < self.gamma <= 1:
            raise ValueError("need lr0 > 0 and 0 < gamma <= 1")
        if not isinstance(self.mode, (Fixed, Adaptive)):
            raise TypeError("mode must be Fixed or Adaptive")


@dataclass
class TrainRecord:
    rows: list[tuple] = dc_field(default_factory=list)  # (epoch, loss, seconds, fevals, param_error)
    converged: bool = False
    diverged_at: int | None = None

    HEADER = ("epoch", "loss", "seconds", "fevals", "param_error")

    @property
    def losses(self):
        return [r[1] for r in self.rows]

    @property
    def final_loss(self):
        return self.rows[-1][1] if self.rows else math.nan

    @property
    def fevals(self):
        return self.rows[-1][3] if self.rows else 0

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for row in self.rows:
                w.writerow([row[0]] + [repr(float(x)) if x is not None else "" for x in row[1:]])


def loss_and_gradient(problem: Problem, theta, method, mode, batch: Dataset | None = None, normalize="batch"):
    """Forward pass, loss and adjoint gradient for one batch.

    Returns ``(loss, grad, fevals)`` where ``fevals`` counts every field
    evaluation of the forward pass (rejected trials included) and of the
    backward reconstruction.
    """
    data = batch if batch is not None else problem.data
    norm = float(data.size) if normalize == "batch" else 1.0
    observations = data.observations()

    def loss(states):
        return quadratic_loss(states, observations, norm)

    field = problem.field
    checkpoints, trace = integrate_forward(method, field, theta, data.z0, data.t0, data.obs_times, mode)
    value, grad = compute_gradients(method, field, theta, data.z0, data.t0, data.obs_times, loss,
                                    trace=trace, checkpoints=checkpoints)
    fevals = trace.fevals + trace.n_steps * method.evals_per_step
    return value, grad, fevals


def evaluate_loss(problem: Problem, theta, method, mode, batch: Dataset | None = None, normalize="batch"):
    data = batch if batch is not None else problem.data
    norm = float(data.size) if normalize == "batch" else 1.0
    states, trace = integrate_forward(method, problem.field, theta, data.z0, data.t0, data.obs_times, mode)
    return quadratic_loss(states, data.observations(), norm)[0], trace.fevals


def train(problem: Problem, config: TrainConfig, theta0, callback=None):
    """Gradient-based fitting of ``theta`` to the problem's trajectories.

    Each epoch: integrate forward, evaluate the loss, pull the gradient back
    with the reversible adjoint and take one optimizer step per batch.  The
    loop stops once the epoch loss is at or below ``config.target_loss`` or
    after ``config.max_epochs`` epochs.  Row 0 of the record holds the loss
    at ``theta0``.
    """
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, config.lr0, config.gamma, config.weight_decay)
    theta = np.array(theta0, dtype=float, copy=True)
    record = TrainRecord()
    n = problem.data.size
    bs = config.batch_size or n
    fevals = 0
    start = time.perf_counter()
    truth = problem.theta_true

    def perr(th):
        return parameter_error(th, truth) if truth is not None else None

    for epoch in range(config.max_epochs + 1):
        # a full-batch epoch evaluates the loss at the current theta before stepping;
        # with mini-batches the step follows each batch and the epoch loss is their mean
        order = rng.permutation(n) if bs < n else np.arange(n)
        epoch_loss = 0.0
        pending = None
        for lo in range(0, n, bs):
            idx = order[lo: lo + bs]
            batch = problem.data.subset(idx) if bs < n else None
            try:
                value, grad, fe = loss_and_gradient(problem, theta, config.method, config.mode, batch,
                                                    config.normalize)
            except (DynamicsError, IntegrationError, FloatingPointError) as exc:
                record.diverged_at = epoch
                raise TrainingDiverged(epoch, f"integration failed at epoch {epoch}: {exc}") from exc
            fevals += fe
            if not math.isfinite(value) or not np.all(np.isfinite(grad)):
                record.diverged_at = epoch
                raise TrainingDiverged(epoch, f"loss became non-finite at epoch {epoch}")
            epoch_loss += value * (len(idx) / n if config.normalize == "batch" else 1.0)
            if bs < n:
                if epoch < config.max_epochs:
                    theta = opt.step(theta, grad, epoch)
            else:
                pending = grad
        record.rows.append((epoch, epoch_loss, time.perf_counter() - start, fevals, perr(theta)))
        if callback is not None:
            callback(epoch, theta, epoch_loss)
        if epoch_loss <= config.target_loss:
            record.converged = True
            break
        if epoch == config.max_epochs:
            break
        if pending is not None:
            theta = opt.step(theta, pending, epoch)
    return theta, record
