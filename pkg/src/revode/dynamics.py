"""Vector fields with hand-written first-derivative actions.

Every field maps a state ``z`` of trailing dimension ``d`` (optionally with
leading batch axes), a time ``t`` and a flat parameter vector ``theta`` of
length ``P`` to ``dz/dt``.  Besides ``eval`` each field supplies the two
vector-Jacobian products needed by the discrete adjoint:

* ``vjp_state(z, t, theta, w) = (df/dz)^T w`` (same shape as ``z``)
* ``vjp_params(z, t, theta, w) = (df/dtheta)^T w`` (length ``P``, summed over
  batch axes)

Fields hold no mutable state and can be shared between threads.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "DynamicsError",
    "SingularityError",
    "NonFiniteError",
    "VectorField",
    "CountingField",
    "LinearField",
    "ExampleODE",
    "Kepler",
    "Duffing",
    "MLP",
    "MLPField",
    "DuffingPotentialField",
    "StencilForce",
    "WaveField",
    "make_kepler",
    "make_duffing",
    "make_mlp_field",
    "make_duffing_potential_field",
    "make_wave_field",
    "make_wave_reference_field",
    "make_example_ode",
]

KEPLER_SINGULARITY_RADIUS = 1e-8


class DynamicsError(RuntimeError):
    """Base class for failures raised while evaluating a vector field."""


class SingularityError(DynamicsError):
    pass


class NonFiniteError(DynamicsError):
    pass


def _check_finite(out, what):
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(out)))[0]
        raise NonFiniteError(f"{what} produced a non-finite value at component {tuple(int(i) for i in bad)}")
    return out


class VectorField:
    """Base class for ``f(z, t, theta)``.

    Subclasses implement ``_eval``, ``_vjp_state`` and ``_vjp_params`` and set
    ``d`` and ``layout`` (an ordered mapping of parameter names to slices of
    the flat parameter vector).
    """

    d: int = 0
    layout: dict[str, slice] = {}
    name: str = "field"

    @property
    def P(self) -> int:
        return max((s.stop for s in self.layout.values()), default=0)

    # public API ------------------------------------------------------------

    def eval(self, z, t, theta):
        return _check_finite(self._eval(z, t, theta), f"{self.name}.eval")

    def vjp_state(self, z, t, theta, w):
        return _check_finite(self._vjp_state(z, t, theta, w), f"{self.name}.vjp_state")

    def vjp_params(self, z, t, theta, w):
        if self.P == 0:
            return np.zeros(0)
        return _check_finite(self._vjp_params(z, t, theta, w), f"{self.name}.vjp_params")

    def vjp(self, z, t, theta, w):
        """Both products at once; fields with expensive forward passes override this."""
        return self.vjp_state(z, t, theta, w), self.vjp_params(z, t, theta, w)

    def views(self, theta) -> dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        return {name: theta[s] for name, s in self.layout.items()}

    def pack(self, **values) -> np.ndarray:
        theta = np.zeros(self.P)
        for name, s in self.layout.items():
            theta[s] = np.ravel(values[name])
        return theta

    # hooks -----------------------------------------------------------------

    def _eval(self, z, t, theta):
        raise NotImplementedError

    def _vjp_state(self, z, t, theta, w):
        raise NotImplementedError

    def _vjp_params(self, z, t, theta, w):
        raise NotImplementedError


def _layout(*entries: tuple[str, int]) -> dict[str, slice]:
    out, start = {}, 0
    for name, size in entries:
        out[name] = slice(start, start + size)
        start += size
    return out


def _batch_sum(x, ndim_tail=1):
    """Sum over leading batch axes, keeping the trailing ``ndim_tail`` axes."""
    x = np.asarray(x)
    return x.sum(axis=tuple(range(x.ndim - ndim_tail)))


class CountingField(VectorField):
    """Wraps a field and counts calls to ``eval`` (test and benchmark helper).

    The counter is the only mutable member; do not share instances across threads.
    """

    def __init__(self, inner: VectorField):
        self.inner = inner
        self.d = inner.d
        self.layout = inner.layout
        self.name = f"counting({inner.name})"
        self.evals = 0
        self.vjps = 0

    def eval(self, z, t, theta):
        self.evals += 1
        return self.inner.eval(z, t, theta)

    def vjp_state(self, z, t, theta, w):
        self.vjps += 1
        return self.inner.vjp_state(z, t, theta, w)

    def vjp_params(self, z, t, theta, w):
        self.vjps += 1
        return self.inner.vjp_params(z, t, theta, w)

    def vjp(self, z, t, theta, w):
        self.vjps += 1
        return self.inner.vjp(z, t, theta, w)


class LinearField(VectorField):
    """``f(z) = A z`` with a fixed matrix and no parameters."""

    name = "linear"

    def __init__(self, A):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.d = self.A.shape[0]
        self.layout = {}

    def _eval(self, z, t, theta):
        return np.asarray(z) @ self.A.T

    def _vjp_state(self, z, t, theta, w):
        return np.asarray(w) @ self.A


class ExampleODE(VectorField):
    """Scalar test equation dz/dt = z^2 + t + sin(z t) + 1/(z^2 + 1)."""

    name = "example-ode"
    d = 1
    layout = {}

    def _eval(self, z, t, theta):
        z = np.asarray(z)
        return z**2 + t + np.sin(z * t) + 1.0 / (z**2 + 1.0)

    def _vjp_state(self, z, t, theta, w):
        z = np.asarray(z)
        dfdz = 2 * z + t * np.cos(z * t) - 2 * z / (z**2 + 1.0) ** 2
        return dfdz * w


class Kepler(VectorField):
    """Planar Kepler problem, state ``(q1, q2, v1, v2)``, parameter ``alpha``."""

    name = "kepler"
    d = 4
    layout = _layout(("alpha", 1))

    @staticmethod
    def _split(z):
        z = np.asarray(z, dtype=float)
        q = z[..., :2]
        r = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
        if np.any(r < KEPLER_SINGULARITY_RADIUS):
            raise SingularityError(f"|q| below {KEPLER_SINGULARITY_RADIUS:g}; the orbit has hit the pole")
        return z, q, r

    def _eval(self, z, t, theta):
        z, q, r = self._split(z)
        return np.concatenate([z[..., 2:], -theta[0] * q / r**3], axis=-1)

    def _vjp_state(self, z, t, theta, w):
        z, q, r = self._split(z)
        w = np.asarray(w)
        wq, wv = w[..., :2], w[..., 2:]
        qw = np.sum(q * wv, axis=-1, keepdims=True)
        gq = -theta[0] * (wv / r**3 - 3.0 * q * qw / r**5)
        return np.concatenate([gq, wq], axis=-1)

    def _vjp_params(self, z, t, theta, w):
        z, q, r = self._split(z)
        wv = np.asarray(w)[..., 2:]
        return np.array([-np.sum(q * wv / r**3)])


class Duffing(VectorField):
    """N coupled Duffing oscillators with symmetric linear coupling.

    Parameter views: ``a`` and ``b`` (length N each) and ``e``, the N(N-1)/2
    couplings ``e_ij`` for ``i < j`` in row-major upper-triangular order.
    """

    name = "duffing"

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("need at least one oscillator")
        self.n = n
        self.d = 2 * n
        self.layout = _layout(("a", n), ("b", n), ("e", n * (n - 1) // 2))
        self._iu = np.triu_indices(n, k=1)

    def coupling_matrix(self, theta) -> np.ndarray:
        E = np.zeros((self.n, self.n))
        e = np.asarray(theta)[self.layout["e"]]
        E[self._iu] = e
        E[self._iu[::-1]] = e
        return E

    def _laplacian(self, theta):
        E = self.coupling_matrix(theta)
        return np.diag(E.sum(axis=1)) - E

    def _eval(self, z, t, theta):
        z = np.asarray(z, dtype=float)
        n = self.n
        q, v = z[..., :n], z[..., n:]
        a, b = theta[self.layout["a"]], theta[self.layout["b"]]
        acc = -a * q - b * q**3 - q @ self._laplacian(theta).T
        return np.concatenate([v, acc], axis=-1)

    def _vjp_state(self, z, t, theta, w):
        z, w = np.asarray(z, dtype=float), np.asarray(w, dtype=float)
        n = self.n
        q = z[..., :n]
        wq, wv = w[..., :n], w[..., n:]
        a, b = theta[self.layout["a"]], theta[self.layout["b"]]
        gq = -(a + 3 * b * q**2) * wv - wv @ self._laplacian(theta)
        return np.concatenate([gq, wq], axis=-1)

    def _vjp_params(self, z, t, theta, w):
        z, w = np.asarray(z, dtype=float), np.asarray(w, dtype=float)
        n = self.n
        q, wv = z[..., :n], w[..., n:]
        i, j = self._iu
        ga = _batch_sum(-q * wv)
        gb = _batch_sum(-(q**3) * wv)
        ge = _batch_sum(-(q[..., i] - q[..., j]) * (wv[..., i] - wv[..., j]))
        return np.concatenate([ga, gb, ge])


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y, x: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y, x: (x > 0).astype(float)),
    "identity": (lambda x: x, lambda y, x: np.ones_like(x)),
}


class MLP:
    """Feed-forward network ``x -> W_L s(... s(W_1 x + b_1) ...) + b_L``.

    The activation ``s`` acts on hidden layers only; the output layer is
    linear.  Weights are stored row-major as ``W<k>`` of shape
    ``(sizes[k], sizes[k-1])`` for ``k = 1..L`` in application order, with
    optional biases ``b<k>`` following each weight block.
    """

    def __init__(self, sizes, activation="tanh", bias=False):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes!r}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.bias = bias
        entries = []
        for k in range(1, len(self.sizes)):
            entries.append((f"W{k}", self.sizes[k] * self.sizes[k - 1]))
            if bias:
                entries.append((f"b{k}", self.sizes[k]))
        self.layout = _layout(*entries)
        self.P = max(s.stop for s in self.layout.values())

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def _weights(self, theta, offset=0):
        out = []
        for k in range(1, len(self.sizes)):
            s = self.layout[f"W{k}"]
            W = theta[offset + s.start: offset + s.stop].reshape(self.sizes[k], self.sizes[k - 1])
            b = None
            if self.bias:
                sb = self.layout[f"b{k}"]
                b = theta[offset + sb.start: offset + sb.stop]
            out.append((W, b))
        return out

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
        theta = np.empty(self.P)
        for k in range(1, len(self.sizes)):
            s = 1.0 / math.sqrt(self.sizes[k - 1])
            sl = self.layout[f"W{k}"]
            theta[sl] = rng.uniform(-s, s, sl.stop - sl.start)
            if self.bias:
                sb = self.layout[f"b{k}"]
                theta[sb] = rng.uniform(-s, s, sb.stop - sb.start)
        return theta

    def forward(self, x, theta, offset=0):
        """Return the output and the per-layer (pre, post) activations."""
        act, _ = _ACTIVATIONS[self.activation]
        layers = self._weights(theta, offset)
        h = np.asarray(x, dtype=float)
        cache = []
        for k, (W, b) in enumerate(layers):
            pre = h @ W.T
            if b is not None:
                pre = pre + b
            if k < len(layers) - 1:
                post = act(pre)
            else:
                post = pre
            cache.append((h, pre, post))
            h = post
        return h, cache

    def apply(self, x, theta, offset=0):
        return self.forward(x, theta, offset)[0]

    def backward(self, theta, cache, w, offset=0, want_params=True):
        """Reverse pass: returns ``(d out/d x)^T w`` and the flat parameter gradient."""
        _, dact = _ACTIVATIONS[self.activation]
        layers = self._weights(theta, offset)
        g = np.asarray(w, dtype=float)
        grad = np.zeros(self.P) if want_params else None
        for k in range(len(layers) - 1, -1, -1):
            W, b = layers[k]
            h_in, pre, post = cache[k]
            if k < len(layers) - 1:
                g = g * dact(post, pre)
            if want_params:
                g2 = g.reshape(-1, g.shape[-1])
                grad[self.layout[f"W{k + 1}"]] = (g2.T @ h_in.reshape(-1, h_in.shape[-1])).ravel()
                if b is not None:
                    grad[self.layout[f"b{k + 1}"]] = g2.sum(axis=0)
            g = g @ W
        return g, grad


class MLPField(VectorField):
    """A square MLP used directly as the vector field, ``f(z) = net(z)``."""

    name = "mlp"

    def __init__(self, net: MLP):
        if net.sizes[0] != net.sizes[-1]:
            raise ValueError("an MLP vector field needs equal input and output sizes")
        self.net = net
        self.d = net.sizes[0]
        self.layout = dict(net.layout)

    def init_params(self, rng):
        return self.net.init_params(rng)

    def _eval(self, z, t, theta):
        return self.net.apply(z, theta)

    def _vjp_state(self, z, t, theta, w):
        _, cache = self.net.forward(z, theta)
        return self.net.backward(theta, cache, w, want_params=False)[0]

    def _vjp_params(self, z, t, theta, w):
        _, cache = self.net.forward(z, theta)
        return self.net.backward(theta, cache, w)[1]

    def vjp(self, z, t, theta, w):
        _, cache = self.net.forward(z, theta)
        gz, gp = self.net.backward(theta, cache, w)
        return _check_finite(gz, "mlp.vjp"), _check_finite(gp, "mlp.vjp")


class DuffingPotentialField(VectorField):
    """Two-particle oscillator whose forces are five scalar networks.

    dq = v,  dv1 = -xi1(q1) - xi3(q1) - xi5(q1 - q2),
             dv2 = -xi2(q2) - xi4(q2) - xi5(q2 - q1).
    """

    name = "duffing-potential"
    d = 4
    # (network index, particle whose coordinate feeds it) for single-particle terms
    _SINGLE = ((0, 0), (1, 1), (2, 0), (3, 1))

    def __init__(self, nets):
        nets = list(nets)
        if len(nets) != 5 or any(n.sizes[0] != 1 or n.sizes[-1] != 1 for n in nets):
            raise ValueError("need five scalar-to-scalar networks")
        self.nets = nets
        entries = [(f"xi{k + 1}", n.P) for k, n in enumerate(nets)]
        self.layout = _layout(*entries)
        self._offsets = [self.layout[f"xi{k + 1}"].start for k in range(5)]

    def init_params(self, rng):
        return np.concatenate([n.init_params(rng) for n in self.nets])

    def _net_inputs(self, z):
        z = np.asarray(z, dtype=float)
        q1, q2 = z[..., 0:1], z[..., 1:2]
        return z, q1, q2, q1 - q2

    def _eval(self, z, t, theta):
        z, q1, q2, dq = self._net_inputs(z)
        q = (q1, q2)
        acc = [np.zeros_like(q1), np.zeros_like(q2)]
        for k, p in self._SINGLE:
            acc[p] = acc[p] - self.nets[k].apply(q[p], theta, self._offsets[k])
        acc[0] = acc[0] - self.nets[4].apply(dq, theta, self._offsets[4])
        acc[1] = acc[1] - self.nets[4].apply(-dq, theta, self._offsets[4])
        return np.concatenate([z[..., 2:4], acc[0], acc[1]], axis=-1)

    def vjp(self, z, t, theta, w):
        z, q1, q2, dq = self._net_inputs(z)
        w = np.asarray(w, dtype=float)
        q = (q1, q2)
        wv = (w[..., 2:3], w[..., 3:4])
        gq = [np.zeros_like(q1), np.zeros_like(q2)]
        gtheta = np.zeros(self.P)
        for k, p in self._SINGLE:
            net, off = self.nets[k], self._offsets[k]
            _, cache = net.forward(q[p], theta, off)
            gx, gp = net.backward(theta, cache, -wv[p], off)
            gq[p] = gq[p] + gx
            gtheta[off: off + net.P] += gp
        net, off = self.nets[4], self._offsets[4]
        _, cache = net.forward(dq, theta, off)
        gx1, gp1 = net.backward(theta, cache, -wv[0], off)
        _, cache = net.forward(-dq, theta, off)
        gx2, gp2 = net.backward(theta, cache, -wv[1], off)
        # d(q1-q2) feeds particle 1, d(q2-q1) feeds particle 2
        gq[0] = gq[0] + gx1 - gx2
        gq[1] = gq[1] - gx1 + gx2
        gtheta[off: off + net.P] += gp1 + gp2
        gz = np.concatenate([gq[0], gq[1], w[..., 0:2]], axis=-1)
        return _check_finite(gz, "duffing-potential.vjp"), _check_finite(gtheta, "duffing-potential.vjp")

    def _vjp_state(self, z, t, theta, w):
        return self.vjp(z, t, theta, w)[0]

    def _vjp_params(self, z, t, theta, w):
        return self.vjp(z, t, theta, w)[1]


class StencilForce(VectorField):
    """Periodic 1-D force ``lap(u) - u`` with the fourth-order five-point Laplacian."""

    name = "stencil-force"
    layout = {}

    def __init__(self, m: int, length: float = 1.0):
        if m < 5:
            raise ValueError("the five-point stencil needs at least 5 mesh points")
        self.d = m
        self.dx = length / m
        self.length = length

    def _lap(self, u):
        u = np.asarray(u, dtype=float)
        r = lambda s: np.roll(u, s, axis=-1)  # noqa: E731
        return (-r(2) + 16 * r(1) - 30 * u + 16 * r(-1) - r(-2)) / (12 * self.dx**2)

    def _eval(self, z, t, theta):
        return self._lap(z) - np.asarray(z, dtype=float)

    def _vjp_state(self, z, t, theta, w):
        # the operator is symmetric
        return self._lap(w) - np.asarray(w, dtype=float)

    def frequency(self, mode: int) -> float:
        """Angular frequency of Fourier mode ``mode`` under the semi-discrete dynamics."""
        th = 2 * math.pi * mode / self.d
        eig = (30 - 32 * math.cos(th) + 2 * math.cos(2 * th)) / (12 * self.dx**2)
        return math.sqrt(1.0 + eig)


class WaveField(VectorField):
    """Semi-discrete second-order system ``du = v, dv = force(u)`` on an M-point mesh."""

    name = "wave"

    def __init__(self, force: VectorField):
        self.force = force
        self.m = force.d
        self.d = 2 * force.d
        self.layout = dict(force.layout)

    def init_params(self, rng):
        return self.force.init_params(rng)

    def _eval(self, z, t, theta):
        z = np.asarray(z, dtype=float)
        m = self.m
        return np.concatenate([z[..., m:], self.force.eval(z[..., :m], t, theta)], axis=-1)

    def vjp(self, z, t, theta, w):
        z, w = np.asarray(z, dtype=float), np.asarray(w, dtype=float)
        m = self.m
        gu, gp = self.force.vjp(z[..., :m], t, theta, w[..., m:])
        return np.concatenate([gu, w[..., :m]], axis=-1), gp

    def _vjp_state(self, z, t, theta, w):
        return self.vjp(z, t, theta, w)[0]

    def _vjp_params(self, z, t, theta, w):
        return self.vjp(z, t, theta, w)[1]


# factories -------------------------------------------------------------------


def make_kepler() -> Kepler:
    return Kepler()


def make_duffing(n: int) -> Duffing:
    return Duffing(n)


def make_mlp_field(layer_sizes, activation="tanh", bias=False) -> MLPField:
    return MLPField(MLP(layer_sizes, activation, bias))


def make_duffing_potential_field(nets=None, hidden=100) -> DuffingPotentialField:
    if nets is None:
        nets = [MLP((1, hidden, hidden, 1), "tanh") for _ in range(5)]
    return DuffingPotentialField(nets)


def make_wave_field(m: int = 20, force: VectorField | None = None, hidden=100) -> WaveField:
    """Wave model on ``m`` mesh points; by default the force is a one-hidden-layer ReLU net."""
    if force is None:
        force = MLPField(MLP((m, hidden, m), "relu", bias=True))
    if force.d != m:
        raise ValueError(f"force acts on {force.d} points, mesh has {m}")
    return WaveField(force)


def make_wave_reference_field(m: int = 20, length: float = 1.0) -> WaveField:
    return WaveField(StencilForce(m, length))


def make_example_ode() -> ExampleODE:
    return ExampleODE()
