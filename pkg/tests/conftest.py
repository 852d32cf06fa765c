import numpy as np
import pytest

from revode.dynamics import (
    LinearField,
    make_duffing,
    make_duffing_potential_field,
    make_example_ode,
    make_kepler,
    make_mlp_field,
    make_wave_field,
    make_wave_reference_field,
)


def _kepler_state(rng, batch=None):
    shape = (4,) if batch is None else (batch, 4)
    z = rng.uniform(-1.0, 1.0, shape)
    q = z[..., :2]
    # keep the orbit well away from the pole
    z[..., :2] = q / np.linalg.norm(q, axis=-1, keepdims=True) * rng.uniform(0.5, 1.5, shape[:-1] + (1,))
    return z


def _generic(d):
    def sample(rng, batch=None):
        shape = (d,) if batch is None else (batch, d)
        return rng.uniform(-1.0, 1.0, shape)
    return sample


def _field_cases():
    """(name, field, theta sampler, state sampler) for every built-in field."""
    cases = []
    f = make_example_ode()
    cases.append(("example-ode", f, lambda rng: np.zeros(0), _generic(1)))
    f = make_kepler()
    cases.append(("kepler", f, lambda rng: rng.uniform(0.5, 1.0, 1), _kepler_state))
    for n in (1, 2, 4):
        f = make_duffing(n)
        cases.append((f"duffing{n}", f, (lambda f: lambda rng: rng.uniform(0.0, 2.0, f.P))(f), _generic(2 * n)))
    f = make_mlp_field((3, 10, 3), "tanh")
    cases.append(("mlp-tanh", f, f.init_params, _generic(3)))
    f = make_mlp_field((3, 10, 3), "relu", bias=True)
    cases.append(("mlp-relu", f, f.init_params, _generic(3)))
    f = make_duffing_potential_field(hidden=6)
    cases.append(("duffing-potential", f, f.init_params, _generic(4)))
    f = make_wave_field(6, hidden=8)
    cases.append(("wave-mlp", f, f.init_params, _generic(12)))
    f = make_wave_reference_field(8)
    cases.append(("wave-stencil", f, lambda rng: np.zeros(0), _generic(16)))
    A = np.array([[0.0, 1.0], [-1.0, -0.1]])
    f = LinearField(A)
    cases.append(("linear", f, lambda rng: np.zeros(0), _generic(2)))
    return cases


FIELD_CASES = _field_cases()


@pytest.fixture(params=FIELD_CASES, ids=[c[0] for c in FIELD_CASES])
def field_case(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
