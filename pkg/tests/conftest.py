import numpy as np
import pytest

from auxinfer.model import ConditionalSpec, ParameterStore, VariableDecl, build_network


def chain_network(depth=3, latent_dim=1, obs_dim=1, family="gaussian-affine-tanh",
                  obs_family=None, generator="location-scale", observe_all=True):
    """``Z1 -> ... -> Zdepth`` with ``Xi | Zi`` (or only the leaf observation)."""
    obs_family = obs_family or family
    variables, conds = [], []
    for i in range(1, depth + 1):
        variables.append(VariableDecl(f"Z{i}", latent_dim, "latent-continuous"))
        if i == 1:
            conds.append(ConditionalSpec("Z1", (), "gaussian-isotropic-prior", generator=generator))
        else:
            conds.append(ConditionalSpec(f"Z{i}", (f"Z{i-1}",), family, generator=generator))
    leaves = range(1, depth + 1) if observe_all else [depth]
    for i in leaves:
        variables.append(VariableDecl(f"X{i}", obs_dim, "observed"))
        conds.append(ConditionalSpec(f"X{i}", (f"Z{i}",), obs_family))
    return build_network(variables, conds)


def random_params(net, rng, scale=0.5):
    return ParameterStore({n: scale * rng.standard_normal(s) for n, s in net.param_shapes.items()})


def random_observed(net, rng, M):
    out = {}
    for n in net.observed_names:
        spec = net.conditionals[n]
        if spec.likelihood == "bernoulli":
            out[n] = (rng.random((M, net.dim(n))) < 0.5).astype(float)
        else:
            out[n] = rng.standard_normal((M, net.dim(n)))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def fig2a():
    """Three-latent chain with one observation per latent."""
    return chain_network(3)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record one ``criterion: PASS/FAIL detail`` line for the terminal summary."""
    def record(number, ok, detail):
        ACCEPTANCE_LINES.append((number, f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
