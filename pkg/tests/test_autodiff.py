import numpy as np
import pytest

from auxinfer import distributions as D
from auxinfer.autodiff import (
    EvalTrace,
    finite_diff_check,
    grad_auxiliary,
    grad_original,
    unbroadcast,
)
from auxinfer.auxiliary import aux_log_joint, aux_program, sample_epsilon, to_auxiliary
from auxinfer.errors import NonFinite
from auxinfer.experiments import dbn_network
from auxinfer.model import (
    ConditionalSpec,
    ParameterStore,
    VariableDecl,
    build_network,
    log_joint,
    log_joint_program,
)

from conftest import chain_network, random_observed, random_params


def _values_fn(net, values, params, name):
    def f(v):
        val, g = grad_original(net, {**values, name: v}, params)
        return val, g.wrt_values[name]
    return f


def _param_fn_original(net, values, params, name):
    def f(v):
        val, g = grad_original(net, values, params.replace({name: v}))
        return val, g.wrt_params[name]
    return f


def _eps_fn(aux, obs, eps, params, name):
    def f(v):
        val, g = grad_auxiliary(aux, obs, {**eps, name: v}, params)
        return val, g.wrt_values[name]
    return f


def _param_fn_aux(aux, obs, eps, params, name):
    def f(v):
        val, g = grad_auxiliary(aux, obs, eps, params.replace({name: v}))
        return val, g.wrt_params[name]
    return f


class TestOriginal:
    def _root(self):
        net = build_network([VariableDecl("Z", 1, "latent-continuous")],
                            [ConditionalSpec("Z", (), "gaussian-isotropic-prior")])
        return net, ParameterStore({"log_sigma_Z": np.zeros(1)})

    def test_mode(self):
        net, p = self._root()
        _, g = grad_original(net, {"Z": np.zeros((1, 1))}, p)
        assert g.wrt_values["Z"][0, 0] == 0.0

    def test_unit(self):
        net, p = self._root()
        _, g = grad_original(net, {"Z": np.ones((1, 1))}, p)
        assert g.wrt_values["Z"][0, 0] == -1.0

    def test_value_bitwise(self, fig2a, rng):
        params = random_params(fig2a, rng)
        values = {n: rng.normal(size=(4, 1)) for n in fig2a.order}
        value, g = grad_original(fig2a, values, params)
        assert value == log_joint(fig2a, values, params)
        for name in params.names():
            assert g.wrt_params[name].shape == params[name].shape
        for name in fig2a.latent_names:
            assert g.wrt_values[name].shape == values[name].shape

    def test_finite_differences(self, fig2a, rng):
        for _ in range(10):
            params = random_params(fig2a, rng)
            values = {n: rng.normal(size=(3, 1)) for n in fig2a.order}
            for name in fig2a.latent_names:
                assert finite_diff_check(_values_fn(fig2a, values, params, name), values[name]) < 1e-5
            for name in params.names():
                assert finite_diff_check(_param_fn_original(fig2a, values, params, name), params[name]) < 1e-5

    def test_bernoulli_observation(self, rng):
        net = chain_network(2, latent_dim=3, obs_dim=5, obs_family="bernoulli-affine-sigmoid")
        params = random_params(net, rng)
        values = {**random_observed(net, rng, 4), **{n: rng.normal(size=(4, 3)) for n in net.latent_names}}
        for name in net.latent_names:
            assert finite_diff_check(_values_fn(net, values, params, name), values[name]) < 1e-5
        for name in params.names():
            assert finite_diff_check(_param_fn_original(net, values, params, name), params[name]) < 1e-5

    def test_non_finite(self):
        net, _ = self._root()
        with pytest.raises(NonFinite):
            grad_original(net, {"Z": np.ones((1, 1))}, ParameterStore({"log_sigma_Z": np.array([-800.0])}))

    def test_deterministic(self, fig2a, rng):
        params = random_params(fig2a, rng)
        values = {n: rng.normal(size=(4, 1)) for n in fig2a.order}
        _, a = grad_original(fig2a, values, params)
        _, b = grad_original(fig2a, values, params)
        for k in a.wrt_params:
            assert np.array_equal(a.wrt_params[k], b.wrt_params[k])


class TestAuxiliary:
    def test_value_bitwise(self, fig2a, rng):
        params = random_params(fig2a, rng)
        aux = to_auxiliary(fig2a)
        obs = random_observed(fig2a, rng, 4)
        eps = sample_epsilon(aux, 4, rng)
        value, _ = grad_auxiliary(aux, obs, eps, params)
        assert value == aux_log_joint(aux, obs, eps, params)

    def test_no_latents_matches_original(self, rng):
        net = build_network([VariableDecl("X", 3), VariableDecl("Y", 2)],
                            [ConditionalSpec("X", (), "gaussian-isotropic-prior"), ConditionalSpec("Y", ("X",))])
        params = random_params(net, rng)
        obs = random_observed(net, rng, 4)
        _, ga = grad_auxiliary(to_auxiliary(net), obs, {}, params)
        _, go = grad_original(net, obs, params)
        for k in params.names():
            assert np.array_equal(ga.wrt_params[k], go.wrt_params[k])

    def test_cross_term_depth3(self, fig2a, rng):
        params = random_params(fig2a, rng, scale=1.0)
        aux = to_auxiliary(fig2a)
        obs = random_observed(fig2a, rng, 1)
        eps = sample_epsilon(aux, 1, rng)
        _, g0 = grad_auxiliary(aux, obs, eps, params)
        moved = {**obs, "X3": obs["X3"] + 1.0}
        _, g1 = grad_auxiliary(aux, moved, eps, params)
        diff = g1.wrt_values["eps_Z1"] - g0.wrt_values["eps_Z1"]
        assert np.abs(diff).max() > 1e-6
        # the finite-difference oracle sees the same change
        h = 1e-6
        def fd(o):
            up = aux_log_joint(aux, o, {**eps, "eps_Z1": eps["eps_Z1"] + h}, params)
            dn = aux_log_joint(aux, o, {**eps, "eps_Z1": eps["eps_Z1"] - h}, params)
            return (up - dn) / (2 * h)
        assert fd(moved) - fd(obs) == pytest.approx(diff[0, 0], rel=1e-5)

    def test_unit_location_scale_identity(self, rng):
        net = chain_network(3, latent_dim=2, obs_dim=2)
        params = random_params(net, rng)
        zeros = {n: np.zeros_like(params[n]) for n in params.names() if n.startswith(("W_Z", "b_Z", "log_sigma_Z"))}
        params = params.replace(zeros)
        aux = to_auxiliary(net)
        obs = random_observed(net, rng, 3)
        eps = sample_epsilon(aux, 3, rng)
        _, ga = grad_auxiliary(aux, obs, eps, params)
        z = {n: eps["eps_" + n] for n in net.latent_names}
        _, go = grad_original(net, {**obs, **z}, params)
        for name in net.latent_names:
            g_eps = ga.wrt_values["eps_" + name]
            assert np.allclose(g_eps, go.wrt_values[name], atol=1e-12)
            # observation part of the original gradient, minus the unit prior term
            obs_part = go.wrt_values[name] + z[name]
            assert np.allclose(g_eps, obs_part - eps["eps_" + name], atol=1e-12)

    @pytest.mark.parametrize("generator", ["location-scale", "inverse-cdf"])
    @pytest.mark.parametrize("obs_family", ["gaussian-affine-tanh", "gaussian-affine-sigmoid",
                                            "bernoulli-affine-sigmoid"])
    def test_finite_differences(self, generator, obs_family, rng):
        net = chain_network(3, latent_dim=2, obs_dim=3, family="gaussian-affine-sigmoid",
                            obs_family=obs_family, generator=generator)
        aux = to_auxiliary(net)
        for _ in range(5):
            params = random_params(net, rng)
            obs = random_observed(net, rng, 3)
            eps = sample_epsilon(aux, 3, rng)
            if generator == "inverse-cdf":
                eps = {k: np.clip(v, 0.02, 0.98) for k, v in eps.items()}
            for name in aux.aux_names:
                assert finite_diff_check(_eps_fn(aux, obs, eps, params, name), eps[name], h=1e-6) < 1e-4
            for name in params.names():
                assert finite_diff_check(_param_fn_aux(aux, obs, eps, params, name), params[name]) < 1e-4

    def test_dbn_full_parameter_gradient(self, rng):
        net = dbn_network()
        params = random_params(net, rng, scale=0.3)
        aux = to_auxiliary(net)
        obs = random_observed(net, rng, 3)
        eps = sample_epsilon(aux, 3, rng)
        flat = params.flatten()

        def f(v):
            p = params.unflatten(v)
            val, g = grad_auxiliary(aux, obs, eps, p)
            return val, np.concatenate([g.wrt_params[n].ravel() for n in p.names()])
        assert finite_diff_check(f, flat) <= 1e-4

    @pytest.mark.parametrize("depth", [2, 3, 4, 5, 6])
    def test_non_locality(self, depth, rng):
        net = chain_network(depth, latent_dim=2, obs_dim=2, observe_all=False)
        params = random_params(net, rng, scale=1.0)
        aux = to_auxiliary(net)
        obs = random_observed(net, rng, 2)
        eps = sample_epsilon(aux, 2, rng)
        leaf = f"X{depth}"
        moved = {**obs, leaf: obs[leaf] + 0.5}
        _, a = grad_auxiliary(aux, obs, eps, params)
        _, b = grad_auxiliary(aux, moved, eps, params)
        assert np.linalg.norm(a.wrt_values["eps_Z1"] - b.wrt_values["eps_Z1"]) > 0
        z = {n: rng.normal(size=(2, 2)) for n in net.latent_names}
        _, c = grad_original(net, {**obs, **z}, params)
        _, d = grad_original(net, {**moved, **z}, params)
        if depth > 1:
            assert np.array_equal(c.wrt_values["Z1"], d.wrt_values["Z1"])


class TestTrace:
    def test_replay_matches_plain_path(self, fig2a, rng):
        params = random_params(fig2a, rng)
        values = {n: rng.normal(size=(4, 1)) for n in fig2a.order}
        trace = EvalTrace()
        total, _, _, _ = log_joint_program(trace, fig2a, values, params)
        assert trace.replay() == trace.value(total) == log_joint(fig2a, values, params)

    def test_replay_auxiliary(self, rng):
        net = chain_network(3, latent_dim=2, generator="inverse-cdf")
        params = random_params(net, rng)
        aux = to_auxiliary(net)
        obs = random_observed(net, rng, 3)
        eps = sample_epsilon(aux, 3, rng)
        trace = EvalTrace()
        total, *_ = aux_program(trace, aux, obs, eps, params)
        assert trace.replay() == trace.value(total) == aux_log_joint(aux, obs, eps, params)

    def test_unbroadcast(self):
        g = np.ones((4, 3))
        assert np.array_equal(unbroadcast(g, (3,)), np.full(3, 4.0))
        assert np.array_equal(unbroadcast(g, (1, 3)), np.full((1, 3), 4.0))
        assert np.array_equal(unbroadcast(g, (4, 1)), np.full((4, 1), 3.0))
        assert unbroadcast(g, (4, 3)) is g


class TestFiniteDiffCheck:
    def test_quadratic(self, rng):
        A = rng.normal(size=(4, 4))
        A = A @ A.T
        f = lambda x: (-0.5 * x @ A @ x, -A @ x)  # noqa: E731
        assert finite_diff_check(f, rng.normal(size=4)) <= 1e-10

    def test_gaussian_logpdf(self, rng):
        mu, sigma = rng.normal(size=3), np.exp(rng.normal(size=3))
        p = D.GaussianParams(mu, sigma)
        f = lambda x: (D.gaussian_logpdf(x, p), D.gaussian_logpdf_grad(x, p)[0])  # noqa: E731
        assert finite_diff_check(f, rng.normal(size=3)) <= 1e-6

    def test_detects_wrong_gradient(self):
        f = lambda x: (float(np.sum(x ** 2)), 3 * x)  # noqa: E731
        assert finite_diff_check(f, np.ones(2)) == pytest.approx(1.0 / 3.0, rel=1e-6)
