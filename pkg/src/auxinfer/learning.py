"""Outer learning loops: Monte Carlo EM, joint MAP ascent and full-Bayes HMC.

Each loop runs in either the original form (state ``z``) or the auxiliary
form (state ``eps``).  Whatever the form, the recorded objective is the
original-form ``log p(x, z | theta) + log p(theta)`` evaluated at the
current latents (``zt(eps)`` in auxiliary form), so traces of the two forms
are directly comparable.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from .autodiff import grad_auxiliary, grad_original
from .auxiliary import aux_log_joint, generate_latents, log_jacobian, sample_epsilon, to_auxiliary
from .errors import ConfigError, NonFinite
from .inference import AdagradState, HmcConfig, adagrad_update, hmc_step, init_chain
from .model import BayesNet, ParameterStore, init_params, log_joint

FORMS = ("original", "auxiliary")
ALGORITHMS = ("mcem", "joint-map", "full-bayes")
CHAIN_MODES = ("rows", "joint")
TRACE_HEADER = ("iter", "wall_s", "log_joint", "accept_rate", "grad_norm_latent", "grad_norm_param")


class ConsistencyError(AssertionError):
    """The auxiliary and original objectives drifted apart during a run."""


class LearningAborted(NonFinite):
    """A non-finite value stopped a run; carries what was computed so far."""

    def __init__(self, message, trace, params):
        super().__init__(message)
        self.trace = trace
        self.params = params


@dataclass(frozen=True)
class LearnConfig:
    form: str = "auxiliary"
    algorithm: str = "mcem"
    outer_iterations: int = 100
    hmc: HmcConfig = HmcConfig()
    learning_rate: float = 0.1
    adagrad_delta: float = 1e-8
    m_steps_per_iter: int = 5
    seed: int = 0
    init_std: float = 0.1
    chains: str = "joint"
    frozen: tuple = ()
    burn_in: int = 0
    thin: int = 1
    check_every: int = 100

    def __post_init__(self):
        if self.form not in FORMS:
            raise ConfigError(f"form must be one of {FORMS}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.chains not in CHAIN_MODES:
            raise ConfigError(f"chains must be one of {CHAIN_MODES}")
        if self.outer_iterations < 1:
            raise ConfigError("outer_iterations must be at least 1")
        if self.m_steps_per_iter < 1:
            raise ConfigError("m_steps_per_iter must be at least 1")
        if self.thin < 1 or self.burn_in < 0:
            raise ConfigError("thin must be >= 1 and burn_in >= 0")
        if isinstance(self.hmc, Mapping):
            object.__setattr__(self, "hmc", HmcConfig(**self.hmc))
        object.__setattr__(self, "frozen", tuple(self.frozen))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LearnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown LearnConfig keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TraceRecord:
    iter: int
    wall_s: float
    log_joint: float
    accept_rate: float
    grad_norm_latent: float
    grad_norm_param: float

    def csv_row(self):
        return [str(self.iter), f"{self.wall_s:.6f}", repr(self.log_joint), repr(self.accept_rate),
                repr(self.grad_norm_latent), repr(self.grad_norm_param)]


@dataclass
class ConvergenceTrace:
    """Per-iteration records, optionally streamed to a CSV file as they arrive."""

    records: list = field(default_factory=list)
    path: str | None = None

    def __post_init__(self):
        self._fh = None
        if self.path is not None:
            self._fh = open(self.path, "w", newline="")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(TRACE_HEADER)
            self._fh.flush()

    def append(self, rec: TraceRecord):
        if self.records:
            last = self.records[-1]
            if rec.iter <= last.iter or rec.wall_s < last.wall_s:
                raise ValueError("trace iterations must increase and times must not decrease")
        self.records.append(rec)
        if self._fh is not None:
            self._writer.writerow(rec.csv_row())
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __len__(self):
        return len(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def objective(self) -> np.ndarray:
        return self.column("log_joint")


def write_trace_csv(trace: ConvergenceTrace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in trace.records:
            w.writerow(r.csv_row())


def read_trace_csv(path) -> ConvergenceTrace:
    trace = ConvergenceTrace()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            trace.records.append(TraceRecord(int(row["iter"]), float(row["wall_s"]),
                                             float(row["log_joint"]), float(row["accept_rate"]),
                                             float(row["grad_norm_latent"]),
                                             float(row["grad_norm_param"])))
    return trace


def _norm(arrays) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays))


class Problem:
    """The latent state and densities of one network/dataset pair in one form.

    Latent state is a dict keyed by latent names (original form) or noise
    names (auxiliary form); :meth:`pack`/:meth:`unpack` map it to an
    ``(M, total_dim)`` matrix whose rows are datapoints.
    """

    def __init__(self, net: BayesNet, data: Mapping[str, np.ndarray], form: str,
                 generators: Mapping[str, str] | None = None):
        if form not in FORMS:
            raise ConfigError(f"form must be one of {FORMS}")
        self.net = net
        self.form = form
        self.data = {n: np.asarray(data[n], dtype=float) for n in net.observed_names}
        self.M = next(iter(self.data.values())).shape[0] if self.data else 0
        self.auxnet = to_auxiliary(net, generators)
        if form == "original":
            self.keys = net.latent_names
        else:
            self.keys = self.auxnet.aux_names
        self._dims = [net.dim(k) if form == "original" else self.auxnet.variables[k].dim
                      for k in self.keys]
        self.location_scale_only = all(g.kind == "location-scale"
                                       for g, _ in self.auxnet.det_nodes.values())

    # ----------------------------------------------------------- packing

    def pack(self, latents) -> np.ndarray:
        if not self.keys:
            return np.zeros((self.M, 0))
        return np.concatenate([latents[k] for k in self.keys], axis=1)

    def unpack(self, matrix) -> dict:
        out, i = {}, 0
        for k, d in zip(self.keys, self._dims):
            out[k] = matrix[:, i:i + d]
            i += d
        return out

    # ------------------------------------------------------------ states

    def init_state(self, params: ParameterStore, rng: np.random.Generator) -> dict:
        """Prior draw of the latent state; both forms map to the same ``z``."""
        eps = sample_epsilon(self.auxnet, self.M, rng)
        if self.form == "auxiliary":
            return eps
        return generate_latents(self.auxnet, self.data, eps, params)

    def latents(self, state, params) -> dict:
        """Original-form latent values ``z`` for a state of either form."""
        if self.form == "original":
            return dict(state)
        return generate_latents(self.auxnet, self.data, state, params)

    def grad(self, state, params):
        """Form-specific log-density (without the parameter prior) and its gradient."""
        if self.form == "original":
            return grad_original(self.net, {**self.data, **state}, params)
        return grad_auxiliary(self.auxnet, self.data, state, params)

    def objective(self, state, params) -> float:
        """``log p(x, z | theta) + log p(theta)`` with ``z`` taken from the state."""
        z = self.latents(state, params)
        return log_joint(self.net, {**self.data, **z}, params) + params.log_prior()

    def check_equivalence(self, state, params, tol=1e-6):
        """Verify ``log p(x, eps) - log p(x, zt) == M * sum log sigma`` (location-scale only)."""
        if self.form != "auxiliary" or not self.location_scale_only:
            return
        aux = aux_log_joint(self.auxnet, self.data, state, params)
        orig = log_joint(self.net, {**self.data, **self.latents(state, params)}, params)
        expected = log_jacobian(self.auxnet, params, self.M)
        gap = aux - orig - expected
        if abs(gap) > tol * max(1.0, abs(aux)):
            raise ConsistencyError(f"auxiliary/original objectives differ by {gap!r} beyond log|J|")

    def hmc_target(self, params, per_row: bool):
        def fn(position):
            value, g = self.grad(self.unpack(position), params)
            grad = self.pack(g.wrt_values)
            return (g.rows if per_row else value), grad
        return fn


def _split_rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _initial(problem: Problem, config: LearnConfig, init_params_store, init_state):
    init_rng, state_rng, run_rng = _split_rngs(config.seed, 3)
    params = init_params_store
    if params is None:
        params = init_params(problem.net, init_rng, config.init_std)
    state = init_state
    if state is None:
        state = problem.init_state(params, state_rng)
    return params, {k: np.array(v, dtype=float) for k, v in state.items()}, run_rng


def _learnable(params: ParameterStore, config: LearnConfig):
    return [n for n in params.names() if n not in config.frozen]


def _param_grad(g, params, names):
    prior = params.log_prior_grad()
    return {n: g.wrt_params[n] + prior[n] for n in names}


def _prepare_trace(trace_path):
    return ConvergenceTrace(path=str(trace_path) if trace_path is not None else None)


def _abort(trace, params, k, exc):
    trace.close()
    raise LearningAborted(f"non-finite value at iteration {k}: {exc}", trace, params) from exc


def mcem_fit(net: BayesNet, data, config: LearnConfig, rng=None, *, init_params_store=None,
             init_state=None, trace_path=None, generators=None, m_step_monitor=None):
    """Monte Carlo EM: one HMC E-step then ``m_steps_per_iter`` Adagrad M-steps per iteration.

    Returns ``(params, trace, state)``.  ``rng`` is accepted for interface
    symmetry; all randomness derives from ``config.seed``.
    ``m_step_monitor(k, values)``, if given, receives the ascended objective
    before and after every M-step of iteration ``k``.
    """
    if config.algorithm != "mcem":
        raise ConfigError("mcem_fit needs algorithm='mcem'")
    problem = Problem(net, data, config.form, generators)
    params, state, run_rng = _initial(problem, config, init_params_store, init_state)
    names = _learnable(params, config)
    per_row = config.chains == "rows"
    ada = AdagradState(config.learning_rate, config.adagrad_delta)
    trace = _prepare_trace(trace_path)
    start = time.perf_counter()
    chain = None
    pgrad_norm = 0.0
    try:
        for k in range(config.outer_iterations):
            target = problem.hmc_target(params, per_row)
            position = problem.pack(state)
            if chain is None:
                chain = init_chain(position, target)
            else:
                prev = chain
                chain = init_chain(position, target)
                chain.accepted, chain.proposed = prev.accepted, prev.proposed
            chain, _ = hmc_step(chain, target, config.hmc, run_rng)
            state = problem.unpack(chain.position)
            latent_norm = float(np.sqrt(np.sum(chain.grad ** 2)))

            if names:
                block = []
                for _ in range(config.m_steps_per_iter):
                    value, g = problem.grad(state, params)
                    block.append(value + params.log_prior())
                    pg = _param_grad(g, params, names)
                    ada, new = adagrad_update(ada, params.entries, pg)
                    params = params.replace({n: new[n] for n in names})
                pgrad_norm = _norm(pg.values())
                if m_step_monitor is not None:
                    value, _ = problem.grad(state, params)
                    m_step_monitor(k, block + [value + params.log_prior()])

            objective = problem.objective(state, params)
            if not math.isfinite(objective):
                raise NonFinite("objective is not finite")
            if config.check_every and (k + 1) % config.check_every == 0:
                problem.check_equivalence(state, params)
            trace.append(TraceRecord(k, time.perf_counter() - start, objective,
                                     chain.acceptance_rate, latent_norm, pgrad_norm))
    except NonFinite as exc:
        _abort(trace, params, k, exc)
    trace.close()
    return params, trace, state


def joint_map_fit(net: BayesNet, data, config: LearnConfig, rng=None, *, init_params_store=None,
                  init_state=None, trace_path=None, generators=None):
    """Simultaneous Adagrad ascent on parameters and latent state.

    The ascended function is the form's log-density plus the parameter
    prior.  Returns ``(params, latents, trace)`` with ``latents`` in the
    original parameterization.
    """
    if config.algorithm != "joint-map":
        raise ConfigError("joint_map_fit needs algorithm='joint-map'")
    problem = Problem(net, data, config.form, generators)
    params, state, _ = _initial(problem, config, init_params_store, init_state)
    names = _learnable(params, config)
    ada = AdagradState(config.learning_rate, config.adagrad_delta)
    trace = _prepare_trace(trace_path)
    start = time.perf_counter()
    try:
        for k in range(config.outer_iterations):
            objective = problem.objective(state, params)
            _, g = problem.grad(state, params)
            pg = _param_grad(g, params, names)
            combined = {("p", n): params[n] for n in names}
            combined.update({("z", n): state[n] for n in problem.keys})
            grads = {("p", n): pg[n] for n in names}
            grads.update({("z", n): g.wrt_values[n] for n in problem.keys})
            ada, new = adagrad_update(ada, combined, grads)
            params = params.replace({n: new[("p", n)] for n in names})
            state = {n: new[("z", n)] for n in problem.keys}
            if config.check_every and (k + 1) % config.check_every == 0:
                problem.check_equivalence(state, params)
            trace.append(TraceRecord(k, time.perf_counter() - start, objective, 0.0,
                                     _norm(g.wrt_values.values()), _norm(pg.values())))
    except NonFinite as exc:
        _abort(trace, params, k, exc)
    trace.close()
    return params, problem.latents(state, params), trace


def full_bayes_sample(net: BayesNet, data, config: LearnConfig, rng=None, *, init_params_store=None,
                      init_state=None, trace_path=None, generators=None):
    """HMC over the concatenated (parameters, latent state) vector.

    Every ``thin``-th sample after ``burn_in`` iterations is kept; only the
    parameter part is returned, as a list of :class:`ParameterStore`.
    """
    if config.algorithm != "full-bayes":
        raise ConfigError("full_bayes_sample needs algorithm='full-bayes'")
    problem = Problem(net, data, config.form, generators)
    params, state, run_rng = _initial(problem, config, init_params_store, init_state)
    names = _learnable(params, config)
    n_theta = params.flatten(names).size
    latent_shape = problem.pack(state).shape

    def split(position):
        theta = params.unflatten(position[:n_theta], names)
        return theta, problem.unpack(position[n_theta:].reshape(latent_shape))

    def target(position):
        theta, st = split(position)
        value, g = problem.grad(st, theta)
        pg = _param_grad(g, theta, names)
        grad = np.concatenate([np.concatenate([pg[n].ravel() for n in names]) if names
                               else np.zeros(0), problem.pack(g.wrt_values).ravel()])
        return value + theta.log_prior(), grad

    chain = init_chain(np.concatenate([params.flatten(names), problem.pack(state).ravel()]), target)
    samples = []
    trace = _prepare_trace(trace_path)
    start = time.perf_counter()
    try:
        for k in range(config.outer_iterations):
            chain, _ = hmc_step(chain, target, config.hmc, run_rng)
            theta, st = split(chain.position)
            if k >= config.burn_in and (k - config.burn_in) % config.thin == 0:
                samples.append(theta)
            grad_theta = chain.grad[:n_theta]
            trace.append(TraceRecord(k, time.perf_counter() - start, problem.objective(st, theta),
                                     chain.acceptance_rate, _norm([chain.grad[n_theta:]]),
                                     _norm([grad_theta])))
    except NonFinite as exc:
        _abort(trace, params, k, exc)
    trace.close()
    return samples, trace


def fit(net: BayesNet, data, config: LearnConfig, **kwargs):
    """Dispatch on ``config.algorithm``; returns ``(params_or_samples, trace)``."""
    if config.algorithm == "mcem":
        params, trace, _ = mcem_fit(net, data, config, **kwargs)
        return params, trace
    if config.algorithm == "joint-map":
        params, _, trace = joint_map_fit(net, data, config, **kwargs)
        return params, trace
    return full_bayes_sample(net, data, config, **kwargs)
