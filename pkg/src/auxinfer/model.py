"""Bayesian networks over vector-valued variables.

A network is a DAG of :class:`VariableDecl` nodes, each owning exactly one
:class:`ConditionalSpec` factor drawn from a closed set of families.  Values
for ``M`` datapoints are stored as ``(M, dim)`` matrices keyed by variable
name, and parameters live in a :class:`ParameterStore` whose entries may be
shared by several factors (as in a time-homogeneous DBN).

The joint log-density is written once, against a tiny "ops" interface
(:class:`NumpyOps` here, :class:`auxinfer.autodiff.EvalTrace` for gradients),
so the plain and the differentiated evaluations run the same arithmetic.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Mapping

import numpy as np

from . import distributions as D
from .errors import (
    CycleError,
    DuplicateName,
    ModelError,
    NonFinite,
    ShapeError,
    UnknownVariable,
    UnsupportedFamily,
)

KINDS = ("observed", "latent-continuous", "latent-deterministic", "auxiliary-root")

# family -> (likelihood, nonlinearity of the mean; None means zero mean)
FAMILIES = {
    "gaussian-affine-tanh": ("gaussian", "tanh"),
    "gaussian-affine-sigmoid": ("gaussian", "sigmoid"),
    "gaussian-affine-linear": ("gaussian", "none"),
    "bernoulli-affine-sigmoid": ("bernoulli", "sigmoid"),
    "gaussian-isotropic-prior": ("gaussian", None),
}
GENERATORS = ("location-scale", "inverse-cdf")
DEFAULT_PRIOR_VARIANCE = 0.01


@dataclass(frozen=True)
class VariableDecl:
    name: str
    dim: int
    kind: str = "observed"

    def __post_init__(self):
        if not isinstance(self.dim, (int, np.integer)) or self.dim < 1:
            raise ShapeError(f"variable {self.name!r}: dim must be a positive integer")
        if self.kind not in KINDS:
            raise ModelError(f"variable {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class ConditionalSpec:
    """One factor ``p(child | parents; theta)``.

    ``weights`` names one parameter matrix per parent (same order as
    ``parents``).  Unnamed parameters get default names derived from the
    child, so two specs share a tensor only when they name it explicitly.
    """

    child: str
    parents: tuple = ()
    family: str = "gaussian-affine-tanh"
    weights: tuple = ()
    bias: str | None = None
    log_sigma: str | None = None
    generator: str = "location-scale"

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(self.parents))
        if self.family not in FAMILIES:
            raise ModelError(f"{self.child}: unknown family {self.family!r}")
        if self.generator not in GENERATORS:
            raise ModelError(f"{self.child}: unknown generator {self.generator!r}")
        if len(set(self.parents)) != len(self.parents):
            raise DuplicateName(f"{self.child}: repeated parent")
        likelihood, nonlin = FAMILIES[self.family]
        if nonlin is None:
            if self.parents:
                raise ModelError(f"{self.child}: {self.family} takes no parents")
            object.__setattr__(self, "weights", ())
            object.__setattr__(self, "bias", None)
        else:
            weights = tuple(self.weights) or tuple(f"W_{self.child}_{p}" for p in self.parents)
            if len(weights) != len(self.parents):
                raise ModelError(f"{self.child}: need one weight name per parent")
            object.__setattr__(self, "weights", weights)
            object.__setattr__(self, "bias", self.bias or f"b_{self.child}")
        if likelihood == "gaussian":
            object.__setattr__(self, "log_sigma", self.log_sigma or f"log_sigma_{self.child}")
        else:
            object.__setattr__(self, "log_sigma", None)

    @property
    def likelihood(self) -> str:
        return FAMILIES[self.family][0]

    @property
    def nonlinearity(self):
        return FAMILIES[self.family][1]

    def param_names(self):
        names = list(self.weights)
        if self.bias:
            names.append(self.bias)
        if self.log_sigma:
            names.append(self.log_sigma)
        return names


class BayesNet:
    """Validated network; construct through :func:`build_network`."""

    def __init__(self, variables, conditionals, order, param_shapes):
        self.variables = variables
        self.conditionals = conditionals
        self.order = order
        self.param_shapes = param_shapes
        self._children = {name: [] for name in variables}
        for name in order:
            for p in conditionals[name].parents:
                self._children[p].append(name)

    def __repr__(self):
        return f"BayesNet(order={list(self.order)})"

    def __contains__(self, name):
        return name in self.variables

    def _require(self, name):
        if name not in self.variables:
            raise UnknownVariable(f"unknown variable {name!r}")

    def parents(self, name):
        self._require(name)
        return self.conditionals[name].parents

    def children(self, name):
        self._require(name)
        return tuple(self._children[name])

    def dim(self, name) -> int:
        self._require(name)
        return self.variables[name].dim

    def names_of_kind(self, kind):
        return tuple(n for n in self.order if self.variables[n].kind == kind)

    @property
    def latent_names(self):
        return self.names_of_kind("latent-continuous")

    @property
    def observed_names(self):
        return self.names_of_kind("observed")

    def check_params(self, params: "ParameterStore"):
        for name, shape in self.param_shapes.items():
            if name not in params.entries:
                raise ShapeError(f"missing parameter {name!r}")
            if params.entries[name].shape != shape:
                raise ShapeError(
                    f"parameter {name!r} has shape {params.entries[name].shape}, expected {shape}")


def _topological_order(variables, conditionals):
    rank = {name: i for i, name in enumerate(variables)}
    indegree = {name: len(conditionals[name].parents) for name in variables}
    children = {name: [] for name in variables}
    for name in variables:
        for p in conditionals[name].parents:
            children[p].append(name)
    ready = [(rank[n], n) for n in variables if indegree[n] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, name = heapq.heappop(ready)
        order.append(name)
        for c in children[name]:
            indegree[c] -= 1
            if indegree[c] == 0:
                heapq.heappush(ready, (rank[c], c))
    if len(order) != len(variables):
        raise CycleError(n for n in variables if indegree[n] > 0)
    return tuple(order)


def build_network(variables: Iterable[VariableDecl], conditionals: Iterable[ConditionalSpec]) -> BayesNet:
    """Validate a variable/conditional list and return a :class:`BayesNet`.

    Raises :class:`DuplicateName`, :class:`ModelError`, :class:`CycleError`
    or :class:`ShapeError` (two factors disagreeing on a shared tensor).
    """
    var_map = {}
    for v in variables:
        if v.name in var_map:
            raise DuplicateName(f"variable {v.name!r} declared twice")
        var_map[v.name] = v
    cond_map = {}
    for c in conditionals:
        if c.child not in var_map:
            raise UnknownVariable(f"conditional for undeclared variable {c.child!r}")
        if c.child in cond_map:
            raise DuplicateName(f"variable {c.child!r} has two conditionals")
        for p in c.parents:
            if p not in var_map:
                raise UnknownVariable(f"{c.child}: unknown parent {p!r}")
        cond_map[c.child] = c
    missing = [n for n in var_map if n not in cond_map]
    if missing:
        raise ModelError(f"variables without a conditional: {missing}")

    for c in cond_map.values():
        kind = var_map[c.child].kind
        if kind in ("latent-deterministic", "auxiliary-root"):
            raise ModelError(f"{c.child}: kind {kind!r} is reserved for auxiliary networks")
        if c.likelihood == "bernoulli" and kind != "observed":
            raise UnsupportedFamily(f"{c.child}: Bernoulli factors are only allowed on observed variables")

    order = _topological_order(var_map, cond_map)

    shapes: dict[str, tuple] = {}

    def claim(name, shape):
        if shapes.setdefault(name, shape) != shape:
            raise ShapeError(f"parameter {name!r} used with shapes {shapes[name]} and {shape}")

    for child in order:
        c = cond_map[child]
        d = var_map[child].dim
        for w, p in zip(c.weights, c.parents):
            claim(w, (d, var_map[p].dim))
        if c.bias:
            claim(c.bias, (d,))
        if c.log_sigma:
            claim(c.log_sigma, (d,))
    ordered_vars = {n: var_map[n] for n in var_map}
    return BayesNet(ordered_vars, cond_map, order, shapes)


# ------------------------------------------------------------------ params


@dataclass
class ParameterStore:
    """Named parameter tensors with independent zero-mean Gaussian priors.

    Scales are stored as ``log sigma``; their prior is Gaussian on the log.
    Treat instances as immutable and use :meth:`replace` for updates.
    """

    entries: dict
    prior_variance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = {k: np.asarray(v, dtype=float) for k, v in self.entries.items()}
        for k, v in self.entries.items():
            if not np.all(np.isfinite(v)):
                raise NonFinite(f"parameter {k!r} is not finite")
        self.prior_variance = {k: float(self.prior_variance.get(k, DEFAULT_PRIOR_VARIANCE))
                               for k in self.entries}

    def __getitem__(self, name):
        return self.entries[name]

    def names(self):
        return list(self.entries)

    def sigma(self, log_sigma_name):
        return np.exp(self.entries[log_sigma_name])

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParameterStore":
        entries = dict(self.entries)
        entries.update(updates)
        return ParameterStore(entries, self.prior_variance)

    def log_prior(self) -> float:
        total = 0.0
        for k, v in self.entries.items():
            var = self.prior_variance[k]
            total += float(np.sum(-0.5 * math.log(2 * math.pi * var) - 0.5 * v * v / var))
        return total

    def log_prior_grad(self):
        return {k: -v / self.prior_variance[k] for k, v in self.entries.items()}

    def flatten(self, names=None):
        names = self.names() if names is None else names
        return np.concatenate([self.entries[n].ravel() for n in names]) if names else np.zeros(0)

    def unflatten(self, vector, names=None) -> "ParameterStore":
        names = self.names() if names is None else names
        updates, i = {}, 0
        for n in names:
            size = self.entries[n].size
            updates[n] = np.asarray(vector[i:i + size]).reshape(self.entries[n].shape)
            i += size
        return self.replace(updates)


def init_params(net: BayesNet, rng: np.random.Generator, std: float = 0.1,
                prior_variance: Mapping[str, float] | None = None) -> ParameterStore:
    """Draw every parameter entry i.i.d. from ``N(0, std**2)``."""
    entries = {name: std * rng.standard_normal(shape) for name, shape in net.param_shapes.items()}
    return ParameterStore(entries, dict(prior_variance or {}))


# --------------------------------------------------------------- evaluation


class NumpyOps:
    """Direct evaluation backend: every op returns a plain array."""

    def leaf(self, value, tag=None):
        return value

    def value(self, ref):
        return ref

    def affine(self, parent_values, weights, bias):
        return D.affine_preactivation(weights, bias, parent_values)

    def activate(self, pre, nonlinearity):
        return D.activate(pre, nonlinearity)

    def gaussian_rows(self, x, mean, log_sigma):
        if mean is None:
            mean = 0.0
        if log_sigma is None:
            log_sigma = 0.0
        return D.gaussian_rows(x, mean, log_sigma)

    def bernoulli_rows(self, x, prob):
        return D.bernoulli_rows(x, prob)

    def locscale(self, mean, log_sigma, noise):
        out = np.exp(log_sigma) * noise
        return out if mean is None else mean + out

    def inverse_cdf(self, u):
        return D.gaussian_inverse_cdf(u)

    def add(self, a, b):
        return a + b

    def total(self, rows):
        return float(np.sum(rows))


def conditional_mean(ops, spec: ConditionalSpec, parent_refs, prefs):
    """Mean of the factor (or Bernoulli probability); ``None`` for zero mean."""
    if spec.nonlinearity is None:
        return None
    pre = ops.affine(parent_refs, [prefs[w] for w in spec.weights], prefs[spec.bias])
    return ops.activate(pre, spec.nonlinearity)


def factor_rows(ops, spec: ConditionalSpec, child_ref, parent_refs, prefs):
    mean = conditional_mean(ops, spec, parent_refs, prefs)
    if spec.likelihood == "bernoulli":
        return ops.bernoulli_rows(child_ref, mean)
    return ops.gaussian_rows(child_ref, mean, prefs[spec.log_sigma])


def param_leaves(ops, net, params):
    net.check_params(params)
    return {name: ops.leaf(params.entries[name], ("param", name)) for name in net.param_shapes}


def num_rows(assignment: Mapping[str, np.ndarray]) -> int:
    rows = {np.shape(v)[0] for v in assignment.values()}
    if len(rows) > 1:
        raise ShapeError(f"assignment rows disagree: {sorted(rows)}")
    return rows.pop() if rows else 0


def check_assignment(net: BayesNet, assignment, names):
    for name in names:
        if name not in assignment:
            raise UnknownVariable(f"assignment lacks variable {name!r}")
        arr = assignment[name]
        if np.ndim(arr) != 2 or np.shape(arr)[1] != net.dim(name):
            raise ShapeError(f"{name}: expected (M, {net.dim(name)}) values, got {np.shape(arr)}")
    num_rows({n: assignment[n] for n in names})


def log_joint_program(ops, net: BayesNet, assignment, params):
    """Record/evaluate the factorized joint; returns ``(total, rows, value_refs, param_refs)``."""
    check_assignment(net, assignment, net.order)
    prefs = param_leaves(ops, net, params)
    refs = {name: ops.leaf(np.asarray(assignment[name], dtype=float), ("value", name))
            for name in net.order}
    rows = None
    for name in net.order:
        spec = net.conditionals[name]
        r = factor_rows(ops, spec, refs[name], [refs[p] for p in spec.parents], prefs)
        rows = r if rows is None else ops.add(rows, r)
    return ops.total(rows), rows, refs, prefs


def log_joint(net: BayesNet, assignment, params: ParameterStore) -> float:
    """Sum over datapoints and factors of the conditional log-densities."""
    with np.errstate(over="ignore", invalid="ignore"):
        total, _, _, _ = log_joint_program(NumpyOps(), net, assignment, params)
    if not math.isfinite(total):
        raise NonFinite("log joint is not finite")
    return total


def log_joint_rows(net: BayesNet, assignment, params: ParameterStore) -> np.ndarray:
    _, rows, _, _ = log_joint_program(NumpyOps(), net, assignment, params)
    return rows


def ancestral_sample(net: BayesNet, params: ParameterStore, M: int, rng: np.random.Generator,
                     given: Mapping[str, np.ndarray] | None = None, noise_scale: float = 1.0):
    """Forward-sample every variable not fixed in ``given``.

    ``noise_scale`` multiplies the Gaussian noise; 0 gives the noiseless
    limit where each Gaussian variable equals its conditional mean.
    """
    ops = NumpyOps()
    prefs = param_leaves(ops, net, params)
    values = {k: np.asarray(v, dtype=float) for k, v in (given or {}).items()}
    for name in net.order:
        if name in values:
            continue
        spec = net.conditionals[name]
        mean = conditional_mean(ops, spec, [values[p] for p in spec.parents], prefs)
        shape = (M, net.dim(name))
        if spec.likelihood == "bernoulli":
            values[name] = D.bernoulli_sample(np.broadcast_to(mean, shape), rng)
        else:
            noise = noise_scale * rng.standard_normal(shape)
            values[name] = ops.locscale(mean, prefs[spec.log_sigma], noise)
    return values


# ---------------------------------------------------------------- structure


def markov_blanket(net: BayesNet, var: str) -> set:
    """Parents, children and co-parents of ``var`` (excluding ``var`` itself)."""
    blanket = set(net.parents(var))
    for c in net.children(var):
        blanket.add(c)
        blanket.update(net.parents(c))
    blanket.discard(var)
    return blanket


def _neighbours(net: BayesNet, var: str):
    """Variables sharing at least one factor with ``var``."""
    return markov_blanket(net, var)


def factor_distance(net: BayesNet, a: str, b: str) -> float:
    """Number of factors on the shortest factor-graph path from ``a`` to ``b``.

    Returns ``math.inf`` when the two variables are disconnected.
    """
    net._require(a)
    net._require(b)
    if a == b:
        return 0
    seen = {a: 0}
    queue = deque([a])
    while queue:
        v = queue.popleft()
        for n in sorted(_neighbours(net, v)):
            if n not in seen:
                seen[n] = seen[v] + 1
                if n == b:
                    return seen[n]
                queue.append(n)
    return math.inf


# --------------------------------------------------------------------- JSON


def conditional_from_dict(doc: Mapping) -> ConditionalSpec:
    params = doc.get("params", {}) or {}
    parents = tuple(doc.get("parents", ()))
    weights = params.get("weights", {})
    if isinstance(weights, Mapping):
        weights = tuple(weights[p] for p in parents if p in weights)
        if weights and len(weights) != len(parents):
            raise ModelError(f"{doc['child']}: weights must name every parent")
    return ConditionalSpec(
        child=doc["child"],
        parents=parents,
        family=doc["family"],
        weights=tuple(weights),
        bias=params.get("bias"),
        log_sigma=params.get("log_sigma"),
        generator=doc.get("generator", "location-scale"),
    )


def conditional_to_dict(spec: ConditionalSpec) -> dict:
    params = {}
    if spec.weights:
        params["weights"] = dict(zip(spec.parents, spec.weights))
    if spec.bias:
        params["bias"] = spec.bias
    if spec.log_sigma:
        params["log_sigma"] = spec.log_sigma
    out = {"child": spec.child, "parents": list(spec.parents), "family": spec.family,
           "params": params}
    if spec.generator != "location-scale":
        out["generator"] = spec.generator
    return out


def model_from_dict(doc: Mapping):
    """Parse a model document; returns ``(net, prior_variance_map)``."""
    variables = [VariableDecl(v["name"], int(v["dim"]), v.get("kind", "observed"))
                 for v in doc["variables"]]
    conditionals = [conditional_from_dict(c) for c in doc["conditionals"]]
    net = build_network(variables, conditionals)
    priors = dict(doc.get("priors", {}) or {})
    default = float(priors.pop("default_variance", DEFAULT_PRIOR_VARIANCE))
    overrides = priors.pop("variance", {})
    if priors:
        raise ModelError(f"unknown prior keys: {sorted(priors)}")
    variances = {name: float(overrides.get(name, default)) for name in net.param_shapes}
    return net, variances


def model_to_dict(net: BayesNet, prior_variance: Mapping[str, float] | None = None) -> dict:
    variances = dict(prior_variance or {})
    default = DEFAULT_PRIOR_VARIANCE
    overrides = {k: v for k, v in variances.items() if v != default}
    priors = {"default_variance": default}
    if overrides:
        priors["variance"] = overrides
    return {
        "variables": [{"name": v.name, "dim": v.dim, "kind": v.kind} for v in net.variables.values()],
        "conditionals": [conditional_to_dict(net.conditionals[n]) for n in net.variables],
        "priors": priors,
    }


def load_model(path: str | PathLike):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
