"""Auxiliary form of a network with continuous latents.

Every latent ``Z_j`` is replaced by a deterministic node
``Zt_j = g_j(parents, E_j, theta)`` driven by its own parentless noise
variable ``E_j``.  Marginalizing the deterministic nodes leaves a density
over observations and noise only::

    log p(x, eps) = sum_j log f_Xj(x_j; pa~_j) + sum_j log p(eps_j)

where each ``zt`` inside ``pa~`` is recomputed from its ancestors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, DuplicateName, NonFinite, ShapeError, UnsupportedFamily
from .model import (
    GENERATORS,
    BayesNet,
    ConditionalSpec,
    NumpyOps,
    ParameterStore,
    VariableDecl,
    check_assignment,
    conditional_mean,
    factor_rows,
    num_rows,
    param_leaves,
)

#: Uniform noise is clipped into this range before the normal quantile.
UNIFORM_CLIP = 1e-12
AUX_PREFIX = "eps_"


@dataclass(frozen=True)
class GeneratingFunction:
    kind: str
    base: ConditionalSpec

    @property
    def root_density(self) -> str:
        return "standard-normal" if self.kind == "location-scale" else "uniform"


class AuxiliaryNet:
    """Auxiliary network derived from ``base`` by :func:`to_auxiliary`."""

    def __init__(self, base: BayesNet, det_nodes, aux_roots):
        self.base = base
        self.det_nodes = det_nodes
        self.aux_roots = aux_roots
        self._latent_of = {aux: latent for latent, (_, aux) in det_nodes.items()}
        order = []
        for name in base.order:
            if name in det_nodes:
                order.append(det_nodes[name][1])
            order.append(name)
        self.order = tuple(order)
        self.variables = {}
        for name in self.order:
            if name in self._latent_of:
                self.variables[name] = next(v for v in aux_roots if v.name == name)
            elif name in det_nodes:
                self.variables[name] = VariableDecl(name, base.dim(name), "latent-deterministic")
            else:
                self.variables[name] = base.variables[name]

    def __repr__(self):
        return f"AuxiliaryNet(order={list(self.order)})"

    @property
    def aux_names(self):
        return tuple(v.name for v in self.aux_roots)

    def aux_name(self, latent: str) -> str:
        return self.det_nodes[latent][1]

    def latent_of(self, aux: str) -> str:
        return self._latent_of[aux]

    def parents(self, name):
        if name in self._latent_of:
            return ()
        if name in self.det_nodes:
            return self.base.parents(name) + (self.det_nodes[name][1],)
        return self.base.parents(name)

    def children(self, name):
        if name in self._latent_of:
            return (self._latent_of[name],)
        return self.base.children(name)

    def _effective_args(self, name, cache):
        """Observed and noise variables a deterministic/observed value depends on."""
        if name in cache:
            return cache[name]
        if name in self.det_nodes:
            args = {self.det_nodes[name][1]}
            for p in self.base.parents(name):
                args |= self._effective_args(p, cache)
        else:
            args = {name}
        cache[name] = args
        return args

    def marginal_factors(self):
        """Argument sets of the factors of the marginal density ``p(x, eps)``."""
        cache: dict = {}
        factors = []
        for name in self.base.order:
            if name in self.det_nodes:
                factors.append(frozenset({self.det_nodes[name][1]}))
            else:
                args = {name}
                for p in self.base.parents(name):
                    args |= self._effective_args(p, cache)
                factors.append(frozenset(args))
        return factors

    def markov_blanket(self, var: str) -> set:
        """Blanket of ``var`` in the marginal factor graph over observations and noise."""
        if var in self.det_nodes or var not in self.variables:
            raise ValueError(f"{var!r} is not a variable of the marginal auxiliary density")
        blanket = set()
        for args in self.marginal_factors():
            if var in args:
                blanket |= args
        blanket.discard(var)
        return blanket


def to_auxiliary(net: BayesNet, generators: Mapping[str, str] | None = None) -> AuxiliaryNet:
    """Build the auxiliary network of ``net``.

    ``generators`` optionally overrides the per-latent generator kind that the
    conditional specs declare ("location-scale" or "inverse-cdf").
    """
    generators = dict(generators or {})
    det_nodes = {}
    aux_roots = []
    for name in net.latent_names:
        spec = net.conditionals[name]
        if spec.likelihood != "gaussian":
            raise UnsupportedFamily(f"{name}: no generating function for family {spec.family!r}")
        kind = generators.pop(name, spec.generator)
        if kind not in GENERATORS:
            raise UnsupportedFamily(f"{name}: unknown generator {kind!r}")
        aux = AUX_PREFIX + name
        if aux in net.variables:
            raise DuplicateName(f"auxiliary name {aux!r} collides with a model variable")
        det_nodes[name] = (GeneratingFunction(kind, spec), aux)
        aux_roots.append(VariableDecl(aux, net.dim(name), "auxiliary-root"))
    if generators:
        raise UnsupportedFamily(f"generator overrides for non-latent variables: {sorted(generators)}")
    return AuxiliaryNet(net, det_nodes, tuple(aux_roots))


def _check_order(auxnet: AuxiliaryNet, order: Sequence[str]):
    base = auxnet.base
    if sorted(order) != sorted(base.order):
        raise ValueError("order must list every base variable exactly once")
    seen = set()
    for name in order:
        if any(p not in seen for p in base.parents(name)):
            raise ValueError(f"order is not topological at {name!r}")
        seen.add(name)


def aux_program(ops, auxnet: AuxiliaryNet, observed, epsilon, params: ParameterStore,
                with_density: bool = True, order: Sequence[str] | None = None):
    """Evaluate (or record) the generated latents and the auxiliary log-density.

    Returns ``(total, rows, value_refs, eps_refs, param_refs)``; ``total`` and
    ``rows`` are ``None`` when ``with_density`` is false.
    """
    base = auxnet.base
    if order is None:
        order = base.order
    else:
        _check_order(auxnet, order)
    if with_density:
        observed_needed = base.observed_names
    else:
        latent_parents = {p for lat in base.latent_names for p in base.parents(lat)}
        observed_needed = tuple(n for n in base.observed_names if n in latent_parents)
    check_assignment(base, observed, observed_needed)
    for aux in auxnet.aux_names:
        if aux not in epsilon:
            raise ShapeError(f"epsilon lacks auxiliary root {aux!r}")
        if np.shape(epsilon[aux]) != (np.shape(epsilon[aux])[0], auxnet.variables[aux].dim):
            raise ShapeError(f"{aux}: bad epsilon shape {np.shape(epsilon[aux])}")
    M = num_rows({**{n: observed[n] for n in observed_needed},
                  **{a: epsilon[a] for a in auxnet.aux_names}})

    prefs = param_leaves(ops, base, params)
    refs = {name: ops.leaf(np.asarray(observed[name], dtype=float), ("value", name))
            for name in observed_needed}
    eps_refs = {}
    for aux in auxnet.aux_names:
        eps = np.asarray(epsilon[aux], dtype=float)
        if auxnet.det_nodes[auxnet.latent_of(aux)][0].kind == "inverse-cdf":
            if not np.all((eps > 0.0) & (eps < 1.0)):
                raise DomainError(f"{aux}: uniform noise must lie strictly inside (0, 1)")
        eps_refs[aux] = ops.leaf(eps, ("value", aux))

    rows = None
    for name in order:
        spec = base.conditionals[name]
        if name in auxnet.det_nodes:
            gen, aux = auxnet.det_nodes[name]
            mean = conditional_mean(ops, spec, [refs[p] for p in spec.parents], prefs)
            if gen.kind == "location-scale":
                noise = eps_refs[aux]
                r = ops.gaussian_rows(noise, None, None) if with_density else None
            else:
                noise = ops.inverse_cdf(eps_refs[aux])
                r = None  # log U(0,1) density is zero
            refs[name] = ops.locscale(mean, prefs[spec.log_sigma], noise)
        elif with_density:
            r = factor_rows(ops, spec, refs[name], [refs[p] for p in spec.parents], prefs)
        else:
            r = None
        if r is not None:
            rows = r if rows is None else ops.add(rows, r)
    if not with_density:
        return None, None, refs, eps_refs, prefs
    if rows is None:
        rows = ops.leaf(np.zeros(M), ("const", "zero"))
    return ops.total(rows), rows, refs, eps_refs, prefs


class _ClippedOps(NumpyOps):
    def inverse_cdf(self, u):
        return super().inverse_cdf(np.clip(u, UNIFORM_CLIP, 1.0 - UNIFORM_CLIP))


def generate_latents(auxnet: AuxiliaryNet, observed, epsilon, params: ParameterStore,
                     order: Sequence[str] | None = None) -> dict:
    """Latent values ``zt`` computed from observations and noise in topological order."""
    _, _, refs, _, _ = aux_program(_ClippedOps(), auxnet, observed, epsilon, params,
                                   with_density=False, order=order)
    return {name: refs[name] for name in auxnet.base.latent_names}


def aux_log_joint(auxnet: AuxiliaryNet, observed, epsilon, params: ParameterStore) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        total, _, _, _, _ = aux_program(_ClippedOps(), auxnet, observed, epsilon, params)
    if not np.isfinite(total):
        raise NonFinite("auxiliary log joint is not finite")
    return total


def aux_log_joint_rows(auxnet: AuxiliaryNet, observed, epsilon, params: ParameterStore):
    _, rows, _, _, _ = aux_program(_ClippedOps(), auxnet, observed, epsilon, params)
    return rows


def log_jacobian(auxnet: AuxiliaryNet, params: ParameterStore, M: int) -> float:
    """``M * sum log sigma`` over location-scale latents: log p(x, eps) - log p(x, zt)."""
    total = 0.0
    for name, (gen, _) in auxnet.det_nodes.items():
        if gen.kind == "location-scale":
            total += M * float(np.sum(params[gen.base.log_sigma]))
    return total


def sample_epsilon(auxnet: AuxiliaryNet, M: int, rng: np.random.Generator) -> dict:
    """Draw every auxiliary root from its standard density."""
    if M < 1:
        raise ValueError("M must be at least 1")
    out = {}
    for root in auxnet.aux_roots:
        gen = auxnet.det_nodes[auxnet.latent_of(root.name)][0]
        if gen.kind == "location-scale":
            out[root.name] = rng.standard_normal((M, root.dim))
        else:
            out[root.name] = np.clip(rng.random((M, root.dim)), UNIFORM_CLIP, 1.0 - UNIFORM_CLIP)
    return out
