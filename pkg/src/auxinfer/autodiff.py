"""Reverse-mode derivatives over the fixed primitive set.

:class:`EvalTrace` implements the same op interface as
:class:`auxinfer.model.NumpyOps`; each call computes its value with the very
same numpy code and appends a record.  :meth:`EvalTrace.backward` then walks
the records in reverse and applies hand-derived adjoint rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import distributions as D
from .auxiliary import UNIFORM_CLIP, AuxiliaryNet, aux_program
from .errors import NonFinite
from .model import BayesNet, NumpyOps, ParameterStore, log_joint_program


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass
class Record:
    prim: str
    inputs: tuple
    value: object
    static: dict = field(default_factory=dict)


# ----------------------------------------------------------- adjoint rules
# Each rule maps (adjoint of output, record, input values) to one adjoint per
# input (None when the input does not need one).


def _vjp_affine(g, rec, vals):
    k = rec.static["k"]
    parents, weights = vals[:k], vals[k:2 * k]
    out = [g @ w for w in weights]
    for v in parents:
        out.append(g.T @ v if g.ndim == 2 else np.outer(g, v))
    out.append(g)
    return out


def _vjp_activate(g, rec, vals):
    return [g * D.activation_grad(rec.value, rec.static["nonlinearity"])]


def _vjp_gaussian_rows(g, rec, vals):
    x, mean, log_sigma = vals
    ls = 0.0 if log_sigma is None else log_sigma
    mu = 0.0 if mean is None else mean
    inv = np.exp(-ls)
    r = (x - mu) * inv
    G = g[..., None]
    dx = -G * r * inv
    return [dx,
            None if mean is None else -dx,
            None if log_sigma is None else G * (r * r - 1.0)]


def _vjp_bernoulli_rows(g, rec, vals):
    x, prob = vals
    return [None, g[..., None] * D.bernoulli_logpmf_grad(x, prob)]


def _vjp_locscale(g, rec, vals):
    mean, log_sigma, noise = vals
    scaled = np.exp(log_sigma) * g
    return [None if mean is None else g, scaled * noise, scaled]


def _vjp_inverse_cdf(g, rec, vals):
    return [g / D.gaussian_pdf(rec.value)]


def _vjp_add(g, rec, vals):
    return [g, g]


def _vjp_total(g, rec, vals):
    return [g * np.ones_like(vals[0])]


ADJOINTS = {
    "affine": _vjp_affine,
    "activate": _vjp_activate,
    "gaussian_rows": _vjp_gaussian_rows,
    "bernoulli_rows": _vjp_bernoulli_rows,
    "locscale": _vjp_locscale,
    "inverse_cdf": _vjp_inverse_cdf,
    "add": _vjp_add,
    "total": _vjp_total,
}


class EvalTrace(NumpyOps):
    """Forward record of one log-density evaluation plus its adjoint buffer.

    References handed out by the op methods are integer record indices;
    ``None`` stands for an absent optional input (e.g. zero mean).
    """

    def __init__(self):
        self.records: list[Record] = []
        self.adjoints: list | None = None

    def _push(self, prim, inputs, value, **static):
        self.records.append(Record(prim, tuple(inputs), value, static))
        return len(self.records) - 1

    def value(self, ref):
        return None if ref is None else self.records[ref].value

    def _vals(self, refs):
        return [self.value(r) for r in refs]

    def leaf(self, value, tag=None):
        return self._push("leaf", (), value, tag=tag)

    def affine(self, parent_refs, weight_refs, bias_ref):
        inputs = tuple(parent_refs) + tuple(weight_refs) + (bias_ref,)
        out = super().affine(self._vals(parent_refs), self._vals(weight_refs), self.value(bias_ref))
        return self._push("affine", inputs, out, k=len(parent_refs))

    def activate(self, pre, nonlinearity):
        return self._push("activate", (pre,), super().activate(self.value(pre), nonlinearity),
                          nonlinearity=nonlinearity)

    def gaussian_rows(self, x, mean, log_sigma):
        out = super().gaussian_rows(self.value(x), self.value(mean), self.value(log_sigma))
        return self._push("gaussian_rows", (x, mean, log_sigma), out)

    def bernoulli_rows(self, x, prob):
        return self._push("bernoulli_rows", (x, prob),
                          super().bernoulli_rows(self.value(x), self.value(prob)))

    def locscale(self, mean, log_sigma, noise):
        out = super().locscale(self.value(mean), self.value(log_sigma), self.value(noise))
        return self._push("locscale", (mean, log_sigma, noise), out)

    def inverse_cdf(self, u):
        uv = np.clip(self.value(u), UNIFORM_CLIP, 1.0 - UNIFORM_CLIP)
        return self._push("inverse_cdf", (u,), super().inverse_cdf(uv))

    def add(self, a, b):
        return self._push("add", (a, b), super().add(self.value(a), self.value(b)))

    def total(self, rows):
        return self._push("total", (rows,), super().total(self.value(rows)))

    # ------------------------------------------------------------------

    def backward(self, out_ref, seed=1.0):
        """Fill :attr:`adjoints` with d(out)/d(record) for every record."""
        adj: list = [None] * len(self.records)
        adj[out_ref] = np.asarray(seed, dtype=float)
        for i in range(out_ref, -1, -1):
            g = adj[i]
            rec = self.records[i]
            if g is None or rec.prim == "leaf":
                continue
            contribs = ADJOINTS[rec.prim](g, rec, self._vals(rec.inputs))
            for ref, c in zip(rec.inputs, contribs):
                if ref is None or c is None:
                    continue
                c = unbroadcast(c, np.shape(self.records[ref].value))
                adj[ref] = c if adj[ref] is None else adj[ref] + c
        self.adjoints = adj
        return adj

    def adjoint(self, ref):
        g = self.adjoints[ref]
        return np.zeros(np.shape(self.records[ref].value)) if g is None else g

    def replay(self):
        """Recompute every non-leaf record from the leaves; returns the last value."""
        ops = NumpyOps()
        values: list = []

        def v(ref):
            return None if ref is None else values[ref]

        for rec in self.records:
            ins = rec.inputs
            if rec.prim == "leaf":
                out = rec.value
            elif rec.prim == "affine":
                k = rec.static["k"]
                out = ops.affine([v(r) for r in ins[:k]], [v(r) for r in ins[k:2 * k]], v(ins[-1]))
            elif rec.prim == "activate":
                out = ops.activate(v(ins[0]), rec.static["nonlinearity"])
            elif rec.prim == "inverse_cdf":
                out = ops.inverse_cdf(np.clip(v(ins[0]), UNIFORM_CLIP, 1.0 - UNIFORM_CLIP))
            else:
                out = getattr(ops, rec.prim)(*[v(r) for r in ins])
            values.append(out)
        return values[-1]


@dataclass
class Gradient:
    """Derivatives of a log-density; ``rows`` holds the per-datapoint values."""

    wrt_values: dict
    wrt_params: dict
    rows: np.ndarray | None = None


def _finish(trace, total_ref, rows_ref, value_refs, param_refs):
    value = trace.value(total_ref)
    if not np.isfinite(value):
        raise NonFinite("log density is not finite")
    trace.backward(total_ref)
    wrt_values = {name: trace.adjoint(ref) for name, ref in value_refs.items()}
    wrt_params = {name: trace.adjoint(ref) for name, ref in param_refs.items()}
    for g in list(wrt_values.values()) + list(wrt_params.values()):
        if not np.all(np.isfinite(g)):
            raise NonFinite("gradient is not finite")
    return value, Gradient(wrt_values, wrt_params, np.asarray(trace.value(rows_ref)))


def grad_original(net: BayesNet, assignment, params: ParameterStore, trace: EvalTrace | None = None):
    """``log_joint`` and its gradient with respect to the latents and all parameters."""
    trace = EvalTrace() if trace is None else trace
    with np.errstate(over="ignore", invalid="ignore"):
        total, rows, refs, prefs = log_joint_program(trace, net, assignment, params)
    latent_refs = {n: refs[n] for n in net.latent_names}
    return _finish(trace, total, rows, latent_refs, prefs)


def grad_auxiliary(auxnet: AuxiliaryNet, observed, epsilon, params: ParameterStore,
                   trace: EvalTrace | None = None):
    """``aux_log_joint`` and its gradient with respect to the noise and all parameters."""
    trace = EvalTrace() if trace is None else trace
    with np.errstate(over="ignore", invalid="ignore"):
        total, rows, _, eps_refs, prefs = aux_program(trace, auxnet, observed, epsilon, params)
    return _finish(trace, total, rows, eps_refs, prefs)


def finite_diff_check(f, point, h=1e-5, coords=None):
    """Largest ``|analytic - central difference| / max(1, |analytic|)``.

    ``f(point)`` must return ``(value, gradient)`` with the gradient shaped
    like ``point``.  ``coords`` restricts the check to some flat indices.
    """
    point = np.asarray(point, dtype=float)
    _, analytic = f(point)
    analytic = np.asarray(analytic, dtype=float).ravel()
    flat = point.ravel()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        up = flat.copy()
        dn = flat.copy()
        up[i] += h
        dn[i] -= h
        fd = (f(up.reshape(point.shape))[0] - f(dn.reshape(point.shape))[0]) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(analytic[i])))
    return worst
