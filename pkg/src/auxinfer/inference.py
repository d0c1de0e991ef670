"""Gradient-driven samplers and optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, DomainError, NonFinite


@dataclass(frozen=True)
class HmcConfig:
    leapfrog_steps: int = 5
    step_size: float = 0.01

    def __post_init__(self):
        if int(self.leapfrog_steps) != self.leapfrog_steps or self.leapfrog_steps < 1:
            raise ConfigError("leapfrog_steps must be a positive integer")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")


@dataclass
class ChainState:
    """Position of one chain (or of ``M`` independent row-chains) with cached density.

    When ``logp`` is a vector, row ``i`` of ``position`` is an independent
    chain with log-density ``logp[i]`` and is accepted or rejected on its own.
    """

    position: np.ndarray
    logp: float | np.ndarray
    grad: np.ndarray
    accepted: int = 0
    proposed: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


def init_chain(position, logp_and_grad_fn) -> ChainState:
    position = np.asarray(position, dtype=float)
    logp, grad = logp_and_grad_fn(position)
    return ChainState(position, logp, np.asarray(grad, dtype=float))


def _trajectory(q, p, logp_and_grad_fn, step_size, n_steps, grad):
    """Leapfrog from ``(q, p)`` reusing the gradient at ``q``; returns end state and density."""
    p = p + 0.5 * step_size * grad
    logp = None
    for i in range(n_steps):
        q = q + step_size * p
        logp, grad = logp_and_grad_fn(q)
        if not np.all(np.isfinite(grad)):
            raise NonFinite("non-finite gradient along leapfrog trajectory")
        if i < n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return q, p, logp, grad


def leapfrog(position, momentum, grad_fn: Callable, step_size: float, n_steps: int):
    """Integrate Hamiltonian dynamics for ``n_steps`` half-kick/drift/half-kick steps.

    ``grad_fn`` returns the gradient of the log-density (minus the force of
    the potential).  Raises :class:`NonFinite` when the gradient blows up.
    """
    q = np.asarray(position, dtype=float)
    p = np.asarray(momentum, dtype=float)
    g0 = np.asarray(grad_fn(q), dtype=float)
    q, p, _, _ = _trajectory(q, p, lambda x: (None, grad_fn(x)), step_size, n_steps, g0)
    return q, p


def _kinetic(p, per_row):
    sq = 0.5 * p * p
    return sq.reshape(sq.shape[0], -1).sum(axis=1) if per_row else float(np.sum(sq))


def hmc_step(state: ChainState, logp_and_grad_fn: Callable, config: HmcConfig,
             rng: np.random.Generator):
    """One Hybrid Monte Carlo transition with a freshly drawn momentum.

    Returns ``(new_state, accepted)``; ``accepted`` is a bool for a single
    chain and a boolean vector for row-chains.  Numerical failure anywhere on
    the trajectory counts as a rejection.
    """
    per_row = np.ndim(state.logp) == 1
    q0 = state.position
    p0 = rng.standard_normal(q0.shape)
    log_u = np.log(rng.random(np.shape(state.logp)) if per_row else rng.random())
    h0 = -state.logp + _kinetic(p0, per_row)
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            q1, p1, logp1, g1 = _trajectory(q0, p0, logp_and_grad_fn, config.step_size,
                                            config.leapfrog_steps, state.grad)
            h1 = -np.asarray(logp1) + _kinetic(p1, per_row)
            ok = np.isfinite(h1) & (log_u < h0 - h1)
    except (NonFinite, DomainError, FloatingPointError):
        ok = np.zeros(np.shape(state.logp), dtype=bool)
        q1 = logp1 = g1 = None

    n = ok.size if per_row else 1
    accepted = int(np.sum(ok))
    if per_row:
        if accepted:
            mask = ok.reshape((-1,) + (1,) * (q0.ndim - 1))
            new = ChainState(np.where(mask, q1, q0), np.where(ok, logp1, state.logp),
                             np.where(mask, g1, state.grad))
        else:
            new = replace(state)
        flag = ok
    else:
        ok = bool(ok)
        new = ChainState(q1, float(logp1), g1) if ok else replace(state)
        flag = ok
    new.accepted = state.accepted + accepted
    new.proposed = state.proposed + n
    return new, flag


@dataclass
class AdagradState:
    """Per-coordinate accumulated squared gradients for ascent steps."""

    learning_rate: float = 0.1
    delta: float = 1e-8
    accum: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


def adagrad_update(state: AdagradState, params: Mapping[str, np.ndarray],
                   grads: Mapping[str, np.ndarray]):
    """Ascent step ``theta + lr * g / (delta + sqrt(sum g**2))`` for every entry of ``grads``.

    Entries of ``params`` without a gradient are passed through unchanged.
    Returns ``(new_state, new_params)``; the inputs are not modified.
    """
    accum = dict(state.accum)
    out = dict(params)
    for name, g in grads.items():
        g = np.asarray(g, dtype=float)
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != {np.shape(params[name])}")
        acc = accum.get(name, 0.0) + g * g
        accum[name] = acc
        out[name] = params[name] + state.learning_rate * g / (state.delta + np.sqrt(acc))
    return AdagradState(state.learning_rate, state.delta, accum), out


def gradient_ascent_step(values, grads, lr: float):
    """``values + lr * grads`` for arrays or for dicts of arrays."""
    if isinstance(values, Mapping):
        return {k: values[k] + lr * grads[k] if k in grads else values[k] for k in values}
    return np.asarray(values) + lr * np.asarray(grads)
