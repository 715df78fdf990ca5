"""Comparison models: Modern Hopfield Network recall, and point-weight
predictive-coding networks (GPCN) trained offline or online by energy
descent.

A GPCN is exactly a particle with zero weight covariance, so its reads
reuse the memory engine verbatim through a zero-covariance wrapper; only
its writes differ (gradient steps on the energy instead of conjugate
updates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .engine import OptimizerConfig, Query, ReadConfig, _adam_ascend, read_auto, read_hetero
from .gaussian import HiddenLayerPosterior, LayerPrior, TopLayerPosterior
from .network import (
    MemoryState,
    NetworkShape,
    Particle,
    ParticlePrior,
    activation_apply,
    as_batched_stack,
)


# ---------------------------------------------------------------------------
# Modern Hopfield Network
# ---------------------------------------------------------------------------


@dataclass
class MhnMemory:
    """Stored data rows plus the softmax inverse temperature."""

    keys: np.ndarray | None = None
    beta: float = 10000.0

    @property
    def n_items(self) -> int:
        return 0 if self.keys is None else self.keys.shape[0]


def mhn_store(mem: MhnMemory, x: np.ndarray) -> MhnMemory:
    """Append one observation as a new stored row."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise ValueError("stored rows must be finite")
    if mem.keys is None:
        return MhnMemory(keys=x, beta=mem.beta)
    if x.shape[1] != mem.keys.shape[1]:
        raise ValueError(f"row width {x.shape[1]} != stored width {mem.keys.shape[1]}")
    return MhnMemory(keys=np.vstack([mem.keys, x]), beta=mem.beta)


def _mhn_grad_and_score(mem: MhnMemory, q2: np.ndarray):
    """Rowwise gradient beta * (softmax(beta q K^T) K - q) plus a density
    score (the log mixture density up to a constant) for best-iterate
    tracking; softmaxes are max-shifted so very large beta stays finite."""
    scores = mem.beta * (q2 @ mem.keys.T)            # (B, n)
    hi = scores.max(axis=1, keepdims=True)
    w = np.exp(scores - hi)
    total = w.sum(axis=1, keepdims=True)
    w /= total
    grad = mem.beta * (w @ mem.keys - q2)
    log_density = (hi + np.log(total))[:, 0] - 0.5 * mem.beta * np.einsum(
        "bi,bi->b", q2, q2
    )
    return grad, log_density


def mhn_grad(mem: MhnMemory, q: np.ndarray) -> np.ndarray:
    """Gradient of the stored-pattern mixture log density at queries q."""
    if mem.n_items < 1:
        raise ValueError("recall from an empty Hopfield memory")
    q2 = np.atleast_2d(np.asarray(q, dtype=np.float64))
    out, _ = _mhn_grad_and_score(mem, q2)
    return out[0] if np.asarray(q).ndim == 1 else out


def mhn_log_density(mem: MhnMemory, q: np.ndarray) -> float:
    """Log mixture density whose ascent is Hopfield recall (for testing)."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    d = q.shape[0]
    norms = np.einsum("ij,ij->i", mem.keys, mem.keys)
    log_w = 0.5 * mem.beta * norms
    log_w -= logsumexp(log_w)
    sq = np.einsum("ij,ij->i", mem.keys - q, mem.keys - q)
    log_comp = -0.5 * d * math.log(2.0 * math.pi / mem.beta) - 0.5 * mem.beta * sq
    return float(logsumexp(log_w + log_comp))


def mhn_recall(
    mem: MhnMemory,
    query: Query,
    steps: int = 500,
    lr: float = 1.0,
) -> np.ndarray:
    """Gradient-ascent recall from a query; known entries stay clamped."""
    known = None if query.known_mask is None else query.known_mask.reshape(1, -1)
    out = _mhn_recall_batch(mem, query.values.reshape(1, -1), known, steps, lr)
    return out[0]


def _mhn_recall_batch(mem, values, known_mask, steps, lr):
    """Gradient ascent on the mixture log density with the step scaled by
    the density's curvature 1/beta, so lr = 1 is the classical softmax
    retrieval update and recall stays inside the query's basin.  Stops
    early once no free coordinate moves.
    """
    if mem.n_items < 1:
        raise ValueError("recall from an empty Hopfield memory")
    q = np.asarray(values, dtype=np.float64).copy()
    free = np.ones_like(q)
    if known_mask is not None:
        free = (~np.asarray(known_mask, dtype=bool)).astype(np.float64)
    for _ in range(steps):
        g, _ = _mhn_grad_and_score(mem, q)
        step = (lr / mem.beta) * g * free
        if np.max(np.abs(step)) <= 1e-15:
            break
        q = q + step
    if known_mask is not None:
        mask = np.asarray(known_mask, dtype=bool)
        q[mask] = np.asarray(values)[mask]
    return q


# ---------------------------------------------------------------------------
# GPCN: point-weight predictive coding network
# ---------------------------------------------------------------------------


@dataclass
class GpcnModel:
    """Point estimates of the network weights plus the observation noise."""

    shape: NetworkShape
    weights: list                   # W^l, (d_{l+1}, d_l) for each hidden link
    bias: np.ndarray                # top-layer bias, (d_L,)
    sigma_x2: float = 1e-4
    opt_state: dict | None = None   # persistent Adam state for online writes


def init_gpcn(dims, activation: str = "gelu", sigma_x2: float = 1e-4, seed: int = 0) -> GpcnModel:
    """Kaiming-initialized network, same convention as a fresh particle."""
    shape = NetworkShape(dims=tuple(dims), activation=activation)
    rng = np.random.default_rng(seed)
    weights = []
    for l in range(shape.n_weight_layers):
        d_up, d_down = shape.dims[l + 1], shape.dims[l]
        weights.append(rng.normal(0.0, math.sqrt(2.0 / d_up), size=(d_up, d_down)))
    bias = rng.normal(0.0, math.sqrt(2.0 / shape.dims[-1]), size=shape.dims[-1])
    return GpcnModel(shape=shape, weights=weights, bias=bias, sigma_x2=sigma_x2)


def as_zero_cov_memory(model: GpcnModel) -> MemoryState:
    """View the GPCN as a one-particle memory with zero weight covariance.

    Reads through this view follow the exact code path of the Bayesian
    engine; the log joint reduces to the (scaled, shifted) negative energy.
    """
    layers = [
        HiddenLayerPosterior(mean=w, row_cov=np.zeros((w.shape[0], w.shape[0])))
        for w in model.weights
    ]
    top = TopLayerPosterior(mean=model.bias, var=0.0)
    particle = Particle(layers=layers, top=top, log_weight=0.0)
    prior = ParticlePrior(
        layers=tuple(LayerPrior(mean=w.copy(), var=0.0) for w in model.weights),
        top=LayerPrior(mean=model.bias.copy(), var=0.0),
    )
    return MemoryState(
        shape=model.shape,
        particles=[particle],
        priors=[prior],
        sigma_x2=model.sigma_x2,
        sigma_w2=0.0,
        rng_seed=0,
    )


def gpcn_energy(model: GpcnModel, stack) -> float:
    """Summed squared prediction error across all layers."""
    stack2d, single = as_batched_stack(stack)
    if len(stack2d) - 1 != len(model.weights):
        raise ValueError("stack depth does not match the model")
    resid_top = stack2d[-1] - model.bias
    total = 0.5 * np.einsum("bi,bi->b", resid_top, resid_top)
    for l, w in enumerate(model.weights):
        z = activation_apply(model.shape.activation, stack2d[l + 1])
        resid = stack2d[l] - z @ w
        total += 0.5 * np.einsum("bi,bi->b", resid, resid)
    return float(total[0]) if single else total


def _fit_gpcn_stacks(model: GpcnModel, data: np.ndarray, cfg: OptimizerConfig):
    """Minimize the energy over hidden activations for a batch of datapoints."""
    view = as_zero_cov_memory(model)
    stack = [data.copy()] + [np.zeros((data.shape[0], d)) for d in model.shape.dims[1:]]
    if len(stack) == 1:
        return stack
    free = [np.zeros_like(stack[0])] + [np.ones_like(x) for x in stack[1:]]
    return _adam_ascend(
        view.particles, stack, free, model.sigma_x2, model.shape.activation, cfg, cfg.steps
    )


def _weight_grads(model: GpcnModel, stack2d):
    """Energy gradient w.r.t. the weights at fixed activations (batch-summed)."""
    grads = []
    for l, w in enumerate(model.weights):
        z = activation_apply(model.shape.activation, stack2d[l + 1])
        resid = stack2d[l] - z @ w
        grads.append(-z.T @ resid)
    g_bias = -np.sum(stack2d[-1] - model.bias, axis=0)
    return grads, g_bias


def _adam_weight_step(model, grads, g_bias, lr, state):
    """One Adam descent step on the weights; advances and returns the state."""
    if state is None:
        state = {
            "t": 0,
            "m": [np.zeros_like(w) for w in model.weights] + [np.zeros_like(model.bias)],
            "v": [np.zeros_like(w) for w in model.weights] + [np.zeros_like(model.bias)],
        }
    t = state["t"] + 1
    b1, b2, eps = 0.9, 0.999, 1e-8
    params = [w.copy() for w in model.weights] + [model.bias.copy()]
    gs = list(grads) + [g_bias]
    new_m, new_v = [], []
    for i, (p, g) in enumerate(zip(params, gs)):
        m_t = b1 * state["m"][i] + (1.0 - b1) * g
        v_t = b2 * state["v"][i] + (1.0 - b2) * (g * g)
        p -= lr * (m_t / (1.0 - b1**t)) / (np.sqrt(v_t / (1.0 - b2**t)) + eps)
        new_m.append(m_t)
        new_v.append(v_t)
    new_state = {"t": t, "m": new_m, "v": new_v}
    return params[:-1], params[-1], new_state


def gpcn_write_offline(
    model: GpcnModel,
    data,
    activation_cfg: OptimizerConfig | None = None,
    weight_iters: int = 100,
    weight_lr: float = 1e-3,
) -> GpcnModel:
    """Batch training: refit activations, step the weights, repeat.

    Each iteration re-minimizes the energy over every datapoint's hidden
    stack under the current weights, then takes one Adam step on the energy
    summed over the training set.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] < 1:
        raise ValueError("offline training needs at least one datapoint")
    activation_cfg = activation_cfg or OptimizerConfig()
    current = GpcnModel(
        shape=model.shape,
        weights=[w.copy() for w in model.weights],
        bias=model.bias.copy(),
        sigma_x2=model.sigma_x2,
        opt_state=None,
    )
    state = None
    for _ in range(weight_iters):
        stacks = _fit_gpcn_stacks(current, data, activation_cfg)
        energy = gpcn_energy(current, stacks)
        if not np.all(np.isfinite(energy)):
            raise FloatingPointError("energy diverged during offline training")
        grads, g_bias = _weight_grads(current, stacks)
        weights, bias, state = _adam_weight_step(current, grads, g_bias, weight_lr, state)
        current = GpcnModel(
            shape=current.shape, weights=weights, bias=bias, sigma_x2=current.sigma_x2
        )
    return current


def gpcn_write_online(
    model: GpcnModel,
    x: np.ndarray,
    activation_cfg: OptimizerConfig | None = None,
    weight_lr: float = 1e-3,
) -> GpcnModel:
    """Continual training: fit one datapoint's activations, one weight step.

    Adam moments persist inside the returned model so a stream of writes
    behaves like one ongoing optimization.
    """
    activation_cfg = activation_cfg or OptimizerConfig()
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    stacks = _fit_gpcn_stacks(model, x, activation_cfg)
    if not np.all(np.isfinite(gpcn_energy(model, stacks))):
        raise FloatingPointError("energy diverged during online write")
    grads, g_bias = _weight_grads(model, stacks)
    weights, bias, state = _adam_weight_step(model, grads, g_bias, weight_lr, model.opt_state)
    return GpcnModel(
        shape=model.shape, weights=weights, bias=bias, sigma_x2=model.sigma_x2, opt_state=state
    )


def gpcn_read(model: GpcnModel, query: Query, cfg: ReadConfig | None = None) -> np.ndarray:
    """Recall by energy descent, via the zero-covariance memory view."""
    view = as_zero_cov_memory(model)
    if query.known_mask is None:
        return read_auto(view, query, cfg)
    return read_hetero(view, query, cfg)
