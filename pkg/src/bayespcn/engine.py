"""The three memory operations: write (one-shot store), read (recall by
gradient ascent on the mixture log density), and forget (diffusion toward
the empty-memory prior).

Reads follow the block structure of iterated conditional modes: the hidden
stack and the sensory layer are optimized in alternating phases with a
fixed per-phase Adam budget.  Writes fit each particle's hidden stack
against that particle's own predictive density, score the particle by the
density of the completed stack under its pre-update belief, apply the
exact rank-1 conjugate updates, and renormalize the mixture weights.

write/forget return new MemoryState objects; read operations only evaluate
a snapshot and may run concurrently with each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian import (
    diffuse_layer,
    log_sum_exp,
    update_layer_posterior,
    update_top_posterior,
)
from .network import (
    MemoryState,
    Particle,
    activation_apply,
    as_batched_stack,
    flatten_stack,
    mixture_value_and_grad,
    particle_log_joint,
    split_flat,
)


class DivergenceError(RuntimeError):
    """The activation objective became non-finite (typically an overloaded memory)."""


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam settings for activation ascent."""

    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    steps: int = 500

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.steps < 1:
            raise ValueError("learning_rate, epsilon and steps must be positive")


@dataclass(frozen=True)
class ReadConfig:
    """Recall budget: outer alternation count and per-phase step budget."""

    icm_iterations: int = 30
    steps_per_phase: int = 500
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    convergence_tol: float = 0.0

    def __post_init__(self):
        if self.icm_iterations < 1 or self.steps_per_phase < 1:
            raise ValueError("icm_iterations and steps_per_phase must be positive")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be non-negative")


@dataclass
class Query:
    """Sensory query; known_mask marks trusted 'key' entries (hetero recall)."""

    values: np.ndarray
    known_mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.known_mask is not None:
            self.known_mask = np.asarray(self.known_mask, dtype=bool).reshape(-1)
            if self.known_mask.shape != self.values.shape:
                raise ValueError("known_mask must match the query length")


def _adam_ascend(particles, stack2d, free2d, sigma_x2, activation, opt, steps, tol=0.0):
    """Maximize the mixture log joint over unmasked stack entries.

    free2d is a stack-shaped list of 0/1 float arrays; masked coordinates
    receive zero gradient and therefore never move.  Raises DivergenceError
    the moment the objective stops being finite.
    """
    dims = [x.shape[1] for x in stack2d]
    x = flatten_stack(stack2d).copy()
    mask = flatten_stack(free2d)
    m_t = np.zeros_like(x)
    v_t = np.zeros_like(x)
    for t in range(1, steps + 1):
        values, grads = mixture_value_and_grad(particles, split_flat(x, dims), sigma_x2, activation)
        if not np.all(np.isfinite(values)):
            raise DivergenceError("log joint became non-finite during activation ascent")
        g = flatten_stack(grads) * mask
        m_t = opt.beta1 * m_t + (1.0 - opt.beta1) * g
        v_t = opt.beta2 * v_t + (1.0 - opt.beta2) * (g * g)
        m_hat = m_t / (1.0 - opt.beta1**t)
        v_hat = v_t / (1.0 - opt.beta2**t)
        x = x + opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.epsilon)
        if tol > 0.0 and float(np.max(np.abs(g))) < tol:
            break
    return split_flat(x, dims)


def _init_hidden(m: MemoryState, batch: int, h_init: str) -> list:
    hidden = [np.zeros((batch, d)) for d in m.shape.dims[1:]]
    if h_init == "zeros" or not hidden:
        return hidden
    if h_init == "feedforward":
        best = int(np.argmax(m.log_weights()))
        hidden[-1] = np.tile(m.particles[best].top.mean, (batch, 1))
        return hidden
    raise ValueError(f"unknown h_init {h_init!r}")


def _ones_like_stack(stack2d):
    return [np.ones_like(x) for x in stack2d]


def fit_activations(
    m: MemoryState,
    x0: np.ndarray,
    free_x0_mask: np.ndarray | None = None,
    h_init: str = "zeros",
    cfg: OptimizerConfig | None = None,
) -> list:
    """Fill in the hidden stack above x0 by ascending the mixture log joint.

    Entries of x0 flagged free in free_x0_mask move with the hidden layers;
    all others stay clamped (default: the whole sensory layer is clamped).
    Returns the full activation stack [x^0, ..., x^L].
    """
    cfg = cfg or OptimizerConfig()
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    if x0.shape[1] != m.shape.dims[0]:
        raise ValueError(f"query width {x0.shape[1]} != sensory width {m.shape.dims[0]}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 contains non-finite entries")
    stack = [x0.copy()] + _init_hidden(m, 1, h_init)
    if free_x0_mask is None:
        x0_free = np.zeros_like(x0)
    else:
        x0_free = np.asarray(free_x0_mask, dtype=np.float64).reshape(1, -1)
    free = [x0_free] + [np.ones_like(x) for x in stack[1:]]
    if len(stack) == 1 and not x0_free.any():
        return [stack[0][0]]
    out = _adam_ascend(
        m.particles, stack, free, m.sigma_x2, m.shape.activation, cfg, cfg.steps
    )
    return [x[0] for x in out]


def read_auto(m: MemoryState, query: Query, cfg: ReadConfig | None = None) -> np.ndarray:
    """Auto-associative recall: denoise the whole query vector.

    Alternates between fitting the hidden stack with the sensory layer held
    fixed and refining the sensory layer with the hidden stack held fixed,
    warm-starting both across iterations.
    """
    if query.known_mask is not None:
        raise ValueError("auto-associative read takes a mask-free query")
    out, _ = _read_auto_batch(m, query.values.reshape(1, -1), cfg)
    return out[0]


def read_hetero(m: MemoryState, query: Query, cfg: ReadConfig | None = None) -> np.ndarray:
    """Hetero-associative recall: complete the unknown entries of the query.

    Runs a single joint ascent over the unknown sensory entries and the
    hidden stack with the known entries clamped, spending the full
    icm_iterations * steps_per_phase budget.
    """
    if query.known_mask is None:
        raise ValueError("hetero-associative read requires a known_mask")
    out = _read_hetero_batch(
        m, query.values.reshape(1, -1), query.known_mask.reshape(1, -1), cfg
    )
    return out[0]


def _read_auto_batch(m, values, cfg=None, h_init="zeros"):
    """Batched auto-associative recall; rows are independent queries.

    Returns (recalls, boundary_values) where boundary_values holds the
    mixture log joint after each optimization phase, for monotonicity
    checks.
    """
    cfg = cfg or ReadConfig()
    values = np.asarray(values, dtype=np.float64)
    stack = [values.copy()] + _init_hidden(m, values.shape[0], h_init)
    n_hidden = len(stack) - 1
    boundaries = []
    x0_fixed = [np.zeros_like(stack[0])] + [np.ones_like(x) for x in stack[1:]]
    x0_free = [np.ones_like(stack[0])] + [np.zeros_like(x) for x in stack[1:]]
    for _ in range(cfg.icm_iterations):
        if n_hidden:
            stack = _adam_ascend(
                m.particles, stack, x0_fixed, m.sigma_x2, m.shape.activation,
                cfg.optimizer, cfg.steps_per_phase, cfg.convergence_tol,
            )
            boundaries.append(_stack_value(m, stack))
        stack = _adam_ascend(
            m.particles, stack, x0_free, m.sigma_x2, m.shape.activation,
            cfg.optimizer, cfg.steps_per_phase, cfg.convergence_tol,
        )
        boundaries.append(_stack_value(m, stack))
    return stack[0], boundaries


def _read_hetero_batch(m, values, known_mask, cfg=None, h_init="zeros"):
    """Batched hetero-associative recall; per-row known masks are clamped."""
    cfg = cfg or ReadConfig()
    values = np.asarray(values, dtype=np.float64)
    known = np.asarray(known_mask, dtype=bool)
    stack = [values.copy()] + _init_hidden(m, values.shape[0], h_init)
    free = [(~known).astype(np.float64)] + [np.ones_like(x) for x in stack[1:]]
    if len(stack) == 1 and not free[0].any():
        return values.copy()
    stack = _adam_ascend(
        m.particles, stack, free, m.sigma_x2, m.shape.activation,
        cfg.optimizer, cfg.icm_iterations * cfg.steps_per_phase, cfg.convergence_tol,
    )
    out = stack[0]
    out[known] = values[known]
    return out


def _stack_value(m, stack2d):
    vals, _ = mixture_value_and_grad(m.particles, stack2d, m.sigma_x2, m.shape.activation)
    return vals


def write(m: MemoryState, x0: np.ndarray, cfg: OptimizerConfig | None = None) -> MemoryState:
    """Store one datapoint with a single sweep of conjugate updates.

    Per particle: fit the hidden stack against that particle's own
    predictive density, score the particle by the completed stack's log
    density under its pre-update belief, then condition every layer on the
    fitted activations.  Weights renormalize across particles; a particle
    whose score is non-finite is frozen with weight -inf rather than
    corrupting the mixture.
    """
    cfg = cfg or OptimizerConfig()
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape[0] != m.shape.dims[0]:
        raise ValueError(f"datapoint width {x0.shape[0]} != sensory width {m.shape.dims[0]}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("datapoint contains non-finite entries")

    stacks = []
    for p in m.particles:
        stacks.append(_fit_particle_stack(m, p, x0, cfg))
    return _write_given_activations(m, stacks)


def _fit_particle_stack(m, p, x0, cfg):
    row = x0.reshape(1, -1)
    stack = [row.copy()] + _init_hidden(m, 1, "zeros")
    if len(stack) == 1:
        return stack
    free = [np.zeros_like(stack[0])] + [np.ones_like(x) for x in stack[1:]]
    return _adam_ascend([p], stack, free, m.sigma_x2, m.shape.activation, cfg, cfg.steps)


def _write_given_activations(m: MemoryState, stacks) -> MemoryState:
    """Conjugate-update every particle from already-fitted stacks (batch=1)."""
    activation = m.shape.activation
    new_particles = []
    raw_weights = np.empty(m.n_particles)
    for n, p in enumerate(m.particles):
        stack2d, _ = as_batched_stack(stacks[n])
        score = particle_log_joint(p, stack2d, m.sigma_x2, activation)
        raw = p.log_weight + float(np.asarray(score).reshape(-1)[0])
        if not np.isfinite(raw):
            raw_weights[n] = -np.inf
            new_particles.append(Particle(layers=p.layers, top=p.top, log_weight=-np.inf))
            continue
        raw_weights[n] = raw
        layers = []
        for l, layer in enumerate(p.layers):
            z = activation_apply(activation, stack2d[l + 1][0])
            layers.append(update_layer_posterior(layer, z, stack2d[l][0], m.sigma_x2))
        top = update_top_posterior(p.top, stack2d[-1][0], m.sigma_x2)
        new_particles.append(Particle(layers=layers, top=top, log_weight=raw))
    if not np.any(np.isfinite(raw_weights)):
        raise DivergenceError("every particle scored a non-finite weight during write")
    norm = log_sum_exp(raw_weights)
    for p in new_particles:
        if np.isfinite(p.log_weight):
            p.log_weight -= norm
    return MemoryState(
        shape=m.shape,
        particles=new_particles,
        priors=m.priors,
        sigma_x2=m.sigma_x2,
        sigma_w2=m.sigma_w2,
        rng_seed=m.rng_seed,
        write_count=m.write_count + 1,
    )


def forget(m: MemoryState, beta: float) -> MemoryState:
    """Diffuse every particle toward its own empty-memory prior.

    beta = 0 returns an equivalent memory untouched; beta = 1 restores the
    initial state exactly.  Importance weights are left unchanged.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    new_particles = []
    for p, prior in zip(m.particles, m.priors):
        if beta == 0.0:
            new_particles.append(Particle(layers=list(p.layers), top=p.top, log_weight=p.log_weight))
            continue
        layers = [
            diffuse_layer(layer, lp, beta) for layer, lp in zip(p.layers, prior.layers)
        ]
        top = diffuse_layer(p.top, prior.top, beta)
        new_particles.append(Particle(layers=layers, top=top, log_weight=p.log_weight))
    return MemoryState(
        shape=m.shape,
        particles=new_particles,
        priors=m.priors,
        sigma_x2=m.sigma_x2,
        sigma_w2=m.sigma_w2,
        rng_seed=m.rng_seed,
        write_count=m.write_count,
    )
