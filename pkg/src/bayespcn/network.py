"""Hierarchical generative network with posterior beliefs over its weights.

The network is a stack of fully connected layers generating top-down: the
top layer's activations are drawn around a bias vector, and each layer
below is predicted from the activated layer above through a linear map.
A `Particle` holds one full-network weight belief plus an importance
weight; a `MemoryState` is a weighted mixture of particles sharing
hyperparameters.  Everything in this module is a pure function of its
inputs, so snapshots can be evaluated concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, logsumexp

from .gaussian import (
    HiddenLayerPosterior,
    LayerPrior,
    TopLayerPosterior,
    layer_predictive_log_density,
    log_sum_exp,
    top_predictive_log_density,
)

ACTIVATIONS = ("relu", "gelu")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def activation_apply(kind: str, v: np.ndarray) -> np.ndarray:
    """Elementwise activation: ReLU, or exact (erf-based) GELU."""
    v = np.asarray(v, dtype=np.float64)
    if kind == "relu":
        return np.maximum(v, 0.0)
    if kind == "gelu":
        return v * 0.5 * (1.0 + erf(v / _SQRT2))
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, v: np.ndarray) -> np.ndarray:
    """Elementwise activation derivative (ReLU' at 0 is taken as 0)."""
    v = np.asarray(v, dtype=np.float64)
    if kind == "relu":
        return (v > 0.0).astype(np.float64)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(v / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return cdf + v * pdf
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class NetworkShape:
    """Layer widths [d_0, ..., d_L] (d_0 = sensory width) plus activation."""

    dims: tuple
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 1 or any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be non-empty positive widths, got {self.dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_weight_layers(self) -> int:
        """Number of hidden weight matrices (the top bias is extra)."""
        return len(self.dims) - 1

    @property
    def total_width(self) -> int:
        return int(sum(self.dims))


@dataclass
class Particle:
    """One full-network weight belief with a log importance weight."""

    layers: list
    top: TopLayerPosterior
    log_weight: float


@dataclass(frozen=True)
class ParticlePrior:
    """The empty-memory belief a particle reverts to under forgetting."""

    layers: tuple
    top: LayerPrior


@dataclass
class MemoryState:
    """Weighted particle mixture plus shared hyperparameters.

    priors[n] records particle n's own initialization; diffusion pulls each
    particle back toward where it started.  rng_seed is the single entropy
    source behind the initialization, so priors can be rebuilt from the
    header of a saved model.
    """

    shape: NetworkShape
    particles: list = field(repr=False)
    priors: list = field(repr=False)
    sigma_x2: float = 1e-4
    sigma_w2: float = 1.0
    rng_seed: int = 0
    write_count: int = 0

    @property
    def n_particles(self) -> int:
        return len(self.particles)

    def log_weights(self) -> np.ndarray:
        return np.array([p.log_weight for p in self.particles])


def init_particle(shape: NetworkShape, sigma_w2: float, seed, n_particles: int = 1) -> Particle:
    """Draw a fresh particle: Kaiming means, isotropic covariance sigma_w2.

    Hidden-layer weight entries are N(0, 2/fan_in) with fan_in the width of
    the upper layer the row vector multiplies; the top bias is N(0, 2/d_L).
    The log weight is -log(n_particles) so a fresh mixture is uniform.
    """
    rng = np.random.default_rng(seed)
    dims = shape.dims
    layers = []
    for l in range(shape.n_weight_layers):
        d_up, d_down = dims[l + 1], dims[l]
        mean = rng.normal(0.0, math.sqrt(2.0 / d_up), size=(d_up, d_down))
        layers.append(HiddenLayerPosterior(mean=mean, row_cov=sigma_w2 * np.eye(d_up)))
    top_mean = rng.normal(0.0, math.sqrt(2.0 / dims[-1]), size=dims[-1])
    top = TopLayerPosterior(mean=top_mean, var=sigma_w2)
    return Particle(layers=layers, top=top, log_weight=-math.log(n_particles))


def particle_prior(p: Particle, sigma_w2: float) -> ParticlePrior:
    """Snapshot a just-initialized particle as its own prior."""
    layers = tuple(LayerPrior(mean=l.mean.copy(), var=sigma_w2) for l in p.layers)
    return ParticlePrior(layers=layers, top=LayerPrior(mean=p.top.mean.copy(), var=sigma_w2))


def build_memory(
    dims,
    activation: str = "gelu",
    n_particles: int = 1,
    sigma_w2: float = 1.0,
    sigma_x2: float = 1e-4,
    seed: int = 0,
) -> MemoryState:
    """Construct an empty memory of N freshly initialized particles.

    Particle n draws from the deterministic stream seeded by [seed, n];
    loading a saved model replays the same streams to rebuild the priors.
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if sigma_w2 <= 0 or sigma_x2 <= 0:
        raise ValueError("sigma_w2 and sigma_x2 must be positive")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    shape = NetworkShape(dims=tuple(dims), activation=activation)
    particles = [
        init_particle(shape, sigma_w2, seed=[seed, n], n_particles=n_particles)
        for n in range(n_particles)
    ]
    priors = [particle_prior(p, sigma_w2) for p in particles]
    return MemoryState(
        shape=shape,
        particles=particles,
        priors=priors,
        sigma_x2=sigma_x2,
        sigma_w2=sigma_w2,
        rng_seed=seed,
    )


# ---------------------------------------------------------------------------
# Activation stacks.  A stack is a list [x^0, ..., x^L] of row vectors, or of
# (B, d_l) matrices when a batch of B datapoints is evaluated at once.
# ---------------------------------------------------------------------------


def zero_stack(shape: NetworkShape, batch: int = 1) -> list:
    return [np.zeros((batch, d)) for d in shape.dims]


def as_batched_stack(stack) -> tuple:
    """Normalize a stack to 2-D arrays; returns (stack2d, was_single)."""
    single = np.asarray(stack[0]).ndim == 1
    out = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in stack]
    return out, single


def flatten_stack(stack2d) -> np.ndarray:
    return np.concatenate(stack2d, axis=1)


def split_flat(flat: np.ndarray, dims) -> list:
    out = []
    start = 0
    for d in dims:
        out.append(flat[:, start : start + d])
        start += d
    return out


def particle_log_joint(p: Particle, stack, sigma_x2: float, activation: str = "gelu"):
    """Log density of a full activation stack under one particle's belief.

    Sums the top layer's predictive log density and each hidden layer's
    predictive log density given the activated layer above.  Accepts a
    single stack (returns float) or a batched stack (returns (B,) array).
    """
    stack2d, single = as_batched_stack(stack)
    n_layers = len(stack2d) - 1
    if n_layers != len(p.layers):
        raise ValueError(f"stack has {n_layers} hidden links, particle has {len(p.layers)}")
    total = top_predictive_log_density(p.top, stack2d[-1], sigma_x2)
    for l in range(n_layers):
        z = activation_apply(activation, stack2d[l + 1])
        total = total + layer_predictive_log_density(p.layers[l], z, stack2d[l], sigma_x2)
    if single:
        return float(np.asarray(total).reshape(-1)[0])
    return np.asarray(total)


def mixture_log_joint(m: MemoryState, stack):
    """Log density of an activation stack under the particle mixture."""
    stack2d, single = as_batched_stack(stack)
    per = np.stack(
        [
            p.log_weight + particle_log_joint(p, stack2d, m.sigma_x2, m.shape.activation)
            for p in m.particles
        ]
    )
    vals = logsumexp(per, axis=0)
    if single:
        return float(np.asarray(vals).reshape(-1)[0])
    return vals


def mixture_value_and_grad(particles, stack2d, sigma_x2: float, activation: str):
    """Batched mixture log joint and its gradient w.r.t. every activation.

    Returns (values, grads) with values shape (B,) and grads a stack-shaped
    list of (B, d_l) arrays.  Per particle and layer the gradient has three
    channels: the direct residual of the predicted layer, the residual
    chained through the activated upper layer, and the dependence of the
    predictive variance on the upper layer.  Particle contributions combine
    under softmax responsibilities, in fixed particle order.
    """
    n_layers = len(stack2d) - 1
    batch = stack2d[0].shape[0]
    n = len(particles)

    act_z = [activation_apply(activation, stack2d[l + 1]) for l in range(n_layers)]
    act_dz = [activation_grad(activation, stack2d[l + 1]) for l in range(n_layers)]

    log_ps = np.empty((n, batch))
    caches = []
    for i, p in enumerate(particles):
        lp = np.zeros(batch)
        per_layer = []
        for l in range(n_layers):
            z = act_z[l]
            zu = z @ p.layers[l].row_cov            # (B, d_out)
            v = sigma_x2 + np.einsum("bi,bi->b", zu, z)
            if np.any(v <= 0):
                raise ValueError("non-positive predictive variance: row covariance lost PSD")
            resid = stack2d[l] - z @ p.layers[l].mean
            sq = np.einsum("bi,bi->b", resid, resid)
            d_in = stack2d[l].shape[1]
            lp += -0.5 * d_in * np.log(2.0 * np.pi * v) - sq / (2.0 * v)
            per_layer.append((zu, v, resid, sq))
        v_top = sigma_x2 + p.top.var
        resid_top = stack2d[-1] - p.top.mean
        sq_top = np.einsum("bi,bi->b", resid_top, resid_top)
        d_top = stack2d[-1].shape[1]
        lp += -0.5 * d_top * math.log(2.0 * math.pi * v_top) - sq_top / (2.0 * v_top)
        log_ps[i] = lp
        caches.append((per_layer, v_top, resid_top))

    weighted = np.array([p.log_weight for p in particles])[:, None] + log_ps
    values = logsumexp(weighted, axis=0)
    resp = np.exp(weighted - values[None, :])       # (n, B) softmax responsibilities

    grads = [np.zeros_like(x) for x in stack2d]
    for i, p in enumerate(particles):
        per_layer, v_top, resid_top = caches[i]
        wi = resp[i][:, None]
        part = [np.zeros_like(x) for x in stack2d]
        for l in range(n_layers):
            zu, v, resid, sq = per_layer[l]
            vcol = v[:, None]
            d_in = stack2d[l].shape[1]
            part[l] += -resid / vcol
            # chain rule through the activated upper layer, including the
            # activation-dependent predictive variance
            gz = (resid @ p.layers[l].mean.T) / vcol
            gz += ((sq / (v * v) - d_in / v))[:, None] * zu
            part[l + 1] += gz * act_dz[l]
        part[-1] += -resid_top / v_top
        for l in range(n_layers + 1):
            grads[l] += wi * part[l]
    return values, grads


def grad_mixture_log_joint(m: MemoryState, stack, free_mask=None):
    """Gradient of the mixture log joint, zeroed on masked activations.

    free_mask may be a flat boolean vector over all activations (in layer
    order), a stack-shaped list of boolean arrays, or None for all-free.
    Returns a stack-shaped gradient matching the input arity.
    """
    stack2d, single = as_batched_stack(stack)
    _, grads = mixture_value_and_grad(m.particles, stack2d, m.sigma_x2, m.shape.activation)
    if free_mask is not None:
        masks = _normalize_mask(free_mask, m.shape.dims)
        grads = [g * mk for g, mk in zip(grads, masks)]
    if single:
        return [g[0] for g in grads]
    return grads


def _normalize_mask(free_mask, dims) -> list:
    if isinstance(free_mask, (list, tuple)):
        return [np.atleast_2d(np.asarray(mk, dtype=np.float64)) for mk in free_mask]
    flat = np.asarray(free_mask, dtype=np.float64)
    flat = np.atleast_2d(flat)
    if flat.shape[1] != sum(dims):
        raise ValueError(f"mask covers {flat.shape[1]} entries, stack has {sum(dims)}")
    return split_flat(flat, dims)


def ancestral_sample(m: MemoryState, rng: np.random.Generator) -> np.ndarray:
    """Draw one sensory vector by sampling the generative model top-down.

    A particle is chosen by its normalized weight; weights are then fixed
    at their posterior means and each layer adds isotropic observation
    noise sigma_x2 on the way down.
    """
    logw = m.log_weights()
    probs = np.exp(logw - log_sum_exp(logw))
    probs = probs / probs.sum()
    idx = int(rng.choice(m.n_particles, p=probs))
    p = m.particles[idx]
    sigma = math.sqrt(m.sigma_x2)
    x = p.top.mean + sigma * rng.standard_normal(m.shape.dims[-1])
    for l in range(m.shape.n_weight_layers - 1, -1, -1):
        z = activation_apply(m.shape.activation, x)
        x = z @ p.layers[l].mean + sigma * rng.standard_normal(m.shape.dims[l])
    return x
