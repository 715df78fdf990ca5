"""Closed-form linear-Gaussian machinery for a single network layer.

Each hidden layer's weight matrix carries a matrix-normal belief with a
shared row covariance and identity column covariance; the top layer's bias
carries an isotropic normal belief.  Because observations arrive one row at
a time, every conjugate update is rank-1 and needs no matrix inversion.
All operations here are pure: they return new posterior objects and never
touch their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Guards the degenerate regime where the predictive variance collapses.
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class HiddenLayerPosterior:
    """Matrix-normal belief over one hidden layer's weights.

    mean    : (d_out, d_in) posterior mean of the weight matrix.
    row_cov : (d_out, d_out) symmetric PSD row covariance; the column
              covariance is fixed to the identity throughout.

    d_out is the width of the upper layer feeding this one (the side the
    activation row vector multiplies), d_in the width of the predicted layer.
    """

    mean: np.ndarray
    row_cov: np.ndarray

    @property
    def d_out(self) -> int:
        return self.mean.shape[0]

    @property
    def d_in(self) -> int:
        return self.mean.shape[1]


@dataclass(frozen=True)
class TopLayerPosterior:
    """Isotropic normal belief over the top-layer bias.

    Conjugate updates and diffusion both preserve isotropy exactly, so a
    single variance scalar is lossless (var may be 0 for point weights).
    """

    mean: np.ndarray
    var: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class LayerPrior:
    """Empty-memory belief a layer reverts to under diffusion.

    mean : the layer's initial weight draw (matrix for hidden layers,
           vector for the top bias).
    var  : prior covariance scale; the hidden-layer prior row covariance
           is var * I and the top-layer prior variance is var.
    """

    mean: np.ndarray
    var: float


def _check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} contains non-finite entries")


def update_layer_posterior(
    post: HiddenLayerPosterior,
    z: np.ndarray,
    x: np.ndarray,
    sigma_x2: float,
) -> HiddenLayerPosterior:
    """Condition a hidden layer's belief on one (input row, output row) pair.

    Observing x = z W + noise with isotropic noise variance sigma_x2 gives
    the rank-1 update

        mean'    = mean + row_cov z^T (x - z mean) / c
        row_cov' = row_cov - (row_cov z^T)(z row_cov) / c

    with scalar c = z row_cov z^T + sigma_x2.  The returned row covariance
    is re-symmetrized to suppress floating-point drift.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if z.shape[0] != post.d_out or x.shape[0] != post.d_in:
        raise ValueError(
            f"expected z of length {post.d_out} and x of length {post.d_in}, "
            f"got {z.shape[0]} and {x.shape[0]}"
        )
    _check_finite("z", z)
    _check_finite("x", x)
    if sigma_x2 <= 0:
        raise ValueError("sigma_x2 must be positive")

    uz = post.row_cov @ z
    c = max(float(z @ uz), 0.0) + sigma_x2
    c = max(c, VARIANCE_FLOOR)
    residual = x - z @ post.mean
    mean = post.mean + np.outer(uz, residual) / c
    row_cov = post.row_cov - np.outer(uz, uz) / c
    row_cov = 0.5 * (row_cov + row_cov.T)
    return HiddenLayerPosterior(mean=mean, row_cov=row_cov)


def update_top_posterior(
    post: TopLayerPosterior, xL: np.ndarray, sigma_x2: float
) -> TopLayerPosterior:
    """Condition the top-layer bias belief on one observed top activation."""
    xL = np.asarray(xL, dtype=np.float64).reshape(-1)
    if xL.shape[0] != post.dim:
        raise ValueError(f"expected vector of length {post.dim}, got {xL.shape[0]}")
    _check_finite("xL", xL)
    if sigma_x2 <= 0:
        raise ValueError("sigma_x2 must be positive")

    var = 1.0 / (1.0 / max(post.var, VARIANCE_FLOOR) + 1.0 / sigma_x2)
    mean = var * (post.mean / max(post.var, VARIANCE_FLOOR) + xL / sigma_x2)
    return TopLayerPosterior(mean=mean, var=var)


def diffuse_layer(post, prior: LayerPrior, beta: float):
    """Blend a layer posterior toward its prior with strength beta in [0, 1].

    Means contract by sqrt(1 - beta) toward the prior mean; covariances mix
    linearly, (1 - beta) * current + beta * prior.  beta = 0 is the identity
    and beta = 1 restores the prior exactly.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    root = math.sqrt(1.0 - beta)
    mean = root * post.mean + (1.0 - root) * prior.mean
    if isinstance(post, HiddenLayerPosterior):
        eye = np.eye(post.d_out)
        row_cov = (1.0 - beta) * post.row_cov + beta * prior.var * eye
        return HiddenLayerPosterior(mean=mean, row_cov=row_cov)
    if isinstance(post, TopLayerPosterior):
        var = (1.0 - beta) * post.var + beta * prior.var
        return TopLayerPosterior(mean=mean, var=var)
    raise TypeError(f"cannot diffuse object of type {type(post).__name__}")


def layer_predictive_log_density(
    post: HiddenLayerPosterior,
    z: np.ndarray,
    x: np.ndarray,
    sigma_x2: float,
):
    """Log density of x under the layer's posterior-predictive distribution.

    Marginalizing the weights gives x ~ N(z mean, v I) with the scalar
    predictive variance v = sigma_x2 + z row_cov z^T.  Accepts a single row
    (returns float) or a (B, d) batch (returns shape-(B,) array).
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    x2 = np.atleast_2d(x)
    if z2.shape[1] != post.d_out or x2.shape[1] != post.d_in:
        raise ValueError(
            f"expected rows of width {post.d_out} and {post.d_in}, "
            f"got {z2.shape[1]} and {x2.shape[1]}"
        )
    if sigma_x2 <= 0:
        raise ValueError("sigma_x2 must be positive")

    v = sigma_x2 + np.einsum("bi,ij,bj->b", z2, post.row_cov, z2)
    if np.any(v <= 0):
        raise ValueError("non-positive predictive variance: row covariance lost PSD")
    resid = x2 - z2 @ post.mean
    out = -0.5 * post.d_in * np.log(2.0 * np.pi * v)
    out -= np.einsum("bi,bi->b", resid, resid) / (2.0 * v)
    return float(out[0]) if single else out


def top_predictive_log_density(post: TopLayerPosterior, xL: np.ndarray, sigma_x2: float):
    """Log density of the top activation under its posterior-predictive."""
    xL = np.asarray(xL, dtype=np.float64)
    single = xL.ndim == 1
    x2 = np.atleast_2d(xL)
    if x2.shape[1] != post.dim:
        raise ValueError(f"expected rows of width {post.dim}, got {x2.shape[1]}")
    if sigma_x2 <= 0:
        raise ValueError("sigma_x2 must be positive")

    v = sigma_x2 + post.var
    if v <= 0:
        raise ValueError("non-positive predictive variance at the top layer")
    resid = x2 - post.mean
    out = -0.5 * post.dim * np.log(2.0 * np.pi * v)
    out -= np.einsum("bi,bi->b", resid, resid) / (2.0 * v)
    return float(out[0]) if single else out


def log_sum_exp(values) -> float:
    """log(sum(exp(values))) computed with a max shift.

    Tolerates -inf entries (zero-probability terms) but requires at least
    one finite value; exact for singletons.
    """
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("log_sum_exp of an empty collection")
    hi = float(np.max(arr))
    if not np.isfinite(hi):
        if hi == -np.inf:
            raise ValueError("log_sum_exp needs at least one finite value")
        raise ValueError("log_sum_exp received a non-finite value")
    return hi + math.log(float(np.sum(np.exp(arr - hi))))
