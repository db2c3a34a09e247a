"""Local shrinkage densities, the sigmoid positivity relaxation and IW/IG draws."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

LOG_2_OVER_PI = float(np.log(2.0 / np.pi))


class LocalKind(str, enum.Enum):
    HORSESHOE = "horseshoe"
    NORMAL_GAMMA = "normal_gamma"


@dataclass(frozen=True)
class LocalPrior:
    """Prior on a local scale; ``a`` (shape) and ``b`` (rate) only matter for normal-gamma."""

    kind: LocalKind = LocalKind.HORSESHOE
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LocalKind(self.kind))
        if self.kind is LocalKind.NORMAL_GAMMA and (self.a <= 0 or self.b <= 0):
            raise ValueError("normal-gamma prior needs a > 0 and b > 0")


def local_log_kernel(prior: LocalPrior, lam):
    """Log density evaluated at ``|lam|``; ``-inf`` at exactly zero.

    The relaxed lambda conditional has full support on the real line, so the
    samplers evaluate the (symmetric) kernel and let the sigmoid term carry
    the positivity penalty.
    """
    lam = np.asarray(lam, dtype=float)
    if prior.kind is LocalKind.HORSESHOE:
        return LOG_2_OVER_PI - np.log1p(lam * lam)
    a, b = prior.a, prior.b
    with np.errstate(divide="ignore"):
        out = (np.log(2.0) + a * np.log(b) - gammaln(a)
               + (2 * a - 1) * np.log(np.abs(lam)) - b * lam * lam)
    # exact zero is a null set; excluding it keeps a pole at 0 from trapping the slice sampler
    return np.where(lam == 0.0, -np.inf, out)


def local_log_density(prior: LocalPrior, lam):
    """Log of the local-scale density on ``(0, inf)``.

    Horseshoe: ``(2/pi) / (1 + lam^2)``; normal-gamma:
    ``2 b^a / Gamma(a) * lam^(2a-1) * exp(-b lam^2)``.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("local scale must be strictly positive")
    out = local_log_kernel(prior, lam)
    return float(out) if out.ndim == 0 else out


def log_sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = -np.log1p(np.exp(-x[pos]))
    xn = x[~pos]
    out[~pos] = xn - np.log1p(np.exp(xn))
    return out


def relaxed_constraint_log(eta: float, lambda_vec):
    """``sum_j log sigmoid(eta * lam_j)`` over the last axis."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    out = log_sigmoid(eta * np.asarray(lambda_vec, dtype=float)).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def relaxed_log_target(prior: LocalPrior, eta: float):
    """Vectorized ``lam -> log pi*(lam)`` over the last axis, for the slice sampler."""

    def log_target(lam):
        lam = np.asarray(lam, dtype=float)
        return np.sum(local_log_kernel(prior, lam) + log_sigmoid(eta * lam), axis=-1)

    return log_target


def sample_relaxed_local(rng: np.random.Generator, prior: LocalPrior, eta: float, size) -> np.ndarray:
    """Exact draws from the normalized relaxed prior ``pi(|lam|) sigmoid(eta lam)``.

    Since ``sigmoid(t) + sigmoid(-t) = 1`` the relaxed density is the symmetric
    kernel with a random sign that is positive with probability ``sigmoid(eta |lam|)``.
    """
    if prior.kind is LocalKind.HORSESHOE:
        mag = np.abs(rng.standard_cauchy(size))
    else:
        # Ga(a) = Ga(a + 1) U^(1/a) in log space; small shapes underflow otherwise
        log_g = np.log(rng.gamma(prior.a + 1.0, 1.0 / prior.b, size)) + np.log(rng.random(size)) / prior.a
        mag = np.maximum(np.exp(0.5 * log_g), np.finfo(float).tiny)
    p_pos = np.exp(log_sigmoid(eta * mag))
    return np.where(rng.random(size) < p_pos, mag, -mag)


def inverse_gamma_sample(rng: np.random.Generator, shape, rate, size=None):
    """Draw from IG(shape, rate), density proportional to ``x^(-shape-1) exp(-rate/x)``."""
    if np.any(np.asarray(rate) <= 0) or np.any(np.asarray(shape) <= 0):
        raise ValueError("inverse-gamma parameters must be positive")
    if size is None:
        # one independent variate per parameter entry
        size = np.broadcast(np.asarray(shape), np.asarray(rate)).shape or None
    return rate / rng.gamma(shape, 1.0, size)


def inverse_wishart_sample(rng: np.random.Generator, nu: float, scale) -> np.ndarray:
    """Draw ``Sigma ~ IW(nu, scale)`` through the Bartlett factor of ``Sigma^{-1}``.

    With ``scale = C C'`` and Bartlett factor ``A`` of ``Wishart(nu, I)``,
    ``Sigma^{-1} = C^{-T} A A' C^{-1}`` so ``Sigma = (C A^{-T})(C A^{-T})'``.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    k = scale.shape[0]
    if nu <= k - 1:
        raise ValueError(f"inverse-Wishart needs nu > k - 1 (nu={nu}, k={k})")
    try:
        C = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError:
        raise ValueError("inverse-Wishart scale is not positive definite") from None
    A = np.zeros((k, k))
    A[np.diag_indices(k)] = np.sqrt(rng.chisquare(nu - np.arange(k)))
    if k > 1:
        A[np.tril_indices(k, -1)] = rng.standard_normal(k * (k - 1) // 2)
    G = solve_triangular(A, C.T, lower=True).T  # C A^{-T}
    out = G @ G.T
    return 0.5 * (out + out.T)
