"""Model comparison and chain-quality summaries."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import AreaDataset, PosteriorDraws, SpatialStructure


class DegenerateChainWarning(UserWarning):
    pass


@dataclass
class FitSummary:
    theta_mean: np.ndarray
    theta_q025: np.ndarray
    theta_q975: np.ndarray
    u_mean: np.ndarray
    dic: float
    p_d: float
    mean_ess: float
    rho_posterior: np.ndarray
    rho_grid: np.ndarray
    lam_mean: np.ndarray | None = None
    beta_mean: np.ndarray | None = None


def deviance(theta: np.ndarray, data: AreaDataset) -> np.ndarray:
    """``sum_i (y_i - theta_i)' V_i^{-1} (y_i - theta_i)``; ``theta`` is ``(..., m, k)``."""
    r = data.y - theta
    return np.einsum("...ik,ikl,...il->...", r, data.V_inv, r)


def compute_dic(draws: PosteriorDraws | np.ndarray, data: AreaDataset) -> tuple[float, float]:
    """Return ``(DIC, p_D)`` with the posterior-mean plug-in."""
    theta = draws.theta if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    d_bar = float(np.mean(deviance(theta, data)))
    d_hat = float(deviance(theta.mean(axis=0), data))
    return 2.0 * d_bar - d_hat, d_bar - d_hat


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Biased sample autocorrelation at all lags, via FFT."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def effective_sample_size(chain) -> float:
    """Initial-positive-sequence ESS, clipped to ``(0, S]``.

    Autocorrelations are summed in consecutive pairs until the first pair
    whose sum is not positive. A constant chain returns ``S`` and emits a
    :class:`DegenerateChainWarning`.
    """
    x = np.asarray(chain, dtype=float).ravel()
    n = len(x)
    if n < 10:
        raise ValueError("effective sample size needs at least 10 draws")
    if np.ptp(x) == 0 or np.var(x) <= 1e-300:
        warnings.warn("constant chain: variance is degenerate", DegenerateChainWarning, stacklevel=2)
        return float(n)
    rho = autocorrelation(x)
    n_pairs = n // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    nonpos = np.flatnonzero(pairs <= 0)
    stop = nonpos[0] if len(nonpos) else n_pairs
    tau = -1.0 + 2.0 * float(np.sum(pairs[:stop]))
    if tau <= 0:
        return float(n)
    return float(min(n / tau, n))


def morans_i(values, structure: SpatialStructure) -> float:
    """Moran's I with the binary adjacency as weights."""
    x = np.asarray(values, dtype=float).ravel()
    m = len(x)
    if m != structure.m:
        raise ValueError(f"{m} values for a structure with {structure.m} areas")
    if m < 3:
        raise ValueError("Moran's I needs at least 3 areas")
    z = x - x.mean()
    ss = float(z @ z)
    if ss <= 1e-300 * max(1.0, float(x @ x)) or np.ptp(x) == 0:
        raise ValueError("Moran's I is undefined for a constant field")
    W = structure.W
    s0 = float(W.sum())
    return (m / s0) * float(z @ (W @ z)) / ss


def summarize_fit(draws: PosteriorDraws, data: AreaDataset) -> FitSummary:
    theta = draws.theta
    q025, q975 = np.quantile(theta, [0.025, 0.975], axis=0)
    dic, p_d = compute_dic(draws, data)
    if theta.shape[0] >= 10:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateChainWarning)
            ess = [effective_sample_size(theta[:, i, j]) for i in range(data.m) for j in range(data.k)]
        mean_ess = float(np.mean(ess))
    else:
        mean_ess = float(theta.shape[0])
    grid = draws.rho_grid if draws.rho_grid is not None else np.unique(draws.hyper["rho"])
    rho = draws.hyper["rho"]
    idx = np.abs(rho[:, None] - grid[None, :]).argmin(axis=1)
    rho_post = np.bincount(idx, minlength=len(grid)) / len(rho)
    return FitSummary(
        theta_mean=theta.mean(axis=0), theta_q025=q025, theta_q975=q975,
        u_mean=theta.mean(axis=0) - data.X @ draws.beta.mean(axis=0),
        dic=dic, p_d=p_d, mean_ess=mean_ess, rho_posterior=rho_post, rho_grid=np.asarray(grid),
        lam_mean=None if draws.lam is None else draws.lam.mean(axis=0),
        beta_mean=draws.beta.mean(axis=0),
    )
