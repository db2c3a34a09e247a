"""Gibbs sampler for the multivariate (spatial) Fay-Herriot family.

One sweep updates, in order: regression coefficients, the transformed random
effects (single-site Gauss-Seidel over areas), the cross-response covariance,
the spatial dependence (spatial variants), the local scales (shrinkage
variants) and finally the global parameters (``tau2``/``psi`` for SpaHS,
``a``/``b`` for SpaGa).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln

from .model import (
    AreaDataset,
    ChainState,
    ModelError,
    ModelSpec,
    PosteriorDraws,
    SpatialStructure,
    Variant,
    assemble_theta,
    cholesky_jitter,
    structure_quad_parts,
)
from .priors import (
    LocalKind,
    LocalPrior,
    inverse_gamma_sample,
    inverse_wishart_sample,
    relaxed_log_target,
    sample_relaxed_local,
)

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
U_TILDE_CLAMP = 1e-12
BRACKET_MIN = 1e-12
# shape of the conditional of the half-Cauchy mixing variable
PSI_SHAPE = 1.0


class ChainError(RuntimeError):
    """Hard failure inside a chain; carries the iteration index."""

    def __init__(self, iteration: int, cause: BaseException):
        super().__init__(f"chain failed at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


@dataclass(frozen=True)
class ChainConfig:
    n_total: int = 2000
    n_burnin: int = 500
    thin: int = 1
    store_u: bool = True

    def __post_init__(self):
        if self.n_total < 1 or self.n_burnin < 0 or self.n_burnin >= self.n_total:
            raise ModelError("need 0 <= n_burnin < n_total")
        if self.thin < 1:
            raise ModelError("thin must be >= 1")

    @property
    def n_kept(self) -> int:
        return len(range(self.n_burnin, self.n_total, self.thin))


@dataclass
class EssTarget:
    """Gaussian factor ``N(mu, omega)`` times ``exp(log_target)`` for one area.

    ``log_target`` must accept arrays with the coordinates on the last axis.
    """

    mu: np.ndarray
    omega: np.ndarray
    log_target: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        try:
            self.omega_chol = np.linalg.cholesky(self.omega)
        except np.linalg.LinAlgError:
            raise ModelError("ESS covariance is not positive definite") from None


class Workspace:
    """Quantities that stay fixed for a (dataset, structure, spec) triple."""

    def __init__(self, data: AreaDataset, structure: SpatialStructure, spec: ModelSpec):
        self.data = data
        self.structure = structure
        self.spec = spec

    @cached_property
    def XtVinv(self) -> np.ndarray:
        return np.einsum("iks,ikl->isl", self.data.X, self.data.V_inv)

    @cached_property
    def beta_precision_chol(self) -> np.ndarray:
        P = np.einsum("isk,ikt->st", self.XtVinv, self.data.X)
        if self.spec.beta_prior_var is not None:
            P = P + np.eye(self.data.s) / self.spec.beta_prior_var
        try:
            return np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise ModelError("X' V^-1 X is singular") from None

    @cached_property
    def rho_logdet(self) -> np.ndarray:
        return 0.5 * self.data.k * self.structure.log1m_rho_gamma(self.spec.rho_grid)


def effective_structure(variant: Variant, structure: SpatialStructure | None, m: int) -> SpatialStructure:
    """Non-spatial variants always use ``W = 0``, ``D = I``."""
    if not variant.spatial:
        return SpatialStructure.independent(m)
    if structure is None or structure.independent:
        raise ModelError(f"variant {variant.value} needs a spatial adjacency structure")
    if structure.m != m:
        raise ModelError(f"structure has {structure.m} areas but the dataset has {m}")
    return structure


def _categorical(rng: np.random.Generator, log_w: np.ndarray) -> int:
    w = np.exp(log_w - np.max(log_w))
    c = np.cumsum(w)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right"))


# -- regression coefficients ---------------------------------------------------

def sample_beta(rng, state: ChainState, data: AreaDataset, spec: ModelSpec | None = None,
                ws: Workspace | None = None) -> np.ndarray:
    """Draw beta from ``N(m, (X' V^-1 X)^-1)`` with ``m`` the GLS fit to ``y - Lambda u~``."""
    ws = ws if ws is not None else Workspace(data, None, spec if spec is not None else ModelSpec())
    z = data.y - state.lam * state.u_tilde
    rhs = np.einsum("isk,ik->s", ws.XtVinv, z)
    L = ws.beta_precision_chol
    mean = cho_solve((L, True), rhs)
    return mean + solve_triangular(L, rng.standard_normal(data.s), lower=True, trans="T")


def beta_conditional(state: ChainState, data: AreaDataset, spec: ModelSpec | None = None):
    """Mean and covariance of the beta conditional (for checks)."""
    ws = Workspace(data, None, spec if spec is not None else ModelSpec())
    z = data.y - state.lam * state.u_tilde
    L = ws.beta_precision_chol
    cov = cho_solve((L, True), np.eye(data.s))
    return cov @ np.einsum("isk,ik->s", ws.XtVinv, z), cov


# -- transformed random effects ------------------------------------------------

def u_tilde_conditional(i: int, state: ChainState, data: AreaDataset, structure: SpatialStructure):
    """Precision ``A`` and linear term ``b`` of the conditional of ``u~_i``."""
    lam = state.lam[i]
    Vinv = data.V_inv[i]
    w = structure.degree[i]
    sigma_inv = np.linalg.inv(state.sigma)
    nb_sum = state.u_tilde[structure.neighbors[i]].sum(axis=0)
    mu_car = state.rho * nb_sum / w
    car_prec = (w / state.tau2) * sigma_inv
    xi = data.y[i] - data.X[i] @ state.beta
    A = lam[:, None] * Vinv * lam[None, :] + car_prec
    b = lam * (Vinv @ xi) + car_prec @ mu_car
    return A, b


def sample_u_tilde_area(rng, i: int, state: ChainState, data: AreaDataset,
                        structure: SpatialStructure) -> np.ndarray:
    """Draw ``u~_i ~ N(A^-1 b, A^-1)`` given the current neighbour values."""
    A, b = u_tilde_conditional(i, state, data, structure)
    L = cholesky_jitter(A, f"u~ precision of area {i}")
    mean = cho_solve((L, True), b)
    return mean + solve_triangular(L, rng.standard_normal(data.k), lower=True, trans="T")


def sweep_u_tilde(rng, state: ChainState, data: AreaDataset, structure: SpatialStructure,
                  normals: np.ndarray | None = None) -> np.ndarray:
    """Gauss-Seidel sweep over all areas; returns the new ``(m, k)`` array.

    Everything in the per-area conditional except the neighbour sum is batched
    up front, so that area ``i`` reduces to ``u~_i = r_i + M_i sum_{j~i} u~_j``
    with ``r_i`` already carrying the Gaussian noise.
    """
    m, k = data.m, data.k
    if normals is None:
        normals = rng.standard_normal((m, k))
    sigma_inv = np.linalg.inv(state.sigma)
    sigma_inv = 0.5 * (sigma_inv + sigma_inv.T)
    lam = state.lam
    w = structure.degree
    A = lam[:, :, None] * data.V_inv * lam[:, None, :] + (w / state.tau2)[:, None, None] * sigma_inv
    L = cholesky_jitter(A, "u~ precision")
    Linv = np.linalg.inv(L)
    LinvT = np.swapaxes(Linv, 1, 2)
    Ainv = LinvT @ Linv
    xi = data.y - data.X @ state.beta
    c = lam * np.einsum("ikl,il->ik", data.V_inv, xi)
    r = np.einsum("ikl,il->ik", Ainv, c) + np.einsum("ikl,il->ik", LinvT, normals)
    if structure.independent or state.rho == 0.0:
        return r
    M = (state.rho / state.tau2) * (Ainv @ sigma_inv)
    U = state.u_tilde.copy()
    nbrs = structure.neighbors
    for i in range(m):
        U[i] = r[i] + M[i] @ U[nbrs[i]].sum(axis=0)
    return U


# -- covariance and spatial dependence ----------------------------------------

def spatial_scatter(U: np.ndarray, structure: SpatialStructure, rho: float) -> np.ndarray:
    """``U' (D - rho W) U`` for ``U`` stored as ``(m, k)`` (sparse neighbour sums)."""
    if structure.independent:
        return U.T @ U
    S = (U * structure.degree[:, None]).T @ U - rho * (U.T @ (structure.W @ U))
    return 0.5 * (S + S.T)


def sample_sigma(rng, state: ChainState, structure: SpatialStructure, spec: ModelSpec) -> np.ndarray:
    """Draw Sigma from ``IW(m + nu0, B + tau^-2 U~ (D - rho W) U~')``."""
    m, k = state.u_tilde.shape
    spec = spec.resolved(k)
    scale = spec.B + spatial_scatter(state.u_tilde, structure, state.rho) / state.tau2
    try:
        return inverse_wishart_sample(rng, m + spec.nu0, scale)
    except ValueError as exc:
        raise ModelError(f"Sigma update has a non-SPD scale: {exc}") from None


def rho_log_weights(state: ChainState, structure: SpatialStructure, spec: ModelSpec,
                    ws: Workspace | None = None) -> np.ndarray:
    """Unnormalized log conditional of rho at every grid point."""
    k = state.u_tilde.shape[1]
    grid = spec.rho_grid
    logdet = ws.rho_logdet if ws is not None else 0.5 * k * structure.log1m_rho_gamma(grid)
    q0, qw = structure_quad_parts(state.u_tilde, np.linalg.inv(state.sigma), structure)
    return logdet - 0.5 * (q0 - grid * qw) / state.tau2


def sample_rho(rng, state: ChainState, structure: SpatialStructure, spec: ModelSpec,
               ws: Workspace | None = None) -> float:
    grid = spec.rho_grid
    return float(grid[_categorical(rng, rho_log_weights(state, structure, spec, ws))])


# -- local scales ----------------------------------------------------------------

def _ess_batch(rng, mu: np.ndarray, zeta: np.ndarray, current: np.ndarray,
               log_target) -> np.ndarray:
    """One elliptical-slice transition for each row, started at a random angle.

    The current point sits at angle ``theta`` on the ellipse
    ``mu + v0 sin(t) + v1 cos(t)`` and the bracket starts as ``[0, 2 pi]``,
    shrinking towards ``theta`` after every rejection.
    """
    n = mu.shape[0]
    theta = rng.uniform(0.0, TWO_PI, n)
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    delta = current - mu
    v0 = delta * st + zeta * ct
    v1 = delta * ct - zeta * st
    log_ell = log_target(current) + np.log(rng.random(n))
    lo = np.zeros(n)
    hi = np.full(n, TWO_PI)
    out = current.copy()
    active = np.arange(n)
    while active.size:
        t = rng.uniform(lo[active], hi[active])
        prop = mu[active] + v0[active] * np.sin(t)[:, None] + v1[active] * np.cos(t)[:, None]
        ok = log_target(prop) > log_ell[active]
        out[active[ok]] = prop[ok]
        rej, t = active[~ok], t[~ok]
        below = t < theta[rej]
        lo[rej[below]] = t[below]
        hi[rej[~below]] = t[~below]
        collapsed = (hi[rej] - lo[rej]) < BRACKET_MIN
        if np.any(collapsed):
            logger.debug("slice bracket collapsed for %d row(s); keeping current value",
                           int(collapsed.sum()))
        active = rej[~collapsed]
    return out


def ess_sample_lambda(rng, target: EssTarget, current) -> np.ndarray:
    """One elliptical-slice update of a single area's local scales."""
    current = np.atleast_1d(np.asarray(current, dtype=float))
    zeta = target.omega_chol @ rng.standard_normal(current.shape[0])
    return _ess_batch(rng, target.mu[None, :], zeta[None, :], current[None, :],
                      target.log_target)[0]


def lambda_targets(state: ChainState, data: AreaDataset):
    """``mu_lambda`` for every area and the clamped ``u~`` used to scale ``Omega_lambda``.

    ``Omega_lambda_i = diag(1/u~_i) V_i diag(1/u~_i)``, so a draw from it is
    ``(chol(V_i) z) / u~_i``.
    """
    ut = state.u_tilde
    clamped = np.where(np.abs(ut) < U_TILDE_CLAMP, np.where(ut < 0, -U_TILDE_CLAMP, U_TILDE_CLAMP), ut)
    xi = data.y - data.X @ state.beta
    return xi / clamped, clamped


def local_prior(state: ChainState, spec: ModelSpec) -> LocalPrior:
    if spec.variant is Variant.SPAGA:
        return LocalPrior(LocalKind.NORMAL_GAMMA, a=state.a, b=state.b)
    return LocalPrior(LocalKind.HORSESHOE)


def sample_lambda_ess(rng, state: ChainState, data: AreaDataset, spec: ModelSpec) -> np.ndarray:
    """Elliptical-slice update of every area's local scales (areas are conditionally independent)."""
    mu, clamped = lambda_targets(state, data)
    zeta = np.einsum("ikl,il->ik", data.V_chol, rng.standard_normal(mu.shape)) / clamped
    log_target = relaxed_log_target(local_prior(state, spec), spec.eta)
    return _ess_batch(rng, mu, zeta, state.lam, log_target)


def sample_lambda_area_hs(rng, state: ChainState):
    """Area-level half-Cauchy scales via the inverse-gamma augmentation.

    Updates ``lambda_i`` given ``u_i = lambda_i u~_i`` held fixed and returns
    ``(lam, lam_aux, u_tilde)`` with ``u~`` rescaled to keep ``u`` unchanged.
    """
    m, k = state.u_tilde.shape
    lam_i = state.lam[:, 0]
    aux = state.lam_aux if state.lam_aux is not None else np.ones(m)
    u = lam_i[:, None] * state.u_tilde
    q = np.einsum("ik,kl,il->i", u, np.linalg.inv(state.sigma), u)
    lam2 = inverse_gamma_sample(rng, 0.5 * (k + 1), 0.5 * q + 1.0 / aux)
    aux = inverse_gamma_sample(rng, PSI_SHAPE, 1.0 + 1.0 / lam2)
    new = np.sqrt(lam2)
    return np.repeat(new[:, None], k, axis=1), aux, u / new[:, None]


# -- global parameters ----------------------------------------------------------

def sample_tau2_hs(rng, state: ChainState, structure: SpatialStructure) -> tuple[float, float]:
    """``tau2 ~ IG((mk+1)/2, q/2 + 1/psi)`` then ``psi ~ IG(1, 1/tau2 + 1)``.

    The psi shape is 1: ``psi^(-1/2) exp(-1/(psi tau2))`` from the tau2 density
    times the ``IG(1/2, 1)`` prior gives ``psi^(-2) exp(-(1 + 1/tau2)/psi)``.
    """
    m, k = state.u_tilde.shape
    q0, qw = structure_quad_parts(state.u_tilde, np.linalg.inv(state.sigma), structure)
    q = max(q0 - state.rho * qw, 0.0)
    tau2 = float(inverse_gamma_sample(rng, 0.5 * (m * k + 1), 0.5 * q + 1.0 / state.psi))
    psi = float(inverse_gamma_sample(rng, PSI_SHAPE, 1.0 / tau2 + 1.0))
    return tau2, psi


def a_log_weights(state: ChainState, spec: ModelSpec) -> np.ndarray:
    n = state.lam.size
    grid = spec.a_grid
    sum_log = float(np.sum(np.log(np.abs(state.lam))))
    return n * (grid * np.log(state.b) - gammaln(grid)) + (2 * grid - 1) * sum_log


def sample_ng_hypers(rng, state: ChainState, spec: ModelSpec) -> tuple[float, float]:
    """``b ~ Ga(a mk + c, sum lam^2 + d)`` then ``a`` on its grid given the new ``b``."""
    n = state.lam.size
    rate = float(np.sum(state.lam ** 2)) + spec.ng_d
    b = float(rng.gamma(state.a * n + spec.ng_c, 1.0 / rate))
    tmp = ChainState(state.beta, state.u_tilde, state.lam, state.sigma, b=b, a=state.a)
    a = float(spec.a_grid[_categorical(rng, a_log_weights(tmp, spec))])
    return a, b


# -- driver ---------------------------------------------------------------------

def initial_state(rng, data: AreaDataset, structure: SpatialStructure, spec: ModelSpec) -> ChainState:
    m, k = data.m, data.k
    ws = Workspace(data, structure, spec)
    L = ws.beta_precision_chol
    beta = cho_solve((L, True), np.einsum("isk,ik->s", ws.XtVinv, data.y))
    u_tilde = rng.standard_normal((m, k)) / np.sqrt(structure.degree)[:, None]
    grid = spec.rho_grid
    rho = float(grid[len(grid) // 2]) if spec.variant.spatial else 0.0
    return ChainState(beta=beta, u_tilde=u_tilde, lam=np.ones((m, k)), sigma=np.eye(k),
                      rho=rho, tau2=1.0, psi=1.0, a=0.5, b=1.0,
                      lam_aux=np.ones(m) if spec.variant is Variant.HS else None)


def gibbs_step(rng, state: ChainState, data: AreaDataset, structure: SpatialStructure,
               spec: ModelSpec, ws: Workspace | None = None) -> ChainState:
    """One full sweep; mutates and returns ``state``."""
    v = spec.variant
    fixed = spec.fixed
    if structure is None or structure.independent != (not v.spatial):
        structure = effective_structure(v, structure, data.m)
    if ws is None:
        ws = Workspace(data, structure, spec)
    if "beta" not in fixed:
        state.beta = sample_beta(rng, state, data, spec, ws)
    if "u_tilde" not in fixed:
        state.u_tilde = sweep_u_tilde(rng, state, data, structure)
    if "sigma" not in fixed:
        state.sigma = sample_sigma(rng, state, structure, spec)
    if v.spatial and "rho" not in fixed:
        state.rho = sample_rho(rng, state, structure, spec, ws)
    if v.shrinkage and "lambda" not in fixed:
        if v is Variant.HS:
            state.lam, state.lam_aux, state.u_tilde = sample_lambda_area_hs(rng, state)
        else:
            state.lam = sample_lambda_ess(rng, state, data, spec)
    if v is Variant.SPAHS and "tau2" not in fixed:
        state.tau2, state.psi = sample_tau2_hs(rng, state, structure)
    if v is Variant.SPAGA and "ng" not in fixed:
        state.a, state.b = sample_ng_hypers(rng, state, spec)
    return state


def run_chain(rng, data: AreaDataset, structure: SpatialStructure | None, spec: ModelSpec,
              config: ChainConfig, state: ChainState | None = None) -> PosteriorDraws:
    """Run one chain and keep the post burn-in draws.

    ``rng`` may be a Generator or anything accepted by ``np.random.default_rng``.
    """
    rng = np.random.default_rng(rng)
    spec = spec.resolved(data.k)
    structure = effective_structure(spec.variant, structure, data.m)
    ws = Workspace(data, structure, spec)
    if state is None:
        state = initial_state(rng, data, structure, spec)
    m, k, s = data.m, data.k, data.s
    n = config.n_kept
    theta = np.empty((n, m, k))
    beta = np.empty((n, s))
    hyper = {name: np.empty(n) for name in ("rho", "tau2", "psi", "a", "b")}
    hyper["sigma"] = np.empty((n, k, k))
    comps = {name: np.empty((n, m, k)) for name in ("u", "u_tilde", "lam")} if config.store_u else {}
    j = 0
    for it in range(config.n_total):
        try:
            gibbs_step(rng, state, data, structure, spec, ws)
        except (np.linalg.LinAlgError, ModelError, FloatingPointError, ValueError) as exc:
            raise ChainError(it, exc) from exc
        if it >= config.n_burnin and (it - config.n_burnin) % config.thin == 0:
            theta[j] = assemble_theta(state, data)
            beta[j] = state.beta
            for name in ("rho", "tau2", "psi", "a", "b"):
                hyper[name][j] = getattr(state, name)
            hyper["sigma"][j] = state.sigma
            if config.store_u:
                comps["u_tilde"][j] = state.u_tilde
                comps["lam"][j] = state.lam
                comps["u"][j] = state.lam * state.u_tilde
            j += 1
    return PosteriorDraws(theta=theta, beta=beta, hyper=hyper, n_burnin=config.n_burnin,
                          n_total=config.n_total, thin=config.thin, variant=spec.variant,
                          rho_grid=np.asarray(spec.rho_grid), **comps)


def draw_from_prior(rng, data: AreaDataset, structure: SpatialStructure, spec: ModelSpec):
    """Forward draw of all parameters and a fresh ``y`` (needs a proper beta prior).

    Returns ``(state, y)``. The local scales come from the relaxed prior the
    sampler actually targets.
    """
    spec = spec.resolved(data.k)
    if spec.beta_prior_var is None:
        raise ModelError("forward simulation needs a proper beta prior")
    structure = effective_structure(spec.variant, structure, data.m)
    m, k = data.m, data.k
    v = spec.variant
    beta = np.sqrt(spec.beta_prior_var) * rng.standard_normal(data.s)
    sigma = inverse_wishart_sample(rng, spec.nu0, spec.B)
    rho = float(rng.choice(spec.rho_grid)) if v.spatial else 0.0
    tau2, psi = 1.0, 1.0
    if v is Variant.SPAHS:
        psi = float(inverse_gamma_sample(rng, 0.5, 1.0))
        tau2 = float(inverse_gamma_sample(rng, 0.5, 1.0 / psi))
    a, b = 0.5, 1.0
    if v is Variant.SPAGA:
        a = float(rng.choice(spec.a_grid))
        # a tiny gamma shape can underflow to exactly zero
        b = max(float(rng.gamma(spec.ng_c, 1.0 / spec.ng_d)), np.finfo(float).tiny)
    lam = np.ones((m, k))
    lam_aux = None
    if v is Variant.HS:
        lam_aux = inverse_gamma_sample(rng, 0.5, 1.0, m)
        lam = np.repeat(np.sqrt(inverse_gamma_sample(rng, 0.5, 1.0 / lam_aux))[:, None], k, axis=1)
    elif v in (Variant.SPAHS, Variant.SPAGA):
        prior = LocalPrior(LocalKind.HORSESHOE) if v is Variant.SPAHS else LocalPrior(LocalKind.NORMAL_GAMMA, a, b)
        lam = sample_relaxed_local(rng, prior, spec.eta, (m, k))
    P = structure.precision(rho) if not structure.independent else np.eye(m)
    Lp = np.linalg.cholesky(P)
    Ls = np.linalg.cholesky(sigma)
    Z = rng.standard_normal((m, k))
    u_tilde = np.sqrt(tau2) * solve_triangular(Lp, Z, lower=True, trans="T") @ Ls.T
    state = ChainState(beta=beta, u_tilde=u_tilde, lam=lam, sigma=sigma, rho=rho, tau2=tau2,
                       psi=psi, a=a, b=b, lam_aux=lam_aux)
    return state, regenerate_y(rng, state, data)


def regenerate_y(rng, state: ChainState, data: AreaDataset) -> np.ndarray:
    theta = assemble_theta(state, data)
    eps = np.einsum("ikl,il->ik", data.V_chol, rng.standard_normal(theta.shape))
    return theta + eps
