"""Data containers and the linear-algebra identities shared by every sampler.

Conventions used throughout the package:

* per-area quantities are stacked on the leading axis, so ``y`` is ``(m, k)``,
  ``X`` is ``(m, k, s)`` and ``V`` is ``(m, k, k)``;
* when a length ``mk`` vector is needed it is the area-major stacking
  ``(u_1, ..., u_m)``, which matches the Kronecker ordering ``A (x) Sigma``
  with ``A`` of size ``m x m``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

SPECTRAL_TOL = 1e-8
DENSE_LIMIT = 2000


class ModelError(ValueError):
    """Invalid model input (data, structure or configuration)."""


class Variant(str, enum.Enum):
    FH = "FH"
    HS = "HS"
    SPAFH = "SpaFH"
    SPAGA = "SpaGa"
    SPAHS = "SpaHS"

    @property
    def spatial(self) -> bool:
        return self in (Variant.SPAFH, Variant.SPAGA, Variant.SPAHS)

    @property
    def shrinkage(self) -> bool:
        return self in (Variant.HS, Variant.SPAGA, Variant.SPAHS)

    @classmethod
    def parse(cls, name: str | Variant) -> Variant:
        if isinstance(name, Variant):
            return name
        for v in cls:
            if v.value.lower() == str(name).lower():
                return v
        raise ModelError(f"unknown model variant {name!r}; choose from {[v.value for v in cls]}")


def default_rho_grid() -> np.ndarray:
    """The 31-point discrete-uniform support for the spatial dependence parameter."""
    coarse = np.round(np.arange(0, 17) * 0.05, 10)          # 0, 0.05, ..., 0.80
    middle = np.round(0.80 + np.arange(1, 6) * 0.02, 10)    # 0.82, ..., 0.90
    fine = np.round(0.90 + np.arange(1, 10) * 0.01, 10)     # 0.91, ..., 0.99
    return np.concatenate([coarse, middle, fine])


def default_a_grid() -> np.ndarray:
    return np.round(np.arange(1, 101) * 0.01, 10)


def cholesky_jitter(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor; retries once with a relative jitter of 1e-10."""
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    diag = np.diagonal(A, axis1=-2, axis2=-1)
    eps = 1e-10 * np.mean(np.abs(diag), axis=-1)
    eye = np.eye(A.shape[-1])
    try:
        return np.linalg.cholesky(A + np.asarray(eps)[..., None, None] * eye)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"Cholesky of {what} failed after jitter") from exc


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AreaDataset:
    """Direct estimates with their known sampling covariances.

    Parameters
    ----------
    y : array, shape (m, k)
        Direct estimates.
    X : array, shape (m, k, s)
        Per-area design blocks.
    V : array, shape (m, k, k)
        Known sampling covariance of each direct estimate.
    area_ids : sequence of str, optional
        Labels used by the file formats; defaults to ``"1"..."m"``.
    """

    y: np.ndarray
    X: np.ndarray
    V: np.ndarray
    area_ids: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        X = np.asarray(self.X, dtype=float)
        V = np.asarray(self.V, dtype=float)
        if y.ndim != 2:
            raise ModelError("y must have shape (m, k)")
        m, k = y.shape
        if X.ndim != 3 or X.shape[:2] != (m, k):
            raise ModelError(f"X must have shape ({m}, {k}, s), got {X.shape}")
        if V.shape != (m, k, k):
            raise ModelError(f"V must have shape ({m}, {k}, {k}), got {V.shape}")
        if not np.allclose(V, np.swapaxes(V, 1, 2), rtol=1e-12, atol=1e-14):
            raise ModelError("sampling covariances must be symmetric")
        for i in range(m):
            try:
                np.linalg.cholesky(V[i])
            except np.linalg.LinAlgError:
                raise ModelError(f"sampling covariance of area {i} is not positive definite") from None
        s = X.shape[2]
        if np.linalg.matrix_rank(X.reshape(m * k, s)) < s:
            raise ModelError("stacked design matrix is not of full column rank")
        ids = tuple(str(a) for a in self.area_ids) if len(self.area_ids) else tuple(str(i + 1) for i in range(m))
        if len(ids) != m:
            raise ModelError(f"expected {m} area ids, got {len(ids)}")
        if len(set(ids)) != m:
            raise ModelError("area ids must be unique")
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "V", _readonly(V))
        object.__setattr__(self, "area_ids", ids)
        V_inv = np.linalg.inv(V)
        V_inv = 0.5 * (V_inv + np.swapaxes(V_inv, 1, 2))
        object.__setattr__(self, "V_inv", _readonly(V_inv))
        object.__setattr__(self, "V_chol", _readonly(np.linalg.cholesky(V)))

    @property
    def m(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.y.shape[1]

    @property
    def s(self) -> int:
        return self.X.shape[2]

    def stacked_X(self) -> np.ndarray:
        return self.X.reshape(self.m * self.k, self.s)

    def dense_V(self) -> np.ndarray:
        from scipy.linalg import block_diag

        return block_diag(*self.V)

    def with_y(self, y: np.ndarray) -> AreaDataset:
        return replace(self, y=y)


class SpatialStructure:
    """Binary symmetric adjacency with degrees and the normalized spectrum.

    ``gamma`` holds the eigenvalues of ``D^{-1/2} W D^{-1/2}`` so that
    ``|D - rho W| = |D| prod(1 - rho gamma)`` needs no further factorization.

    Use :meth:`from_edges` or :meth:`from_dense`; :meth:`independent` builds the
    non-spatial reduction (``W = 0``, ``D = I``) used by the FH and HS models.
    """

    def __init__(self, m: int, edges: np.ndarray, *, independent: bool = False):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(edges) and (edges.min() < 0 or edges.max() >= m):
            raise ModelError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ModelError("self-adjacency is not allowed")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        uniq = np.unique(np.stack([lo, hi], axis=1), axis=0) if len(edges) else np.zeros((0, 2), np.int64)
        self.m = int(m)
        self.edges = uniq
        self.edges.setflags(write=False)
        self.independent = bool(independent)
        rows = np.concatenate([uniq[:, 0], uniq[:, 1]])
        cols = np.concatenate([uniq[:, 1], uniq[:, 0]])
        self.W = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
        deg = np.asarray(self.W.sum(axis=1)).ravel()
        if independent:
            if len(uniq):
                raise ModelError("independent structure cannot carry edges")
            deg = np.ones(m)
        else:
            islands = np.flatnonzero(deg == 0)
            if len(islands):
                raise ModelError(f"areas without neighbours (islands) at indices {islands.tolist()}")
        self.degree = _readonly(deg)
        self.neighbors = [self.W.indices[self.W.indptr[i]:self.W.indptr[i + 1]].copy() for i in range(m)]
        if independent:
            self.gamma = _readonly(np.zeros(m))
        else:
            d = 1.0 / np.sqrt(deg)
            S = (self.W.toarray() * d[:, None]) * d[None, :]
            gamma = np.sort(np.linalg.eigvalsh(S))
            if gamma[-1] > 1 + SPECTRAL_TOL:
                raise ModelError(f"normalized adjacency spectrum exceeds 1 ({gamma[-1]})")
            self.gamma = _readonly(gamma)
        self.log_det_D = float(np.sum(np.log(deg)))
        self._grid_cache = {}

    @classmethod
    def from_edges(cls, m: int, edges) -> SpatialStructure:
        return cls(m, np.asarray(list(edges), dtype=np.int64).reshape(-1, 2))

    @classmethod
    def from_dense(cls, W) -> SpatialStructure:
        W = np.asarray(W)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ModelError("adjacency must be square")
        if not np.array_equal(W, W.T):
            raise ModelError("adjacency must be symmetric")
        if np.any(np.diag(W) != 0):
            raise ModelError("adjacency must have a zero diagonal")
        if not np.all(np.isin(W, (0, 1))):
            raise ModelError("adjacency entries must be 0 or 1")
        i, j = np.nonzero(np.triu(W, 1))
        return cls(W.shape[0], np.stack([i, j], axis=1))

    @classmethod
    def independent(cls, m: int) -> SpatialStructure:
        return cls(m, np.zeros((0, 2), np.int64), independent=True)

    def dense_W(self) -> np.ndarray:
        return self.W.toarray()

    def precision(self, rho: float) -> np.ndarray:
        """Dense ``D - rho W``; diagnostics and data generation only."""
        return np.diag(self.degree) - rho * self.dense_W()

    def log1m_rho_gamma(self, grid) -> np.ndarray:
        """``sum_i log(1 - rho gamma_i)`` for each rho in ``grid`` (cached)."""
        key = tuple(np.asarray(grid, dtype=float).tolist())
        out = self._grid_cache.get(key)
        if out is None:
            g = np.asarray(key)
            vals = 1.0 - g[:, None] * self.gamma[None, :]
            if np.any(vals <= 0):
                raise ModelError("D - rho W is not positive definite on the grid")
            out = np.log(vals).sum(axis=1)
            out.setflags(write=False)
            self._grid_cache[key] = out
        return out

    def __eq__(self, other):
        return (isinstance(other, SpatialStructure) and self.m == other.m
                and self.independent == other.independent
                and np.array_equal(self.edges, other.edges))

    def __repr__(self):
        kind = "independent" if self.independent else f"{len(self.edges)} edges"
        return f"SpatialStructure(m={self.m}, {kind})"


FIXABLE = frozenset({"beta", "u_tilde", "sigma", "rho", "lambda", "tau2", "ng"})


@dataclass(frozen=True)
class ModelSpec:
    """Model variant plus hyperparameters.

    ``nu0`` and ``B`` default to ``k`` and ``I_k`` and are resolved by
    :meth:`resolved` once ``k`` is known. ``fixed`` names blocks the Gibbs
    sweep must leave untouched (any of ``FIXABLE``). ``beta_prior_var`` turns
    the flat regression prior into ``N(0, beta_prior_var * I)``.
    """

    variant: Variant = Variant.SPAHS
    nu0: float | None = None
    B: np.ndarray | None = None
    rho_grid: np.ndarray = field(default_factory=default_rho_grid)
    ng_c: float = 0.001
    ng_d: float = 0.001
    a_grid: np.ndarray = field(default_factory=default_a_grid)
    eta: float = 100.0
    seed: int = 0
    fixed: frozenset = frozenset()
    beta_prior_var: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        grid = np.asarray(self.rho_grid, dtype=float)
        if grid.ndim != 1 or len(grid) == 0:
            raise ModelError("rho grid must be a non-empty sequence")
        if grid[0] < 0 or grid[-1] >= 1 or np.any(np.diff(grid) <= 0):
            raise ModelError("rho grid must be strictly increasing inside [0, 1)")
        a_grid = np.asarray(self.a_grid, dtype=float)
        if np.any(a_grid <= 0) or np.any(np.diff(a_grid) <= 0):
            raise ModelError("a grid must be positive and strictly increasing")
        if self.eta <= 0:
            raise ModelError("eta must be positive")
        if self.ng_c <= 0 or self.ng_d <= 0:
            raise ModelError("gamma hyperprior parameters must be positive")
        fixed = frozenset(self.fixed)
        if not fixed <= FIXABLE:
            raise ModelError(f"unknown fixed blocks {sorted(fixed - FIXABLE)}")
        if self.beta_prior_var is not None and self.beta_prior_var <= 0:
            raise ModelError("beta prior variance must be positive")
        object.__setattr__(self, "rho_grid", _readonly(grid))
        object.__setattr__(self, "a_grid", _readonly(a_grid))
        object.__setattr__(self, "fixed", fixed)
        if self.B is not None:
            object.__setattr__(self, "B", _readonly(np.atleast_2d(self.B)))

    def resolved(self, k: int) -> ModelSpec:
        nu0 = float(k) if self.nu0 is None else float(self.nu0)
        B = np.eye(k) if self.B is None else np.asarray(self.B, dtype=float)
        if B.shape != (k, k):
            raise ModelError(f"B must be {k}x{k}")
        try:
            np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            raise ModelError("B must be positive definite") from None
        if nu0 < k:
            raise ModelError(f"nu0 must be at least k={k} for a proper prior")
        return replace(self, nu0=nu0, B=B)


@dataclass
class ChainState:
    """Mutable state of one chain.

    ``lam`` holds the local scales (``Lambda_i`` diagonals); ``lam_aux`` is the
    per-area half-Cauchy augmentation used only by the HS variant.
    """

    beta: np.ndarray
    u_tilde: np.ndarray
    lam: np.ndarray
    sigma: np.ndarray
    rho: float = 0.0
    tau2: float = 1.0
    psi: float = 1.0
    a: float = 0.5
    b: float = 1.0
    lam_aux: np.ndarray | None = None

    def copy(self) -> ChainState:
        return ChainState(
            beta=self.beta.copy(), u_tilde=self.u_tilde.copy(), lam=self.lam.copy(),
            sigma=self.sigma.copy(), rho=self.rho, tau2=self.tau2, psi=self.psi,
            a=self.a, b=self.b,
            lam_aux=None if self.lam_aux is None else self.lam_aux.copy(),
        )

    @property
    def u(self) -> np.ndarray:
        return self.lam * self.u_tilde


@dataclass
class PosteriorDraws:
    """Post burn-in draws of one chain.

    ``u``, ``u_tilde`` and ``lam`` are only kept when the chain was run with
    ``store_u``; without them theta cannot be rebuilt from its components.
    """

    theta: np.ndarray
    beta: np.ndarray
    hyper: dict
    n_burnin: int
    n_total: int
    thin: int = 1
    u: np.ndarray | None = None
    u_tilde: np.ndarray | None = None
    lam: np.ndarray | None = None
    variant: Variant | None = None
    rho_grid: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.theta.shape[0]

    def reconstruct_theta(self, data: AreaDataset) -> np.ndarray:
        if self.u_tilde is None or self.lam is None:
            raise ValueError("components were not stored (run with store_u=True)")
        return np.einsum("iks,ts->tik", data.X, self.beta) + self.lam * self.u_tilde


def _degree_vector(D) -> np.ndarray:
    D = np.asarray(D.toarray() if sp.issparse(D) else D, dtype=float)
    return np.diag(D).copy() if D.ndim == 2 else D


def kron_quadratic_form(u_tilde, sigma_inv, D, W, rho: float) -> float:
    """``u' ((D - rho W) (x) Sigma^{-1}) u`` evaluated without the Kronecker product.

    ``D`` may be the degree vector or a diagonal matrix; ``W`` dense or sparse.
    """
    U = np.asarray(u_tilde, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    sigma_inv = np.atleast_2d(np.asarray(sigma_inv, dtype=float))
    d = _degree_vector(D)
    m, k = U.shape
    if sigma_inv.shape != (k, k) or d.shape != (m,) or W.shape != (m, m):
        raise ModelError("dimension mismatch in quadratic form")
    q0, qw = quad_parts(U, sigma_inv, d, W)
    return max(q0 - rho * qw, 0.0)


def quad_parts(U, sigma_inv, degree, W) -> tuple[float, float]:
    """Return ``(tr(D U' S U), tr(W U' S U))`` with ``U`` stored as ``(m, k)``."""
    P = U @ sigma_inv
    q0 = float(np.einsum("i,ij,ij->", degree, P, U))
    qw = float(np.sum((W @ U) * P))
    return q0, qw


def structure_quad_parts(U, sigma_inv, structure: SpatialStructure) -> tuple[float, float]:
    if structure.independent:
        P = U @ sigma_inv
        return float(np.sum(P * U)), 0.0
    return quad_parts(U, sigma_inv, structure.degree, structure.W)


def log_det_spatial(structure: SpatialStructure, rho: float, k: int) -> float:
    """``(k/2) log|D - rho W|`` from the cached normalized spectrum."""
    if not 0 <= rho < 1:
        raise ModelError(f"rho={rho} outside [0, 1)")
    vals = 1.0 - rho * structure.gamma
    if np.any(vals <= 0):
        raise ModelError("D - rho W lost positive definiteness (corrupt structure)")
    return 0.5 * k * (structure.log_det_D + float(np.sum(np.log(vals))))


def assemble_theta(state: ChainState, data: AreaDataset) -> np.ndarray:
    """Small-area means ``X_i beta + Lambda_i u~_i`` as an ``(m, k)`` array."""
    if state.u_tilde.shape != (data.m, data.k) or state.beta.shape != (data.s,):
        raise ModelError("state dimensions do not match the dataset")
    return data.X @ state.beta + state.lam * state.u_tilde


def prior_covariance(state: ChainState, structure: SpatialStructure) -> np.ndarray:
    """Dense ``tau^2 Lambda ((D - rho W)^{-1} (x) Sigma) Lambda``."""
    m, k = state.u_tilde.shape
    if m * k > DENSE_LIMIT:
        raise ModelError(f"dense assembly refused for mk={m * k} > {DENSE_LIMIT}")
    spatial_cov = np.linalg.inv(structure.precision(state.rho))
    lam = state.lam.reshape(-1)
    return state.tau2 * lam[:, None] * np.kron(spatial_cov, state.sigma) * lam[None, :]


def matrix_shrinkage_factor(state: ChainState, data: AreaDataset, structure: SpatialStructure,
                            dense_limit: int = DENSE_LIMIT) -> np.ndarray:
    """Dense ``Q = (V^{-1} + U^{-1})^{-1} U^{-1}``, computed as ``V (U + V)^{-1}``.

    The second form stays finite in both degenerate limits (``U -> 0`` gives
    ``Q -> I``, ``V -> 0`` gives ``Q -> 0``).
    """
    mk = data.m * data.k
    if mk > dense_limit:
        raise ModelError(f"dense shrinkage factor refused for mk={mk} > {dense_limit}")
    U = prior_covariance(state, structure)
    V = data.dense_V()
    return np.linalg.solve(U + V, V).T


def conditional_theta_mean(state: ChainState, data: AreaDataset, Q: np.ndarray,
                           beta: np.ndarray | None = None) -> np.ndarray:
    """``(I - Q) y + Q X beta`` reshaped to ``(m, k)``."""
    beta = state.beta if beta is None else beta
    y = data.y.reshape(-1)
    xb = data.stacked_X() @ beta
    return (y - Q @ (y - xb)).reshape(data.m, data.k)
