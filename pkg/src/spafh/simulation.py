"""Synthetic lattice experiments: data generation, metrics and the replication driver."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .mcmc import ChainConfig, ChainError, run_chain
from .model import AreaDataset, ModelError, ModelSpec, PosteriorDraws, SpatialStructure, Variant

logger = logging.getLogger(__name__)

VARIANCE_CASES = {
    "a": (0.7, 0.6, 0.5, 0.4, 0.3),
    "b": (2.0, 0.6, 0.5, 0.4, 0.2),
}
DEFAULT_OMEGA = {2: 0.5, 3: 0.8}
THRESHOLD_FRACTION = {4: 0.5, 5: 0.8}
METRICS = ("aad", "asd", "cp", "al")


def build_lattice(m: int) -> SpatialStructure:
    """Rook adjacency on a 10 x (m/10) grid, areas numbered row-major."""
    if m <= 0 or m % 10:
        raise ModelError(f"lattice size m={m} must be a positive multiple of 10")
    rows, cols = 10, m // 10
    idx = np.arange(m).reshape(rows, cols)
    horizontal = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vertical = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return SpatialStructure(m, np.concatenate([horizontal, vertical]))


@dataclass(frozen=True)
class ScenarioSpec:
    """One cell of the simulation design.

    ``omega`` defaults to 0.5 / 0.8 for scenarios 2 / 3. With
    ``covariate_seed`` set, the covariate draws are shared across replications.
    """

    scenario: int = 1
    m: int = 100
    k: int = 2
    rho_true: float = 0.95
    sigma_corr: float = 0.3
    omega: float | None = None
    variance_case: str = "a"
    beta_true: tuple | None = None
    mu_signal: float = 5.0
    seed: int = 0
    covariate_seed: int | None = None

    def __post_init__(self):
        if self.scenario not in (1, 2, 3, 4, 5):
            raise ModelError(f"scenario must be 1..5, got {self.scenario}")
        if self.m % 10:
            raise ModelError("m must be divisible by 10")
        if self.variance_case not in VARIANCE_CASES:
            raise ModelError(f"variance case must be one of {sorted(VARIANCE_CASES)}")
        if self.omega is None and self.scenario in DEFAULT_OMEGA:
            object.__setattr__(self, "omega", DEFAULT_OMEGA[self.scenario])
        if self.omega is not None and not 0 <= self.omega <= 1:
            raise ModelError("omega must lie in [0, 1]")
        if self.beta_true is None:
            object.__setattr__(self, "beta_true", (1.0,) * (2 * self.k))
        if len(self.beta_true) != 2 * self.k:
            raise ModelError(f"beta must have length {2 * self.k}")

    @property
    def sigma_true(self) -> np.ndarray:
        S = np.full((self.k, self.k), self.sigma_corr)
        np.fill_diagonal(S, 1.0)
        return S

    def cell(self) -> tuple:
        return (self.scenario, self.m, self.variance_case)


def design_block(x: float, k: int) -> np.ndarray:
    """``kron(I_k, [1, x])``: an intercept and one covariate per response."""
    return np.kron(np.eye(k), np.array([[1.0, x]]))


def mcar_draw(rng, structure: SpatialStructure, rho: float, sigma: np.ndarray) -> np.ndarray:
    """Draw ``u ~ N(0, (D - rho W)^{-1} (x) Sigma)`` as an ``(m, k)`` matrix-normal."""
    Lp = np.linalg.cholesky(structure.precision(rho))
    Ls = np.linalg.cholesky(sigma)
    Z = rng.standard_normal((structure.m, sigma.shape[0]))
    return solve_triangular(Lp, Z, lower=True, trans="T") @ Ls.T


def threshold_columns(u: np.ndarray, fraction: float) -> np.ndarray:
    """Zero the smallest ``fraction`` of each column by magnitude (ties by area index)."""
    out = np.array(u, dtype=float, copy=True)
    n_zero = int(round(fraction * out.shape[0]))
    for j in range(out.shape[1]):
        order = np.argsort(np.abs(out[:, j]), kind="stable")
        out[order[:n_zero], j] = 0.0
    return out


def gen_random_effects(rng, spec: ScenarioSpec, structure: SpatialStructure) -> np.ndarray:
    sc = spec.scenario
    if sc in (4, 5):
        u = 2.0 * mcar_draw(rng, structure, spec.rho_true, spec.sigma_true)
        return threshold_columns(u, THRESHOLD_FRACTION[sc])
    u = mcar_draw(rng, structure, spec.rho_true, spec.sigma_true)
    if sc in (2, 3):
        z = rng.random(u.shape) < spec.omega
        u = u + np.where(z, 0.0, spec.mu_signal)
    return u


def gen_dataset(rng, spec: ScenarioSpec, structure: SpatialStructure | None = None,
                noise: bool = True):
    """Simulate one dataset; returns ``(data, true_theta, true_u)``.

    ``rng`` may be None, in which case ``spec.seed`` seeds the draw.
    """
    rng = np.random.default_rng(spec.seed if rng is None else rng)
    structure = build_lattice(spec.m) if structure is None else structure
    m, k = spec.m, spec.k
    cov_rng = rng if spec.covariate_seed is None else np.random.default_rng(spec.covariate_seed)
    x = cov_rng.standard_normal(m)
    X = np.stack([design_block(xi, k) for xi in x])
    levels = np.asarray(VARIANCE_CASES[spec.variance_case])
    assign = rng.permutation(np.repeat(np.arange(len(levels)), m // len(levels)))
    V = levels[assign][:, None, None] * np.eye(k)
    u = gen_random_effects(rng, spec, structure)
    theta = X @ np.asarray(spec.beta_true, dtype=float) + u
    eps = np.sqrt(levels[assign])[:, None] * rng.standard_normal((m, k)) if noise else 0.0
    data = AreaDataset(y=theta + eps, X=X, V=V)
    return data, theta, u


def compute_metrics(draws: PosteriorDraws | np.ndarray, true_theta) -> dict:
    """AAD, ASD, coverage and mean length of equal-tailed 95% intervals."""
    theta = draws.theta if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if theta.shape[0] == 0:
        raise ValueError("no draws")
    truth = np.asarray(true_theta, dtype=float)
    est = theta.mean(axis=0)
    lo, hi = np.quantile(theta, [0.025, 0.975], axis=0)
    err = est - truth
    return {
        "aad": float(np.mean(np.abs(err))),
        "asd": float(np.mean(err ** 2)),
        "cp": float(np.mean((lo <= truth) & (truth <= hi))),
        "al": float(np.mean(hi - lo)),
    }


@dataclass
class MetricTable:
    """Per-replication metric rows plus their per-cell medians."""

    rows: list = field(default_factory=list)

    KEY = ("method", "scenario", "m", "variance_case")

    def add(self, row: dict):
        self.rows.append(row)

    def medians(self) -> list[dict]:
        groups: dict = {}
        for r in self.rows:
            groups.setdefault(tuple(r[k] for k in self.KEY), []).append(r)
        out = []
        for key, rs in groups.items():
            ok = [r for r in rs if not r["failed"]]
            med = {name: float(np.median([r[name] for r in ok])) if ok else float("nan")
                   for name in METRICS}
            out.append(dict(zip(self.KEY, key), **med, n_reps=len(ok), n_failed=len(rs) - len(ok)))
        return out

    def median(self, method: str, scenario: int, m: int, variance_case: str, metric: str) -> float:
        for r in self.medians():
            if (r["method"], r["scenario"], r["m"], r["variance_case"]) == (method, scenario, m, variance_case):
                return r[metric]
        raise KeyError((method, scenario, m, variance_case))


def _seed(rng_seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(rng_seed, spawn_key=key)


def _run_replication(args) -> list[dict]:
    cell_idx, rep, spec, methods, rng_seed, config, model_kwargs = args
    data_rng = np.random.default_rng(_seed(rng_seed, cell_idx, rep, 0))
    structure = build_lattice(spec.m)
    data, theta, _ = gen_dataset(data_rng, spec, structure)
    rows = []
    for j, method in enumerate(methods):
        model = ModelSpec(variant=Variant.parse(method), **model_kwargs)
        row = {"method": model.variant.value, "scenario": spec.scenario, "m": spec.m,
               "variance_case": spec.variance_case, "replication": rep}
        try:
            draws = run_chain(np.random.default_rng(_seed(rng_seed, cell_idx, rep, j + 1)),
                              data, structure, model, config)
            row.update(compute_metrics(draws, theta), failed=False)
        except ChainError as exc:
            logger.warning("replication %d of %s failed: %s", rep, model.variant.value, exc)
            row.update({name: float("nan") for name in METRICS}, failed=True)
        rows.append(row)
    return rows


def run_study(spec_grid, methods, n_reps: int, rng_seed: int, config: ChainConfig | None = None,
              model_kwargs: dict | None = None, n_jobs: int = 1) -> MetricTable:
    """Fit every method to the same simulated datasets and collect metrics.

    Datasets are generated from a stream keyed only by (cell, replication) so
    all methods see identical data; each method's chain has its own stream.
    """
    if n_reps < 1:
        raise ModelError("n_reps must be >= 1")
    config = config if config is not None else ChainConfig(store_u=False)
    config = replace(config, store_u=False)
    model_kwargs = dict(model_kwargs or {})
    tasks = [(c, rep, spec, tuple(methods), rng_seed, config, model_kwargs)
             for c, spec in enumerate(spec_grid) for rep in range(n_reps)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_run_replication, tasks))
    else:
        results = [_run_replication(t) for t in tasks]
    table = MetricTable()
    for rows in results:
        for row in rows:
            table.add(row)
    return table
