"""CSV/JSON formats for datasets, adjacency, fit outputs and study tables.

Dialect: comma separated, header row required, UTF-8, '.' decimal point.
Floats are written with 17 significant digits so files round-trip exactly.

Dataset files
    estimates: ``area_id, y_1, ..., y_k``
    design:    ``area_id, response_index, x_1, ..., x_s`` (``k`` rows per area,
               response_index 1..k, forming the rows of ``X_i``)
    variance:  ``area_id`` then the ``k(k+1)/2`` lower-triangle entries of
               ``V_i`` in row order (``v1_1, v2_1, v2_2, ...``), or only the
               ``k`` diagonal entries, in which case off-diagonals are zero.
Adjacency file
    ``area_id_1, area_id_2``: one undirected edge per row.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import FitSummary
from .model import AreaDataset, ModelError, SpatialStructure


class DataError(ModelError):
    """Malformed input file; the message carries path, line and identifier."""


def fmt(x) -> str:
    return format(float(x), ".17g")


def _read_rows(path):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    rows = [(n, [c.strip() for c in r]) for n, r in enumerate(rows, start=1) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file (header row required)")
    (_, header), body = rows[0], rows[1:]
    return path, header, body


def _floats(path, line, values, what):
    try:
        return [float(v) for v in values]
    except ValueError:
        raise DataError(f"{path}:{line}: non-numeric {what} {values}") from None


def _lower_pairs(k: int):
    return [(r, c) for r in range(k) for c in range(r + 1)]


def load_dataset(estimates_csv, design_csv, variance_csv) -> AreaDataset:
    path, header, body = _read_rows(estimates_csv)
    k = len(header) - 1
    if k < 1 or header[0] != "area_id":
        raise DataError(f"{path}:1: header must be 'area_id' followed by response columns")
    ids, y = [], []
    seen = {}
    for line, row in body:
        if len(row) != k + 1:
            raise DataError(f"{path}:{line}: expected {k + 1} fields, got {len(row)}")
        aid = row[0]
        if aid in seen:
            raise DataError(f"{path}:{line}: duplicate area_id {aid!r} (first on line {seen[aid]})")
        seen[aid] = line
        ids.append(aid)
        y.append(_floats(path, line, row[1:], f"estimate for area {aid!r}"))
    index = {aid: i for i, aid in enumerate(ids)}
    m = len(ids)

    path, header, body = _read_rows(design_csv)
    s = len(header) - 2
    if s < 1 or header[:2] != ["area_id", "response_index"]:
        raise DataError(f"{path}:1: header must be 'area_id,response_index' followed by covariates")
    X = np.full((m, k, s), np.nan)
    for line, row in body:
        if len(row) != s + 2:
            raise DataError(f"{path}:{line}: expected {s + 2} fields, got {len(row)}")
        aid = row[0]
        if aid not in index:
            raise DataError(f"{path}:{line}: unknown area_id {aid!r}")
        try:
            r = int(row[1])
        except ValueError:
            raise DataError(f"{path}:{line}: response_index {row[1]!r} is not an integer") from None
        if not 1 <= r <= k:
            raise DataError(f"{path}:{line}: response_index {r} outside 1..{k} for area {aid!r}")
        if not np.all(np.isnan(X[index[aid], r - 1])):
            raise DataError(f"{path}:{line}: duplicate design row {r} for area {aid!r}")
        X[index[aid], r - 1] = _floats(path, line, row[2:], f"covariate for area {aid!r}")
    for aid, i in index.items():
        if np.isnan(X[i]).any():
            raise DataError(f"{path}: area_id {aid!r} is missing design rows")

    path, header, body = _read_rows(variance_csv)
    n_cols = len(header) - 1
    pairs = _lower_pairs(k)
    if header[0] != "area_id" or n_cols not in (k, len(pairs)):
        raise DataError(f"{path}:1: expected area_id plus {len(pairs)} lower-triangle or {k} diagonal columns")
    cells = pairs if n_cols == len(pairs) else [(r, r) for r in range(k)]
    V = np.full((m, k, k), np.nan)
    for line, row in body:
        if len(row) != n_cols + 1:
            raise DataError(f"{path}:{line}: expected {n_cols + 1} fields, got {len(row)}")
        aid = row[0]
        if aid not in index:
            raise DataError(f"{path}:{line}: unknown area_id {aid!r}")
        i = index[aid]
        if not np.all(np.isnan(V[i])):
            raise DataError(f"{path}:{line}: duplicate variance row for area {aid!r}")
        Vi = np.zeros((k, k))
        for (r, c), v in zip(cells, _floats(path, line, row[1:], f"variance for area {aid!r}")):
            Vi[r, c] = Vi[c, r] = v
        try:
            np.linalg.cholesky(Vi)
        except np.linalg.LinAlgError:
            raise DataError(f"{path}:{line}: sampling covariance of area {aid!r} is not positive definite") from None
        V[i] = Vi
    for aid, i in index.items():
        if np.isnan(V[i]).any():
            raise DataError(f"{path}: area_id {aid!r} has no variance row")
    try:
        return AreaDataset(y=np.array(y), X=X, V=V, area_ids=tuple(ids))
    except ModelError as exc:
        raise DataError(f"{estimates_csv}: {exc}") from None


def save_dataset(data: AreaDataset, estimates_csv, design_csv, variance_csv):
    k, s = data.k, data.s
    with Path(estimates_csv).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id"] + [f"y_{j + 1}" for j in range(k)])
        for aid, yi in zip(data.area_ids, data.y):
            w.writerow([aid] + [fmt(v) for v in yi])
    with Path(design_csv).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "response_index"] + [f"x_{c + 1}" for c in range(s)])
        for aid, Xi in zip(data.area_ids, data.X):
            for r in range(k):
                w.writerow([aid, r + 1] + [fmt(v) for v in Xi[r]])
    pairs = _lower_pairs(k)
    with Path(variance_csv).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id"] + [f"v{r + 1}_{c + 1}" for r, c in pairs])
        for aid, Vi in zip(data.area_ids, data.V):
            w.writerow([aid] + [fmt(Vi[r, c]) for r, c in pairs])


def load_adjacency(edges_csv, area_ids) -> SpatialStructure:
    path, header, body = _read_rows(edges_csv)
    if len(header) != 2:
        raise DataError(f"{path}:1: header must have two columns 'area_id_1,area_id_2'")
    index = {str(a): i for i, a in enumerate(area_ids)}
    edges = []
    for line, row in body:
        if len(row) != 2:
            raise DataError(f"{path}:{line}: expected 2 fields, got {len(row)}")
        for aid in row:
            if aid not in index:
                raise DataError(f"{path}:{line}: unknown area_id {aid!r}")
        if row[0] == row[1]:
            raise DataError(f"{path}:{line}: self-edge on area_id {row[0]!r}")
        edges.append((index[row[0]], index[row[1]]))
    degree = np.zeros(len(index), dtype=int)
    for i, j in {(min(e), max(e)) for e in edges}:
        degree[i] += 1
        degree[j] += 1
    islands = [a for a, i in index.items() if degree[i] == 0]
    if islands:
        raise DataError(f"{path}: island area(s) without neighbours: {', '.join(map(repr, islands))}")
    try:
        return SpatialStructure(len(index), np.array(edges, dtype=np.int64).reshape(-1, 2))
    except ModelError as exc:
        raise DataError(f"{path}: {exc}") from None


def save_adjacency(structure: SpatialStructure, area_ids, edges_csv):
    ids = list(area_ids)
    with Path(edges_csv).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id_1", "area_id_2"])
        for i, j in structure.edges:
            w.writerow([ids[i], ids[j]])


def delta_log_transform(estimate, variance):
    """``(log y, var / y^2)``: first-order variance of the log transform."""
    y = np.asarray(estimate, dtype=float)
    v = np.asarray(variance, dtype=float)
    if np.any(y <= 0):
        raise ValueError("log transform needs strictly positive estimates")
    if np.any(v <= 0):
        raise ValueError("variances must be strictly positive")
    out = np.log(y), v / y ** 2
    if out[0].ndim == 0:
        return float(out[0]), float(out[1])
    return out


def log_transform_dataset(data: AreaDataset) -> AreaDataset:
    """Apply :func:`delta_log_transform` to every response (diagonal ``V`` only)."""
    off = data.V - np.einsum("ijj->ij", data.V)[:, :, None] * np.eye(data.k)
    if np.any(off != 0):
        raise DataError("log transform supports diagonal sampling covariances only")
    ly, lv = delta_log_transform(data.y, np.einsum("ijj->ij", data.V))
    return AreaDataset(y=ly, X=data.X, V=lv[:, :, None] * np.eye(data.k), area_ids=data.area_ids)


def _write_csv(path: Path, header, rows):
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror})") from exc


def write_fit_outputs(summary: FitSummary, draws, data: AreaDataset, out_dir, store_draws: bool = False,
                      extra: dict | None = None) -> list[Path]:
    """Write ``summary.csv``, ``hyper.csv``, ``dic.json`` and optionally ``draws.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = data.k
    has_lam = summary.lam_mean is not None
    header = ["area_id", "response", "mean", "q025", "q975", "u_mean"] + (["lambda_mean"] if has_lam else [])
    rows = []
    for i, aid in enumerate(data.area_ids):
        for j in range(k):
            row = [aid, j + 1, fmt(summary.theta_mean[i, j]), fmt(summary.theta_q025[i, j]),
                   fmt(summary.theta_q975[i, j]), fmt(summary.u_mean[i, j])]
            if has_lam:
                row.append(fmt(summary.lam_mean[i, j]))
            rows.append(row)
    files = [out / "summary.csv", out / "hyper.csv", out / "dic.json"]
    _write_csv(files[0], header, rows)

    pairs = _lower_pairs(k)
    h = draws.hyper
    header = ["draw", "rho", "tau2", "psi", "a", "b"] + [f"sigma_{r + 1}_{c + 1}" for r, c in pairs]
    rows = ([t, fmt(h["rho"][t]), fmt(h["tau2"][t]), fmt(h["psi"][t]), fmt(h["a"][t]), fmt(h["b"][t])]
            + [fmt(h["sigma"][t, r, c]) for r, c in pairs] for t in range(draws.n_draws))
    _write_csv(files[1], header, rows)

    payload = {"dic": summary.dic, "p_d": summary.p_d, "mean_ess": summary.mean_ess,
               "n_draws": draws.n_draws,
               "rho_posterior": dict(zip((fmt(g) for g in summary.rho_grid), summary.rho_posterior.tolist()))}
    payload.update(extra or {})
    files[2].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    if store_draws:
        files.append(out / "draws.csv")
        rows = ([t, aid, j + 1, fmt(draws.theta[t, i, j])]
                for t in range(draws.n_draws) for i, aid in enumerate(data.area_ids) for j in range(k))
        _write_csv(files[-1], ["draw", "area_id", "response", "theta"], rows)
    return files


def read_draws(path, data: AreaDataset) -> np.ndarray:
    """Read ``draws.csv`` back into an ``(S, m, k)`` array."""
    path, header, body = _read_rows(path)
    if header != ["draw", "area_id", "response", "theta"]:
        raise DataError(f"{path}:1: unexpected header {header}")
    index = {a: i for i, a in enumerate(data.area_ids)}
    vals = defaultdict(dict)
    for line, row in body:
        if row[1] not in index:
            raise DataError(f"{path}:{line}: unknown area_id {row[1]!r}")
        vals[int(row[0])][(index[row[1]], int(row[2]) - 1)] = float(row[3])
    S = max(vals) + 1 if vals else 0
    theta = np.full((S, data.m, data.k), np.nan)
    for t, cells in vals.items():
        for (i, j), v in cells.items():
            theta[t, i, j] = v
    if np.isnan(theta).any():
        raise DataError(f"{path}: incomplete draws")
    return theta


def write_study_outputs(table, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    key = ["method", "scenario", "m", "variance_case"]
    metrics = ["aad", "asd", "cp", "al"]
    rows = sorted(table.rows, key=lambda r: (r["scenario"], r["m"], r["variance_case"], r["method"], r["replication"]))
    _write_csv(out / "metrics.csv", key + ["replication"] + metrics + ["failed"],
               ([r[c] for c in key] + [r["replication"]] + [fmt(r[c]) for c in metrics] + [int(r["failed"])]
                for r in rows))
    med = sorted(table.medians(), key=lambda r: (r["scenario"], r["m"], r["variance_case"], r["method"]))
    _write_csv(out / "medians.csv", key + metrics + ["n_reps", "n_failed"],
               ([r[c] for c in key] + [fmt(r[c]) for c in metrics] + [r["n_reps"], r["n_failed"]] for r in med))
    return [out / "metrics.csv", out / "medians.csv"]


@dataclass
class RunConfig:
    """Resolved CLI configuration (flags merged over an optional JSON file)."""

    command: str
    out: str = "out"
    estimates: str | None = None
    design: str | None = None
    variance: str | None = None
    adjacency: str | None = None
    fit_dir: str | None = None
    variant: str = "SpaHS"
    variants: list = field(default_factory=lambda: ["SpaHS", "SpaGa", "SpaFH", "HS", "FH"])
    nu0: float | None = None
    eta: float = 100.0
    ng_c: float = 0.001
    ng_d: float = 0.001
    seed: int = 0
    n_total: int = 2000
    n_burnin: int = 500
    thin: int = 1
    store_draws: bool = False
    log_transform: bool = False
    scenarios: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    m: list = field(default_factory=lambda: [100])
    variance_cases: list = field(default_factory=lambda: ["a"])
    methods: list = field(default_factory=lambda: ["SpaHS", "SpaGa", "SpaFH", "HS", "FH"])
    n_reps: int = 50
    jobs: int = 1
    scenario: int = 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise DataError(f"{path}:1: configuration must be a JSON object")
    return {k.replace("-", "_"): v for k, v in raw.items()}
