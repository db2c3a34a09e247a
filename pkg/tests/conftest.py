import numpy as np
import pytest

from spafh.model import AreaDataset, SpatialStructure


def grid_structure(rows: int, cols: int) -> SpatialStructure:
    idx = np.arange(rows * cols).reshape(rows, cols)
    edges = np.concatenate([
        np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1),
        np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1),
    ])
    return SpatialStructure(rows * cols, edges)


def random_spd(rng, k: int, scale: float = 1.0) -> np.ndarray:
    A = rng.standard_normal((k, k))
    return scale * (A @ A.T / k + np.eye(k))


def random_dataset(rng, m: int, k: int = 2, s: int | None = None, v_scale: float = 0.5) -> AreaDataset:
    s = 2 * k if s is None else s
    X = rng.standard_normal((m, k, s))
    V = np.stack([random_spd(rng, k, v_scale) for _ in range(m)])
    return AreaDataset(y=rng.standard_normal((m, k)), X=X, V=V)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
