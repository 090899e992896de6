"""Path metrics: DTW, nDTW, success and oracle success."""
from __future__ import annotations

import numpy as np

SUCCESS_DISTANCE = 3.0


def _points(path, positions) -> np.ndarray:
    path = list(path)
    if not path:
        raise ValueError("path must be non-empty")
    return np.asarray(positions, dtype=np.float64)[path]


def dtw(p, q, positions) -> float:
    """Minimal aligned Euclidean cost with steps (i+1, j), (i, j+1), (i+1, j+1)."""
    a, b = _points(p, positions), _points(q, positions)
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def ndtw(p, reference, positions, threshold: float = SUCCESS_DISTANCE) -> float:
    return float(np.exp(-dtw(p, reference, positions) / (len(list(reference)) * threshold)))


def success(p, reference, positions, threshold: float = SUCCESS_DISTANCE) -> bool:
    a, b = _points(p, positions), _points(reference, positions)
    return bool(np.linalg.norm(a[-1] - b[-1]) <= threshold)


def oracle_success(p, reference, positions, threshold: float = SUCCESS_DISTANCE) -> bool:
    a, b = _points(p, positions), _points(reference, positions)
    return bool(np.any(np.linalg.norm(a - b[-1], axis=1) <= threshold))
