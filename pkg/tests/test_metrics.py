import itertools
import math

import numpy as np
import pytest

from vlnhijack.metrics import dtw, ndtw, oracle_success, success


def brute_force_dtw(p, q, positions):
    """Minimum over every monotone alignment path, enumerated explicitly."""
    pos = np.asarray(positions, dtype=float)
    n, m = len(p), len(q)
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += float(np.linalg.norm(pos[p[i]] - pos[q[j]]))
        if acc >= best:
            return
        if (i, j) == (n - 1, m - 1):
            best = acc
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


def line_positions(xs):
    return np.array([[x, 0.0, 0.0] for x in xs])


def test_dtw_examples():
    pos = line_positions([0, 3])
    assert dtw([0, 1, 0], [0, 1, 0], pos) == 0.0
    # both nodes of P align to the single node of Q
    assert dtw([0, 1], [0], pos) == pytest.approx(3.0)
    assert dtw([0, 1], [0], pos) == pytest.approx(brute_force_dtw([0, 1], [0], pos))
    # dtw 3.0 against a 2-node reference
    assert dtw([0, 1], [0, 0], pos) == pytest.approx(3.0)
    assert ndtw([0, 1], [0, 0], pos) == pytest.approx(math.exp(-0.5))
    assert ndtw([0, 1], [0, 0], pos) == pytest.approx(0.60653, abs=1e-5)


def test_dtw_rejects_empty_paths():
    with pytest.raises(ValueError):
        dtw([], [0], line_positions([0]))


def test_dtw_matches_brute_force():
    rng = np.random.default_rng(0)
    pos = rng.uniform(-4, 4, size=(8, 3))
    for _ in range(500):
        p = list(rng.integers(0, 8, size=rng.integers(1, 7)))
        q = list(rng.integers(0, 8, size=rng.integers(1, 7)))
        assert dtw(p, q, pos) == pytest.approx(brute_force_dtw(p, q, pos), rel=1e-12, abs=1e-12)


def test_ndtw_identity_and_range():
    rng = np.random.default_rng(1)
    pos = rng.uniform(-4, 4, size=(8, 3))
    for _ in range(50):
        p = list(rng.integers(0, 8, size=rng.integers(1, 7)))
        assert abs(ndtw(p, p, pos) - 1.0) <= 1e-12
        q = list(rng.integers(0, 8, size=rng.integers(1, 7)))
        assert 0.0 < ndtw(p, q, pos) <= 1.0


def test_success_boundary_is_inclusive():
    pos = line_positions([0, 3.0, 3.0 + 1e-9, 10])
    assert success([0], [1], pos)
    assert not success([0], [2], pos)
    assert success([3, 1], [0, 1], pos)


def test_oracle_success():
    pos = line_positions([0, 5, 10, 20])
    assert oracle_success([0, 2, 3], [0, 2], pos)
    assert not success([0, 2, 3], [0, 2], pos)
    assert not oracle_success([0, 3], [1], pos)


def test_dtw_symmetry_and_permutation_brute():
    pos = line_positions([0, 1, 2, 4])
    for p in itertools.permutations(range(4), 3):
        for q in itertools.permutations(range(4), 2):
            assert dtw(p, q, pos) == pytest.approx(dtw(q, p, pos))
