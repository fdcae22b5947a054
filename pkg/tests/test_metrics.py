from functools import lru_cache
import itertools
import math

import numpy as np
import pytest

from gaze_world.gazedata import GridMismatchError, GridSpec, Scanpath
from gaze_world.metrics import (
    LengthMismatchError,
    QuantizedScanpath,
    ScanpathTooShortError,
    SingleClassError,
    alignment_path,
    auroc,
    compare_scanpaths,
    diagonal,
    f1,
    multimatch,
    quantize,
    scanmatch,
    sed,
    stde,
)

GRID = GridSpec(2, 2)

def _paths(lengths):
    for length in lengths:
        for cells in itertools.product(range(GRID.n), repeat=length):
            yield QuantizedScanpath(cells, GRID)

# =============================================================================
# Brute-force references
# =============================================================================

def sed_oracle(s, t):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(s):
            return len(t) - j
        if j == len(t):
            return len(s) - i
        if s[i] == t[j]:
            return go(i + 1, j + 1)
        return 1 + min(go(i + 1, j), go(i, j + 1), go(i + 1, j + 1))

    return go(0, 0)

def scanmatch_oracle(a, b):
    diag = diagonal(GRID)
    ca, cb = a.centers, b.centers
    best = 0.0
    for k in range(1, min(len(a), len(b)) + 1):
        for left in itertools.combinations(range(len(a)), k):
            for right in itertools.combinations(range(len(b)), k):
                total = sum(1.0 - np.linalg.norm(ca[i] - cb[j]) / diag for i, j in zip(left, right))
                best = max(best, total)
    return best / max(len(a), len(b))

def stde_oracle(a, b, k_max=3):
    diag = diagonal(a.grid)

    def directed(p, q, k):
        total = 0.0
        for i in range(len(p) - k + 1):
            best = math.inf
            for j in range(len(q) - k + 1):
                gap = sum(np.linalg.norm(p[i + t] - q[j + t]) for t in range(k)) / k
                best = min(best, gap)
            total += best
        return total / (len(p) - k + 1)

    ca, cb = a.centers, b.centers
    per_k = []
    for k in range(1, min(k_max, len(a), len(b)) + 1):
        forward = 1.0 - directed(ca, cb, k) / diag
        backward = 1.0 - directed(cb, ca, k) / diag
        per_k.append((forward + backward) / 2.0)
    return sum(per_k) / len(per_k)

def _move_sequences(rows, cols):
    """Every monotone move sequence from (0, 0) to (rows - 1, cols - 1); 0=diag, 1=down, 2=right."""

    def go(i, j):
        if (i, j) == (rows - 1, cols - 1):
            yield ()
            return
        for move, (di, dj) in enumerate(((1, 1), (1, 0), (0, 1))):
            if i + di < rows and j + dj < cols:
                for rest in go(i + di, j + dj):
                    yield (move,) + rest

    return list(go(0, 0))

def _walk(moves):
    steps = ((1, 1), (1, 0), (0, 1))
    cells = [(0, 0)]
    for move in moves:
        cells.append((cells[-1][0] + steps[move][0], cells[-1][1] + steps[move][1]))
    return cells

def _directed_multimatch_oracle(a, b):
    diag = diagonal(GRID)
    ca, cb = a.centers, b.centers
    ua, ub = np.diff(ca, axis=0), np.diff(cb, axis=0)
    costed = []
    for moves in _move_sequences(len(ua), len(ub)):
        cells = _walk(moves)
        costed.append((sum(np.linalg.norm(ua[i] - ub[j]) for i, j in cells), moves, cells))
    cheapest = min(cost for cost, _, _ in costed)
    _, cells = min((moves, cells) for cost, moves, cells in costed if cost <= cheapest + 1e-9)
    vector, direction, position = [], [], []
    for i, j in cells:
        vector.append(1.0 - np.linalg.norm(ua[i] - ub[j]) / (2.0 * diag))
        nu, nv = np.linalg.norm(ua[i]), np.linalg.norm(ub[j])
        if nu == 0.0 and nv == 0.0:
            direction.append(1.0)
        elif nu == 0.0 or nv == 0.0:
            direction.append(0.0)
        else:
            cosine = np.clip(np.dot(ua[i], ub[j]) / (nu * nv), -1.0, 1.0)
            direction.append(1.0 - math.acos(cosine) / math.pi)
        position.append(1.0 - np.linalg.norm(ca[i] - cb[j]) / diag)
    return np.mean(vector), np.mean(direction), np.mean(position)

def multimatch_oracle(a, b):
    forward = _directed_multimatch_oracle(a, b)
    backward = _directed_multimatch_oracle(b, a)
    return tuple((x + y) / 2.0 for x, y in zip(forward, backward))

def _check_multimatch(lengths):
    paths = list(_paths(lengths))
    for a in paths:
        for b in paths:
            got = multimatch(a, b)
            want = multimatch_oracle(a, b)
            assert got.vector == pytest.approx(want[0], abs=1e-9), (a.cells, b.cells)
            assert got.direction == pytest.approx(want[1], abs=1e-6), (a.cells, b.cells)
            assert got.position == pytest.approx(want[2], abs=1e-9), (a.cells, b.cells)

# =============================================================================
# Tests
# =============================================================================

def test_sed_matches_brute_force():
    for a in _paths((1, 2, 3, 4)):
        for b in _paths((1, 2, 3)):
            assert sed(a, b) == sed_oracle(a.cells, b.cells)

def test_scanmatch_matches_exhaustive_alignment():
    for a in _paths((1, 2, 3)):
        for b in _paths((1, 2, 3)):
            assert scanmatch(a, b) == pytest.approx(scanmatch_oracle(a, b), abs=1e-12)

def test_multimatch_matches_brute_force_on_short_paths():
    _check_multimatch((2, 3))

@pytest.mark.slow
def test_multimatch_matches_brute_force_on_every_small_path():
    _check_multimatch((2, 3, 4))

@pytest.mark.slow
def test_scanmatch_matches_exhaustive_alignment_up_to_four():
    paths = list(_paths((1, 2, 3, 4)))
    for a in paths:
        for b in paths:
            assert scanmatch(a, b) == pytest.approx(scanmatch_oracle(a, b), abs=1e-12)

def test_stde_matches_the_window_double_loop():
    for a in _paths((3,)):
        for b in _paths((2, 3)):
            assert stde(a, b) == pytest.approx(stde_oracle(a, b), abs=1e-12)

def test_sed_is_a_metric():
    rng = np.random.default_rng(3)
    paths = [
        QuantizedScanpath(tuple(rng.integers(0, GRID.n, size=int(rng.integers(1, 6)))), GRID)
        for _ in range(25)
    ]
    for a in paths:
        assert sed(a, a) == 0
        for b in paths:
            assert sed(a, b) == sed(b, a)
            assert (sed(a, b) == 0) == (a.cells == b.cells)
            for c in paths:
                assert sed(a, c) <= sed(a, b) + sed(b, c)

def test_scanmatch_never_rewards_a_farther_cell():
    grid = GridSpec(4, 4)
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(40):
        a = QuantizedScanpath(tuple(rng.integers(0, grid.n, size=int(rng.integers(1, 4)))), grid)
        cells = [int(c) for c in rng.integers(0, grid.n, size=int(rng.integers(1, 4)))]
        base = scanmatch(a, QuantizedScanpath(tuple(cells), grid))
        j = int(rng.integers(0, len(cells)))
        old = np.array(grid.cell_center(cells[j]))
        for candidate in range(grid.n):
            new = np.array(grid.cell_center(candidate))
            if all(np.linalg.norm(p - new) >= np.linalg.norm(p - old) for p in a.centers):
                moved = cells[:j] + [candidate] + cells[j + 1 :]
                assert scanmatch(a, QuantizedScanpath(tuple(moved), grid)) <= base + 1e-12
                checked += 1
    assert checked > 40

def _transpose(cell, grid):
    row, col = divmod(cell, grid.cols)
    return col * grid.cols + row

def _mirror(cell, grid):
    row, col = divmod(cell, grid.cols)
    return row * grid.cols + (grid.cols - 1 - col)

@pytest.mark.parametrize("relabel", [_transpose, _mirror])
def test_scores_ignore_geometry_preserving_relabelling(relabel):
    grid = GridSpec(4, 4)
    rng = np.random.default_rng(5)
    for _ in range(30):
        a_cells = tuple(int(c) for c in rng.integers(0, grid.n, size=int(rng.integers(2, 6))))
        b_cells = tuple(int(c) for c in rng.integers(0, grid.n, size=int(rng.integers(2, 6))))
        a, b = QuantizedScanpath(a_cells, grid), QuantizedScanpath(b_cells, grid)
        ra = QuantizedScanpath(tuple(relabel(c, grid) for c in a_cells), grid)
        rb = QuantizedScanpath(tuple(relabel(c, grid) for c in b_cells), grid)
        assert sed(ra, rb) == sed(a, b)
        assert scanmatch(ra, rb) == pytest.approx(scanmatch(a, b), abs=1e-12)
        assert stde(ra, rb) == pytest.approx(stde(a, b), abs=1e-12)
        for got, want in zip(multimatch(ra, rb), multimatch(a, b)):
            assert got == pytest.approx(want, abs=1e-12)

def test_identical_paths_score_perfectly():
    grid = GridSpec(4, 4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        cells = tuple(int(c) for c in rng.integers(0, grid.n, size=int(rng.integers(2, 8))))
        path = QuantizedScanpath(cells, grid)
        assert sed(path, path) == 0
        assert scanmatch(path, path) == 1.0
        assert stde(path, path) == 1.0
        assert tuple(multimatch(path, path)) == (1.0, 1.0, 1.0)

def test_scores_stay_in_range():
    grid = GridSpec(4, 4)
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = QuantizedScanpath(tuple(rng.integers(0, grid.n, size=int(rng.integers(2, 8)))), grid)
        b = QuantizedScanpath(tuple(rng.integers(0, grid.n, size=int(rng.integers(2, 8)))), grid)
        assert 0 <= sed(a, b) <= max(len(a), len(b))
        assert 0.0 <= scanmatch(a, b) <= 1.0
        assert 0.0 <= stde(a, b) <= 1.0
        assert stde(a, b) == pytest.approx(stde(b, a), abs=1e-12)
        assert all(0.0 <= score <= 1.0 for score in multimatch(a, b))

def test_stde_skips_windows_longer_than_a_path():
    short = QuantizedScanpath((0, 3), GRID)
    long = QuantizedScanpath((0, 3, 1, 2), GRID)
    assert stde(short, long, k_max=3) == stde(short, long, k_max=2)
    with pytest.raises(ValueError):
        stde(short, long, k_max=0)

def test_alignment_prefers_diagonal_then_down_then_right():
    flat = np.zeros((2, 2))
    assert alignment_path(flat) == [(0, 0), (1, 1)]
    assert alignment_path(np.zeros((3, 2))) == [(0, 0), (1, 1), (2, 1)]
    assert alignment_path(np.array([[0.0, 9.0], [0.0, 0.0]])) == [(0, 0), (1, 1)]
    assert alignment_path(np.array([[0.0, 0.0], [9.0, 9.0]])) == [(0, 0), (1, 1)]

def test_mismatched_grids_and_short_paths():
    a = QuantizedScanpath((0, 1), GridSpec(2, 2))
    b = QuantizedScanpath((0, 1), GridSpec(2, 3))
    with pytest.raises(GridMismatchError):
        sed(a, b)
    with pytest.raises(ScanpathTooShortError):
        multimatch(a, QuantizedScanpath((0,), GridSpec(2, 2)))

def test_one_cell_grid_is_all_perfect():
    grid = GridSpec(1, 1)
    a, b = QuantizedScanpath((0, 0), grid), QuantizedScanpath((0, 0, 0), grid)
    assert scanmatch(a, b) == pytest.approx(2.0 / 3.0)
    assert stde(a, b) == 1.0
    assert tuple(multimatch(a, b)) == (1.0, 1.0, 1.0)

def _mann_whitney(scores, labels):
    positives = [s for s, y in zip(scores, labels) if y == 1]
    negatives = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in positives for n in negatives)
    return wins / (len(positives) * len(negatives))

def test_auroc_counts_ties_as_half():
    rng = np.random.default_rng(2)
    for _ in range(20):
        labels = rng.integers(0, 2, size=15)
        labels[:2] = (0, 1)
        scores = rng.integers(0, 4, size=15).astype(float)
        assert auroc(scores, labels) == pytest.approx(_mann_whitney(scores, labels), abs=1e-12)
    with pytest.raises(SingleClassError):
        auroc(np.ones(3), np.ones(3, dtype=int))

def test_auroc_ignores_monotone_transforms():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 2, size=40)
    labels[:2] = (0, 1)
    scores = rng.normal(size=40)
    base = auroc(scores, labels)
    for transformed in (np.exp(3.0 * scores) + 1.0, np.arctan(scores), 5.0 * scores - 2.0):
        assert auroc(transformed, labels) == pytest.approx(base, abs=1e-12)

def test_f1_switches_to_macro_for_many_classes():
    assert f1(np.array([1, 0, 1, 1]), np.array([1, 0, 0, 1])) == pytest.approx(0.8)
    macro = f1(np.array([0, 1, 2, 2]), np.array([0, 1, 2, 1]))
    assert macro == pytest.approx((1.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0)

def test_compare_scanpaths_report():
    grid = GridSpec(4, 4)
    path = Scanpath(((0.1, 0.1, 0.2), (0.9, 0.1, 0.2), (0.9, 0.9, 0.2)))
    lone = Scanpath(((0.5, 0.5, 0.2),))
    report = compare_scanpaths([path, lone], [path, path], grid)
    assert report["count"] == 2
    assert report["pairs"][1]["mm_vector"] is None
    assert report["means"]["mm_vector"] == 1.0
    assert report["means"]["sed"] == pytest.approx(1.5)
    assert quantize(path, grid).cells == (0, 3, 15)
    with pytest.raises(LengthMismatchError):
        compare_scanpaths([path], [], grid)
