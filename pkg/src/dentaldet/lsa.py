"""Rectangular linear sum assignment.

Shortest augmenting paths with dual potentials (the Jonker-Volgenant family,
O(n^2 m) for n <= m), followed by a tie-break pass: among all optimal
matchings the one whose (row, column) pair sequence is lexicographically
smallest is returned.

Optimal matchings are exactly the perfect matchings of the zero-reduced-cost
("tight") edges once the problem is padded square with zero-cost dummies, so
the tie-break walks rows in order and, for each, moves it to the smallest
tight column reachable by an alternating path through rows not yet fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import NonFiniteCost


@dataclass(frozen=True)
class Matching:
    pairs: Tuple[Tuple[int, int], ...]
    total_cost: float

    @property
    def rows(self) -> Tuple[int, ...]:
        return tuple(r for r, _ in self.pairs)

    @property
    def cols(self) -> Tuple[int, ...]:
        return tuple(c for _, c in self.pairs)


def _shortest_augmenting_path(cost: np.ndarray):
    """Solve with rows <= cols. Returns (col4row, u, v) with c - u - v >= 0, tight on the matching."""
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)
    for cur in range(nr):
        shortest = np.full(nc, np.inf)
        path = np.full(nc, -1, dtype=np.int64)
        scanned = np.zeros(nc, dtype=bool)
        visited_rows = []
        min_val = 0.0
        i = cur
        sink = -1
        while sink < 0:
            visited_rows.append(i)
            reduced = min_val + cost[i] - u[i] - v
            better = ~scanned & (reduced < shortest)
            path[better] = i
            shortest[better] = reduced[better]
            remaining = np.flatnonzero(~scanned)
            vals = shortest[remaining]
            lowest = vals.min()
            ties = remaining[vals == lowest]
            free = ties[row4col[ties] < 0]
            j = int(free[0]) if free.size else int(ties[0])
            min_val = float(lowest)
            scanned[j] = True
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])
        u[cur] += min_val
        for r in visited_rows[1:]:
            u[r] += min_val - shortest[col4row[r]]
        v[scanned] -= min_val - shortest[scanned]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur:
                break
    return col4row, u, v


def _lexicographic_refine(tight: np.ndarray, match: np.ndarray, n_out: int) -> np.ndarray:
    """Lexicographically smallest perfect matching within ``tight`` (square), fixing rows in order.

    ``match[r]`` is the column of row ``r`` in a known perfect matching of
    ``tight``. Only the first ``n_out`` rows need their final column chosen.
    """
    n = tight.shape[0]
    match = match.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    for i in range(n_out):
        for c in np.flatnonzero(tight[i]):
            c = int(c)
            if c >= match[i]:
                break
            r = int(owner[c])
            if r < i:
                continue
            # re-seat row r, freeing match[i], using rows > i only
            target = int(match[i])
            prev_col = {}
            stack = [r]
            seen_cols = {c}
            found = -1
            while stack and found < 0:
                row = stack.pop()
                for c2 in np.flatnonzero(tight[row]):
                    c2 = int(c2)
                    if c2 in seen_cols:
                        continue
                    o = int(owner[c2])
                    if c2 != target and o <= i:
                        continue
                    seen_cols.add(c2)
                    prev_col[c2] = row
                    if c2 == target:
                        found = c2
                        break
                    stack.append(o)
            if found < 0:
                continue
            # walk back: each row on the path takes the column it reached
            col = found
            while True:
                row = prev_col[col]
                old = int(match[row])
                match[row] = col
                owner[col] = row
                if row == r:
                    break
                col = old
            match[i] = c
            owner[c] = i
            break
    return match


def solve_assignment(cost) -> Matching:
    """Minimum-cost matching of size min(n, m) for an n x m cost matrix."""
    c = np.array(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise ValueError(f"cost must be a non-empty 2-D matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise NonFiniteCost("cost matrix contains NaN or infinite entries")
    n, m = c.shape
    transposed = n > m
    work = c.T if transposed else c
    col4row, u, v = _shortest_augmenting_path(work)

    # square padded problem in the original orientation: real rows/cols first, zero-cost dummies after
    size = max(n, m)
    row_pot = np.zeros(size)
    col_pot = np.zeros(size)
    if transposed:
        row_pot[:n], col_pot[:m] = v, u
    else:
        row_pot[:n], col_pot[:m] = u, v
    padded = np.zeros((size, size))
    padded[:n, :m] = c
    scale = 1.0 + float(np.abs(c).max())
    tight = np.abs(padded - row_pot[:, None] - col_pot[None, :]) <= 1e-10 * scale

    match = np.full(size, -1, dtype=np.int64)
    if transposed:
        for col, row in enumerate(col4row):
            match[row] = col
    else:
        match[:n] = col4row
    used = set(match[match >= 0].tolist())
    free_cols = [j for j in range(size) if j not in used]
    for r in range(size):
        if match[r] < 0:
            match[r] = free_cols.pop(0)
    match = _lexicographic_refine(tight, match, n)

    pairs = tuple((r, int(match[r])) for r in range(n) if match[r] < m)
    total = math.fsum(c[r, j] for r, j in pairs)
    return Matching(pairs, total)

