"""Copy-segment localization as a maximum-score path over similarity entries.

The entries of a (filtered) sparse similarity matrix form the nodes of a
DAG: an edge runs from p to p' when both coordinates advance by at least
1 and at most ``max_step``, and the row/column advances differ by less
than ``max_diff`` (with ``max_diff = 0`` meaning strictly diagonal
steps).  The copy segment is the path maximizing the summed similarity;
its endpoints give the segment boundaries and score/length its mean
similarity.

Score ties prefer the longer path, then the smaller (start, end)
coordinates, so results are deterministic and the exhaustive oracle
agrees with the dynamic program exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simmatrix import SparseSimMatrix

BRUTE_FORCE_NODE_CAP = 20


@dataclass(frozen=True)
class PathParams:
    """Path constraints: step bound, diagonal band half-width, similarity floor.

    ``sim_th`` and ``top_k_one`` are applied upstream by the similarity
    filter; they ride along here so one object describes the whole
    constraint set.
    """

    max_step: int = 5
    max_diff: int = 5
    sim_th: float = 0.5
    top_k_one: int = 20

    def __post_init__(self) -> None:
        if self.max_step < 1:
            raise ValueError(f"max_step must be >= 1, got {self.max_step}")
        if self.max_diff < 0:
            raise ValueError(f"max_diff must be >= 0, got {self.max_diff}")

    def step_ok(self, d_row: int, d_col: int) -> bool:
        """Whether one path step from node to node satisfies the constraints."""
        if not (0 < d_row <= self.max_step and 0 < d_col <= self.max_step):
            return False
        if self.max_diff == 0:
            return d_row == d_col
        return abs(d_row - d_col) < self.max_diff


@dataclass(frozen=True)
class CopySegment:
    """A localized detection: inclusive frame spans, path length, score, mean sim."""

    q_start: int
    q_end: int
    r_start: int
    r_end: int
    length: int
    score: float

    def __post_init__(self) -> None:
        if self.q_start > self.q_end or self.r_start > self.r_end:
            raise ValueError("segment spans must not be inverted")
        if self.length < 1:
            raise ValueError("path length must be >= 1")

    @property
    def sim(self) -> float:
        return self.score / self.length

    def _rank_key(self) -> tuple:
        # larger is better: score, then length, then smaller start/end coords
        return (
            self.score,
            self.length,
            -self.q_start,
            -self.r_start,
            -self.q_end,
            -self.r_end,
        )


def _segment_from_state(
    end_row: int, end_col: int, state: tuple[float, int, int, int]
) -> CopySegment:
    score, length, start_row, start_col = state
    return CopySegment(start_row, end_row, start_col, end_col, length, score)


def temporal_network(m: SparseSimMatrix, params: PathParams) -> CopySegment | None:
    """Best constraint-satisfying path through the matrix entries, or None if empty.

    Dynamic program over nodes sorted by (row, col): the constraint graph
    is a DAG under strictly increasing coordinates, so the best path
    ending at each node extends the best path at a compatible
    predecessor.  O(n * window) with the row-window bound; exact.
    """
    n = m.n_entries
    if n == 0:
        return None
    rows, cols, sims = m.rows, m.cols, m.sims
    # contiguous spans of equal row, for the predecessor window scan
    row_starts: dict[int, tuple[int, int]] = {}
    start = 0
    while start < n:
        end = start
        while end < n and rows[end] == rows[start]:
            end += 1
        row_starts[int(rows[start])] = (start, end)
        start = end
    # state per node: (score, length, start_row, start_col); plus predecessor
    states: list[tuple[float, int, int, int]] = [None] * n  # type: ignore[list-item]
    best_idx = -1
    best_cmp: tuple = ()
    for k in range(n):
        r, c, s = int(rows[k]), int(cols[k]), float(sims[k])
        best_state = (s, 1, r, c)
        for pr in range(max(0, r - params.max_step), r):
            span = row_starts.get(pr)
            if span is None:
                continue
            for j in range(*span):
                if not params.step_ok(r - int(rows[j]), c - int(cols[j])):
                    continue
                pj = states[j]
                cand = (pj[0] + s, pj[1] + 1, pj[2], pj[3])
                # better: higher score, then longer, then smaller start
                if (cand[0], cand[1], -cand[2], -cand[3]) > (
                    best_state[0],
                    best_state[1],
                    -best_state[2],
                    -best_state[3],
                ):
                    best_state = cand
        states[k] = best_state
        seg_cmp = (
            best_state[0],
            best_state[1],
            -best_state[2],
            -best_state[3],
            -r,
            -c,
        )
        if best_idx < 0 or seg_cmp > best_cmp:
            best_idx, best_cmp = k, seg_cmp
    return _segment_from_state(int(rows[best_idx]), int(cols[best_idx]), states[best_idx])


def brute_force_best_path(m: SparseSimMatrix, params: PathParams) -> CopySegment | None:
    """Exhaustive path enumeration; verification oracle for temporal_network.

    Refuses instances with more than BRUTE_FORCE_NODE_CAP nodes (the
    enumeration is exponential).  Applies exactly the same objective and
    tie rules as the dynamic program.
    """
    n = m.n_entries
    if n > BRUTE_FORCE_NODE_CAP:
        raise ValueError(
            f"brute force enumeration capped at {BRUTE_FORCE_NODE_CAP} nodes, got {n}"
        )
    if n == 0:
        return None
    rows, cols, sims = m.rows, m.cols, m.sims
    succ: list[list[int]] = [
        [
            j
            for j in range(n)
            if params.step_ok(int(rows[j] - rows[i]), int(cols[j] - cols[i]))
        ]
        for i in range(n)
    ]
    best: list = [None]

    def consider(end: int, score: float, length: int, start: int) -> None:
        key = (
            score,
            length,
            -int(rows[start]),
            -int(cols[start]),
            -int(rows[end]),
            -int(cols[end]),
        )
        if best[0] is None or key > best[0][0]:
            best[0] = (key, start, end, score, length)

    def extend(node: int, score: float, length: int, start: int) -> None:
        consider(node, score, length, start)
        for nxt in succ[node]:
            extend(nxt, score + float(sims[nxt]), length + 1, start)

    for i in range(n):
        extend(i, float(sims[i]), 1, i)
    _, start, end, score, length = best[0]
    return CopySegment(
        int(rows[start]), int(rows[end]), int(cols[start]), int(cols[end]), length, score
    )


def extract_segments(
    m: SparseSimMatrix, params: PathParams, max_segments: int = 1
) -> list[CopySegment]:
    """Repeated localization: take the best path, blank out its bounding
    rectangle (row-span x column-span), and repeat up to ``max_segments``.

    With the default of one segment this is exactly temporal_network.
    """
    if max_segments < 1:
        raise ValueError(f"max_segments must be >= 1, got {max_segments}")
    out: list[CopySegment] = []
    current = m
    while len(out) < max_segments:
        seg = temporal_network(current, params)
        if seg is None:
            break
        out.append(seg)
        keep = ~(
            (current.rows >= seg.q_start)
            & (current.rows <= seg.q_end)
            & (current.cols >= seg.r_start)
            & (current.cols <= seg.r_end)
        )
        if not keep.any():
            break
        current = SparseSimMatrix(
            current.n_rows,
            current.n_cols,
            current.rows[keep],
            current.cols[keep],
            current.sims[keep],
        )
    return out
