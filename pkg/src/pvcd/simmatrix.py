"""Query-vs-candidate similarity matrices, dense or reconstructed from KNN hits.

Entries are (row, col, sim) triplets over a T x M grid: row = query frame,
col = reference frame.  The dense form holds every pairwise similarity;
the reconstructed form holds only the entries the KNN search returned for
one candidate video, which makes it a masked view of the dense matrix and
much cheaper to localize over.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .index import Hit


@dataclass
class SparseSimMatrix:
    """Triplet similarity matrix with distinct (row, col) entries.

    Entries are kept sorted by (row, col); ``rows``/``cols``/``sims`` are
    parallel arrays.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    sims: np.ndarray

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.sims = np.asarray(self.sims, dtype=np.float64)
        if not (self.rows.shape == self.cols.shape == self.sims.shape):
            raise ValueError("rows, cols, sims must be parallel 1-D arrays")
        if self.n_entries:
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise ValueError("entry row out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise ValueError("entry col out of range")
            if not np.isfinite(self.sims).all():
                raise ValueError("non-finite similarity entry")
        order = np.lexsort((self.cols, self.rows))
        self.rows, self.cols, self.sims = (
            self.rows[order],
            self.cols[order],
            self.sims[order],
        )
        keys = self.rows * self.n_cols + self.cols
        if np.unique(keys).shape[0] != keys.shape[0]:
            raise ValueError("duplicate (row, col) entry")

    @property
    def n_entries(self) -> int:
        return self.rows.shape[0]

    def to_dense(self) -> np.ndarray:
        """Dense T x M array with zeros at absent entries (test/debug helper)."""
        out = np.zeros((self.n_rows, self.n_cols))
        out[self.rows, self.cols] = self.sims
        return out


def dense_similarity(Q: np.ndarray, R: np.ndarray) -> SparseSimMatrix:
    """Fully populated similarity matrix: entry (t, j) = dot(q_t, r_j).

    Both inputs must be unit-row-normalized and share a dimension.  Each
    output row is computed as one matrix-vector product so entries are
    bit-identical to the per-row dot products the KNN search produces.
    """
    Q = np.asarray(Q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if Q.ndim != 2 or R.ndim != 2 or Q.shape[1] != R.shape[1]:
        raise ValueError(f"incompatible shapes {Q.shape} and {R.shape}")
    T, M = Q.shape[0], R.shape[0]
    sims = np.stack([R @ Q[t] for t in range(T)])
    rows, cols = np.divmod(np.arange(T * M), M)
    return SparseSimMatrix(T, M, rows, cols, sims.reshape(-1))


def reconstructed_similarity(
    hits_per_frame: list[list[Hit]], video_index: int, n_cols: int
) -> SparseSimMatrix:
    """Sparse matrix holding only the KNN-returned entries of one candidate video.

    Entry (t, j, s) appears for every hit of query frame t that refers to
    frame j of the candidate; everything else is absent (zero).
    """
    rows: list[int] = []
    cols: list[int] = []
    sims: list[float] = []
    for t, hits in enumerate(hits_per_frame):
        for hit in hits:
            if hit.frame_ref.video_index != video_index:
                continue
            j = hit.frame_ref.frame_index
            if j >= n_cols:
                raise ValueError(
                    f"hit frame index {j} out of range for candidate with {n_cols} frames"
                )
            rows.append(t)
            cols.append(j)
            sims.append(hit.similarity)
    return SparseSimMatrix(
        len(hits_per_frame),
        n_cols,
        np.array(rows, dtype=np.int64),
        np.array(cols, dtype=np.int64),
        np.array(sims, dtype=np.float64),
    )


def filter_top_k_one(
    m: SparseSimMatrix, top_k_one: int, sim_th: float
) -> SparseSimMatrix:
    """Keep per row only the ``top_k_one`` best entries, then drop those below ``sim_th``.

    Row ties break by ascending column.  Entries exactly at the threshold
    survive.  Idempotent for fixed parameters.
    """
    if top_k_one < 1:
        raise ValueError(f"top_k_one must be >= 1, got {top_k_one}")
    keep = np.zeros(m.n_entries, dtype=bool)
    start = 0
    while start < m.n_entries:
        end = start
        while end < m.n_entries and m.rows[end] == m.rows[start]:
            end += 1
        span = slice(start, end)
        order = np.lexsort((m.cols[span], -m.sims[span]))[:top_k_one]
        keep[start + order] = True
        start = end
    keep &= m.sims >= sim_th
    return SparseSimMatrix(
        m.n_rows, m.n_cols, m.rows[keep], m.cols[keep], m.sims[keep]
    )


def dump_matrix_csv(m: SparseSimMatrix, path: str | Path) -> None:
    """Write entries as ``row,col,sim`` CSV for eyeballing a similarity matrix."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "col", "sim"])
        for r, c, s in zip(m.rows, m.cols, m.sims):
            writer.writerow([int(r), int(c), repr(float(s))])
