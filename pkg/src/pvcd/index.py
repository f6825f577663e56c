"""Global frame-feature database with exact (flat) and inverted-file (IVF) search.

Every frame of every reference video is stored as one unit-norm row,
ordered ascending by (video index, frame index).  Search returns the
top-K rows by dot product (= cosine on unit vectors); ties break by
ascending row id so results are deterministic.

The IVF variant partitions rows by a seeded k-means coarse quantizer and
probes only the ``n_probe`` cells nearest to the query.  Probing all
cells reproduces flat search hit-for-hit.

Index file format (``.pvci``, little-endian):
    magic ``PVCI`` | version u16 = 1 | dim u32 | row_count u32 |
    n_videos u32 | per video: id length u16, UTF-8 id, frame_count u32 |
    rows float32 row-major | ivf flag u8 (0 = absent, 1 = present) |
    if present: n_cells u32 | centroids float32 | per cell: count u32 +
    count row ids u32.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .binio import (
    FormatError,
    check_version,
    read_exact,
    read_magic,
    read_u8,
    read_u16,
    read_u32,
    write_u8,
    write_u16,
    write_u32,
)
from .features import VideoFeatures, normalize_rows

INDEX_MAGIC = b"PVCI"
INDEX_VERSION = 1


@dataclass(frozen=True)
class FrameRef:
    """One stored frame: position of its video in the reference set plus frame index."""

    video_index: int
    frame_index: int


@dataclass(frozen=True)
class Hit:
    """One KNN answer: a stored frame and its cosine similarity to the query."""

    frame_ref: FrameRef
    similarity: float


@dataclass
class IvfStructure:
    """Coarse k-means partition: centroids plus the row ids assigned to each cell."""

    centroids: np.ndarray  # n_cells x d
    cells: list[np.ndarray]  # per cell, ascending row ids

    @property
    def n_cells(self) -> int:
        return self.centroids.shape[0]


@dataclass
class GlobalIndex:
    """All reference-frame features, searchable; immutable after build."""

    dim: int
    rows: np.ndarray  # total_rows x dim, unit float64
    video_ids: list[str]
    frame_counts: list[int]
    offsets: np.ndarray  # per video, row id of its frame 0 (cumulative)
    ivf: IvfStructure | None = None

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def n_videos(self) -> int:
        return len(self.video_ids)

    def row_to_ref(self, row: int) -> FrameRef:
        v = int(np.searchsorted(self.offsets, row, side="right")) - 1
        return FrameRef(v, row - int(self.offsets[v]))

    def ref_to_row(self, ref: FrameRef) -> int:
        return int(self.offsets[ref.video_index]) + ref.frame_index

    def video_rows(self, video_index: int) -> np.ndarray:
        """View of the stored unit rows of one video."""
        start = int(self.offsets[video_index])
        return self.rows[start : start + self.frame_counts[video_index]]

    def without_ivf(self) -> "GlobalIndex":
        """Flat view sharing the same rows (used by the timing harness)."""
        return replace(self, ivf=None)


def _stack_videos(videos: list[VideoFeatures]) -> tuple[np.ndarray, list[str], list[int]]:
    if not videos:
        raise ValueError("cannot build an index from an empty video list")
    dim = videos[0].dim
    for v in videos[1:]:
        if v.dim != dim:
            raise ValueError(
                f"dimension mismatch: video {videos[0].video_id!r} has d={dim} "
                f"but video {v.video_id!r} has d={v.dim}"
            )
    seen: set[str] = set()
    for v in videos:
        if v.video_id in seen:
            raise ValueError(f"duplicate video id {v.video_id!r} in reference set")
        seen.add(v.video_id)
    normalized = [normalize_rows(v) for v in videos]
    rows = np.vstack([v.matrix for v in normalized])
    return rows, [v.video_id for v in videos], [v.n_frames for v in videos]


def build_flat_index(videos: list[VideoFeatures]) -> GlobalIndex:
    """Stack every frame of every video, normalized, in ascending (video, frame) order."""
    rows, ids, counts = _stack_videos(videos)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    return GlobalIndex(rows.shape[1], rows, ids, counts, offsets)


def kmeans(
    points: np.ndarray, n_cells: int, iters: int = 20, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded Lloyd k-means; returns (centroids, assignment).

    Initialization picks ``n_cells`` distinct rows at random.  An empty
    cluster is re-seeded from the point farthest from its assigned
    centroid.  Deterministic for a fixed seed: ties in assignment go to
    the lowest cell id.
    """
    n = points.shape[0]
    if not 1 <= n_cells <= n:
        raise ValueError(f"n_cells must be in [1, {n}], got {n_cells}")
    rng = np.random.default_rng(seed)
    centroids = points[rng.choice(n, size=n_cells, replace=False)].copy()
    assign = np.full(n, -1, dtype=np.int64)
    sq_points = np.einsum("ij,ij->i", points, points)
    for _ in range(max(1, iters)):
        # squared distances via expansion; argmin ties -> lowest cell id
        d2 = sq_points[:, None] - 2.0 * points @ centroids.T + np.einsum(
            "ij,ij->i", centroids, centroids
        )
        new_assign = np.argmin(d2, axis=1)
        # re-seed empty cells from the farthest points, then reassign
        for _ in range(n_cells):
            counts = np.bincount(new_assign, minlength=n_cells)
            empty = np.flatnonzero(counts == 0)
            if empty.size == 0:
                break
            dist_to_own = d2[np.arange(n), new_assign]
            farthest = int(np.argmax(dist_to_own))
            centroids[empty[0]] = points[farthest]
            d2[:, empty[0]] = sq_points - 2.0 * points @ centroids[empty[0]] + float(
                centroids[empty[0]] @ centroids[empty[0]]
            )
            new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(n_cells):
            members = points[assign == c]
            if members.shape[0]:
                centroids[c] = members.mean(axis=0)
    return centroids, assign


def build_ivf_index(
    videos: list[VideoFeatures], n_cells: int, kmeans_iters: int = 20, seed: int = 0
) -> GlobalIndex:
    """Flat index plus a seeded k-means coarse partition of the rows."""
    index = build_flat_index(videos)
    if n_cells > index.n_rows:
        raise ValueError(
            f"n_cells={n_cells} exceeds total row count {index.n_rows}"
        )
    centroids, assign = kmeans(index.rows, n_cells, iters=kmeans_iters, seed=seed)
    cells = [np.flatnonzero(assign == c).astype(np.uint32) for c in range(n_cells)]
    index.ivf = IvfStructure(centroids, cells)
    return index


def _top_k_by_similarity(sims: np.ndarray, row_ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the top-k by similarity desc, ties by ascending row id."""
    n = sims.shape[0]
    if k >= n:
        order = np.lexsort((row_ids, -sims))
        return order
    # argpartition narrows the field, then ties at the k-th value are
    # re-resolved over all rows matching it so the ascending-id rule holds
    part = np.argpartition(-sims, k - 1)[:k]
    kth = sims[part].min()
    cand = np.flatnonzero(sims >= kth)
    order = cand[np.lexsort((row_ids[cand], -sims[cand]))]
    return order[:k]


def knn_search(
    index: GlobalIndex, query_row: np.ndarray, top_k_all: int, n_probe: int = 1
) -> list[Hit]:
    """Top-K stored frames by cosine similarity, descending.

    Flat indexes scan every row; IVF indexes scan only the ``n_probe``
    cells whose centroids are nearest to the query.  The query row is
    expected unit-norm (stored rows are).
    """
    q = np.asarray(query_row, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dim}")
    if top_k_all < 1:
        raise ValueError(f"top_k_all must be >= 1, got {top_k_all}")
    if index.ivf is None:
        sims = index.rows @ q
        row_ids = np.arange(index.n_rows)
    else:
        n_cells = index.ivf.n_cells
        if not 1 <= n_probe <= n_cells:
            raise ValueError(f"n_probe must be in [1, {n_cells}], got {n_probe}")
        cdist = np.einsum(
            "ij,ij->i", index.ivf.centroids, index.ivf.centroids
        ) - 2.0 * (index.ivf.centroids @ q)
        cell_order = np.lexsort((np.arange(n_cells), cdist))[:n_probe]
        row_ids = np.sort(np.concatenate([index.ivf.cells[c] for c in cell_order]))
        row_ids = row_ids.astype(np.int64)
        sims = index.rows[row_ids] @ q
    take = _top_k_by_similarity(sims, row_ids, top_k_all)
    return [
        Hit(index.row_to_ref(int(row_ids[i])), float(sims[i])) for i in take
    ]


def knn_search_batch(
    index: GlobalIndex, query_matrix: np.ndarray, top_k_all: int, n_probe: int = 1
) -> list[list[Hit]]:
    """Per-row knn_search over a T x d query matrix; output order matches input.

    Deliberately sequential so results are bit-identical to per-row calls.
    """
    qm = np.asarray(query_matrix, dtype=np.float64)
    if qm.ndim != 2 or qm.shape[0] < 1:
        raise ValueError(f"query matrix must have at least one row, got shape {qm.shape}")
    return [knn_search(index, qm[t], top_k_all, n_probe) for t in range(qm.shape[0])]


def save_index(index: GlobalIndex, path: str | Path) -> None:
    """Serialize the index (rows float32 payload, plus IVF section if present)."""
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(INDEX_MAGIC)
            write_u16(f, INDEX_VERSION)
            write_u32(f, index.dim)
            write_u32(f, index.n_rows)
            write_u32(f, index.n_videos)
            for vid, count in zip(index.video_ids, index.frame_counts):
                raw = vid.encode("utf-8")
                write_u16(f, len(raw))
                f.write(raw)
                write_u32(f, count)
            f.write(np.ascontiguousarray(index.rows, dtype="<f4").tobytes())
            if index.ivf is None:
                write_u8(f, 0)
            else:
                write_u8(f, 1)
                write_u32(f, index.ivf.n_cells)
                f.write(np.ascontiguousarray(index.ivf.centroids, dtype="<f4").tobytes())
                for cell in index.ivf.cells:
                    write_u32(f, cell.shape[0])
                    f.write(np.ascontiguousarray(cell, dtype="<u4").tobytes())
    except OSError as e:
        raise OSError(f"failed to write index file {path}: {e}") from e


def load_index(path: str | Path) -> GlobalIndex:
    """Read an index file; rows are re-normalized after the float32 round-trip."""
    path = Path(path)
    with open(path, "rb") as f:
        read_magic(f, INDEX_MAGIC)
        check_version(read_u16(f, "version"), INDEX_VERSION, "index file")
        dim = read_u32(f, "dim")
        n_rows = read_u32(f, "row_count")
        n_videos = read_u32(f, "n_videos")
        if dim == 0 or n_rows == 0 or n_videos == 0:
            raise FormatError(f"{path}: zero dim, row count, or video count in header")
        video_ids: list[str] = []
        frame_counts: list[int] = []
        for _ in range(n_videos):
            length = read_u16(f, "video id length")
            video_ids.append(read_exact(f, length, "video id").decode("utf-8"))
            frame_counts.append(read_u32(f, "frame_count"))
        if sum(frame_counts) != n_rows:
            raise FormatError(
                f"{path}: per-video frame counts sum to {sum(frame_counts)}, "
                f"header says {n_rows}"
            )
        rows = np.frombuffer(
            read_exact(f, 4 * n_rows * dim, "row payload"), dtype="<f4"
        ).reshape(n_rows, dim).astype(np.float64)
        norms = np.linalg.norm(rows, axis=1)
        if (norms == 0.0).any():
            raise FormatError(f"{path}: stored row {int(np.argmin(norms))} is all-zero")
        rows = rows / norms[:, None]
        ivf = None
        if read_u8(f, "ivf flag") == 1:
            n_cells = read_u32(f, "n_cells")
            centroids = np.frombuffer(
                read_exact(f, 4 * n_cells * dim, "centroid payload"), dtype="<f4"
            ).reshape(n_cells, dim).astype(np.float64)
            cells = []
            for _ in range(n_cells):
                count = read_u32(f, "cell size")
                cells.append(
                    np.frombuffer(
                        read_exact(f, 4 * count, "cell row ids"), dtype="<u4"
                    ).copy()
                )
            ivf = IvfStructure(centroids, cells)
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"{path}: unexpected bytes after index payload")
    offsets = np.concatenate(([0], np.cumsum(frame_counts)))
    return GlobalIndex(dim, rows, video_ids, frame_counts, offsets, ivf)
