"""End-to-end copy detection: search, shortlist, localize, report.

``run_query`` is the fast path: KNN search over the global index,
candidate videos by accumulated hit score, then per-candidate
localization over either the reconstructed (KNN-entries-only) or the
original (dense) similarity matrix.  ``run_scan`` is the exhaustive
baseline that localizes against every reference video without
shortlisting.  ``bench_search`` times the search back-ends against the
brute-force matrix-multiplication baseline.

Frame indices convert to seconds via the query's sampling rate; the
engine assumes references were sampled at the same rate.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderWeights, encode
from .evaluation import Detection
from .features import VideoFeatures, normalize_rows
from .index import GlobalIndex, knn_search, knn_search_batch
from .localization import CopySegment, PathParams, extract_segments
from .scoring import score_videos, top_videos
from .simmatrix import dense_similarity, filter_top_k_one, reconstructed_similarity

MATRIX_MODES = ("reconstructed", "original", "scan")


@dataclass(frozen=True)
class QueryParams:
    """Everything that governs one query run; defaults are the tuned values."""

    top_k_all: int = 200
    top_k_one: int = 20
    top_k_video: int = 20
    sim_th: float = 0.5
    max_step: int = 5
    max_diff: int = 5
    matrix_mode: str = "reconstructed"
    use_encoder: bool = False
    n_probe: int = 1
    max_segments: int = 1

    def __post_init__(self) -> None:
        if min(self.top_k_all, self.top_k_one, self.top_k_video) < 1:
            raise ValueError("top_k_all, top_k_one, top_k_video must all be >= 1")
        if not -1.0 <= self.sim_th <= 1.0:
            raise ValueError(f"sim_th must be in [-1, 1], got {self.sim_th}")
        if self.max_step < 1:
            raise ValueError(f"max_step must be >= 1, got {self.max_step}")
        if self.max_diff < 0:
            raise ValueError(f"max_diff must be >= 0, got {self.max_diff}")
        if self.matrix_mode not in MATRIX_MODES:
            raise ValueError(
                f"matrix_mode must be one of {MATRIX_MODES}, got {self.matrix_mode!r}"
            )
        if self.n_probe < 1 or self.max_segments < 1:
            raise ValueError("n_probe and max_segments must be >= 1")

    def path_params(self) -> PathParams:
        return PathParams(
            max_step=self.max_step,
            max_diff=self.max_diff,
            sim_th=self.sim_th,
            top_k_one=self.top_k_one,
        )


def _prepare_query_matrix(
    query: VideoFeatures, params: QueryParams, weights: EncoderWeights | None
) -> np.ndarray:
    if params.use_encoder and weights is None:
        raise ValueError("use_encoder is set but no encoder weights were supplied")
    matrix = normalize_rows(query).matrix
    if params.use_encoder:
        matrix = encode(matrix, weights)
    return matrix


def _segment_to_detection(
    seg: CopySegment, query_id: str, reference_id: str, fps: float
) -> Detection:
    return Detection(
        query_id=query_id,
        reference_id=reference_id,
        q_start=seg.q_start / fps,
        q_end=seg.q_end / fps,
        r_start=seg.r_start / fps,
        r_end=seg.r_end / fps,
        sim=seg.sim,
        length=seg.length,
    )


def run_query(
    index: GlobalIndex,
    query: VideoFeatures,
    params: QueryParams,
    weights: EncoderWeights | None = None,
) -> list[Detection]:
    """Detect copies of the query inside the indexed reference videos.

    Searches the global index frame by frame, shortlists the
    ``top_k_video`` highest-scoring videos, localizes within each
    candidate, and returns detections sorted by similarity descending
    (candidate rank breaks ties).
    """
    if params.matrix_mode == "scan":
        raise ValueError("matrix_mode 'scan' bypasses the index; use run_scan")
    if query.dim != index.dim:
        raise ValueError(f"query dim {query.dim} != index dim {index.dim}")
    q_matrix = _prepare_query_matrix(query, params, weights)
    hits_per_frame = knn_search_batch(index, q_matrix, params.top_k_all, params.n_probe)
    candidates = top_videos(score_videos(hits_per_frame), params.top_k_video)
    path_params = params.path_params()
    detections: list[Detection] = []
    for cand in candidates:
        n_frames = index.frame_counts[cand.video_index]
        if params.matrix_mode == "reconstructed":
            matrix = reconstructed_similarity(hits_per_frame, cand.video_index, n_frames)
        else:
            matrix = dense_similarity(q_matrix, index.video_rows(cand.video_index))
        matrix = filter_top_k_one(matrix, params.top_k_one, params.sim_th)
        for seg in extract_segments(matrix, path_params, params.max_segments):
            detections.append(
                _segment_to_detection(
                    seg, query.video_id, index.video_ids[cand.video_index], query.fps
                )
            )
    detections.sort(key=lambda det: -det.sim)
    return detections


def run_scan(
    references: list[VideoFeatures],
    query: VideoFeatures,
    params: QueryParams,
    weights: EncoderWeights | None = None,
) -> list[Detection]:
    """Exhaustive baseline: localize against every reference, no shortlist."""
    q_matrix = _prepare_query_matrix(query, params, weights)
    path_params = params.path_params()
    detections: list[Detection] = []
    for ref in references:
        if ref.dim != query.dim:
            raise ValueError(
                f"reference {ref.video_id!r} dim {ref.dim} != query dim {query.dim}"
            )
        r_matrix = normalize_rows(ref).matrix
        if params.use_encoder:
            r_matrix = encode(r_matrix, weights)
        matrix = filter_top_k_one(
            dense_similarity(q_matrix, r_matrix), params.top_k_one, params.sim_th
        )
        for seg in extract_segments(matrix, path_params, params.max_segments):
            detections.append(
                _segment_to_detection(seg, query.video_id, ref.video_id, query.fps)
            )
    detections.sort(key=lambda det: -det.sim)
    return detections


def index_videos(index: GlobalIndex) -> list[VideoFeatures]:
    """Reconstruct per-video feature objects from the stored index rows."""
    return [
        VideoFeatures(index.video_ids[i], index.video_rows(i).copy())
        for i in range(index.n_videos)
    ]


# ---------------------------------------------------------------------------
# timing harness


@dataclass(frozen=True)
class BenchRow:
    method: str
    ms_per_frame: float
    speedup: float  # relative to the matrix-multiplication baseline


@dataclass
class BenchReport:
    rows: list[BenchRow]
    n_queries: int
    n_frames: int
    repetitions: int
    top_k_all: int

    def to_text(self) -> str:
        lines = [
            f"search timing: {self.n_queries} queries, {self.n_frames} frames, "
            f"top_k_all={self.top_k_all}, {self.repetitions} repetition(s)",
            f"{'method':<24} {'time/frame (ms)':>16} {'speedup':>9}",
        ]
        for row in self.rows:
            lines.append(
                f"{row.method:<24} {row.ms_per_frame:>16.4f} {row.speedup:>9.2f}"
            )
        return "\n".join(lines)


def _time_method(fn, repetitions: int) -> float:
    start = time.perf_counter()
    for _ in range(repetitions):
        fn()
    return time.perf_counter() - start


def bench_search(
    index: GlobalIndex,
    queries: list[VideoFeatures],
    params: QueryParams,
    repetitions: int = 1,
    n_probes: list[int] | None = None,
) -> BenchReport:
    """Mean per-frame search time for matmul, flat, and IVF back-ends.

    The matrix-multiplication baseline computes the full similarity
    matrix per query video and fully sorts each row; flat and IVF go
    through ``knn_search``.  IVF rows appear only when the index carries
    a coarse partition, one row per probed cell count.
    """
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    matrices = [normalize_rows(q).matrix for q in queries]
    n_frames = sum(m.shape[0] for m in matrices)
    if n_frames == 0:
        raise ValueError("no query frames to benchmark")
    k = params.top_k_all
    flat = index.without_ivf()

    def matmul_all() -> None:
        for m in matrices:
            sims = m @ index.rows.T
            order = np.argsort(-sims, axis=1)
            _ = order[:, :k]

    def flat_all() -> None:
        for m in matrices:
            for t in range(m.shape[0]):
                knn_search(flat, m[t], k)

    rows: list[BenchRow] = []
    t_matmul = _time_method(matmul_all, repetitions)
    base_ms = t_matmul * 1000.0 / (repetitions * n_frames)
    rows.append(BenchRow("matrix multiplication", base_ms, 1.0))
    t_flat = _time_method(flat_all, repetitions)
    flat_ms = t_flat * 1000.0 / (repetitions * n_frames)
    rows.append(BenchRow("flat", flat_ms, base_ms / flat_ms))
    if index.ivf is not None:
        for n_probe in n_probes or [params.n_probe]:

            def ivf_all(p: int = n_probe) -> None:
                for m in matrices:
                    for t in range(m.shape[0]):
                        knn_search(index, m[t], k, n_probe=p)

            t_ivf = _time_method(ivf_all, repetitions)
            ivf_ms = t_ivf * 1000.0 / (repetitions * n_frames)
            rows.append(
                BenchRow(f"ivf(n_probe={n_probe})", ivf_ms, base_ms / ivf_ms)
            )
    return BenchReport(rows, len(queries), n_frames, repetitions, k)


# ---------------------------------------------------------------------------
# detection persistence (JSON lines)


def write_detections_jsonl(detections: list[Detection], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for det in detections:
            f.write(
                json.dumps(
                    {
                        "query_id": det.query_id,
                        "reference_id": det.reference_id,
                        "q_start_s": det.q_start,
                        "q_end_s": det.q_end,
                        "r_start_s": det.r_start,
                        "r_end_s": det.r_end,
                        "sim": det.sim,
                        "length": det.length,
                    }
                )
                + "\n"
            )


def read_detections_jsonl(path: str | Path) -> list[Detection]:
    out: list[Detection] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(
                    Detection(
                        query_id=obj["query_id"],
                        reference_id=obj["reference_id"],
                        q_start=obj["q_start_s"],
                        q_end=obj["q_end_s"],
                        r_start=obj["r_start_s"],
                        r_end=obj["r_end_s"],
                        sim=obj["sim"],
                        length=obj["length"],
                    )
                )
            except (KeyError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: bad detection record: {e}") from None
    return out
