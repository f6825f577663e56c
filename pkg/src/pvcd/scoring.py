"""Aggregate per-frame KNN hits into per-video scores and rank candidates.

Every hit contributes its similarity to the score of the video it came
from; the videos with the highest accumulated scores are the candidates
handed to localization.
"""

from __future__ import annotations

from dataclasses import dataclass

from .index import Hit


@dataclass(frozen=True)
class VideoScore:
    video_index: int
    score: float


def score_videos(hits_per_frame: list[list[Hit]]) -> list[VideoScore]:
    """Sum hit similarities per video, over all query frames.

    Negative similarities are summed as-is; thresholding is a path
    constraint applied downstream, not here.  Output is ordered by
    ascending video index; empty input gives an empty list.
    """
    totals: dict[int, float] = {}
    for hits in hits_per_frame:
        for hit in hits:
            v = hit.frame_ref.video_index
            totals[v] = totals.get(v, 0.0) + hit.similarity
    return [VideoScore(v, totals[v]) for v in sorted(totals)]


def top_videos(scores: list[VideoScore], top_k_video: int) -> list[VideoScore]:
    """The top videos by score descending, ties by ascending video index."""
    if top_k_video < 1:
        raise ValueError(f"top_k_video must be >= 1, got {top_k_video}")
    ranked = sorted(scores, key=lambda s: (-s.score, s.video_index))
    return ranked[:top_k_video]
