"""Segment-level precision/recall/F1 under the any-overlap criterion.

A detection counts as a true positive when some annotation for the same
(unordered) video pair overlaps it on both the query span and the
reference span; intervals are closed, so touching endpoints overlap.
Recall counts annotations covered by at least one detection, which keeps
the metric free of assignment ambiguity.  The threshold sweep reports
the best F1 reachable by discarding low-scoring detections.
"""

from __future__ import annotations

from dataclasses import dataclass

from .features import CopyAnnotation


@dataclass(frozen=True)
class Detection:
    """A localized copy with spans in seconds and the path's mean similarity."""

    query_id: str
    reference_id: str
    q_start: float
    q_end: float
    r_start: float
    r_end: float
    sim: float
    length: int

    def __post_init__(self) -> None:
        if self.q_start > self.q_end or self.r_start > self.r_end:
            raise ValueError("detection spans must not be inverted")
        if self.length < 1:
            raise ValueError("detection length must be >= 1")


def _spans_overlap(a_start: float, a_end: float, b_start: float, b_end: float) -> bool:
    return a_start <= b_end and b_start <= a_end


def detection_matches_annotation(det: Detection, ann: CopyAnnotation) -> bool:
    """Overlap on both axes, trying both orientations of the annotated pair."""
    if ann.video_a == det.query_id and ann.video_b == det.reference_id:
        if _spans_overlap(det.q_start, det.q_end, ann.a_start, ann.a_end) and _spans_overlap(
            det.r_start, det.r_end, ann.b_start, ann.b_end
        ):
            return True
    if ann.video_a == det.reference_id and ann.video_b == det.query_id:
        if _spans_overlap(det.r_start, det.r_end, ann.a_start, ann.a_end) and _spans_overlap(
            det.q_start, det.q_end, ann.b_start, ann.b_end
        ):
            return True
    return False


def detection_matches_any(det: Detection, annotations: list[CopyAnnotation]) -> bool:
    return any(detection_matches_annotation(det, ann) for ann in annotations)


def segment_f1(
    detections: list[Detection], annotations: list[CopyAnnotation]
) -> tuple[float, float, float]:
    """(precision, recall, f1); all zero when nothing can be scored."""
    tp = sum(1 for det in detections if detection_matches_any(det, annotations))
    covered = sum(
        1
        for ann in annotations
        if any(detection_matches_annotation(det, ann) for det in detections)
    )
    precision = tp / len(detections) if detections else 0.0
    recall = covered / len(annotations) if annotations else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return precision, recall, f1


def best_f1_over_thresholds(
    detections: list[Detection], annotations: list[CopyAnnotation]
) -> tuple[float, float, float, float]:
    """Sweep every distinct detection score as a keep-threshold.

    Returns (threshold, precision, recall, f1) for the best F1; ties go
    to the lowest threshold (keeping the most detections).
    """
    thresholds = sorted({det.sim for det in detections})
    best: tuple[float, float, float, float] | None = None
    for theta in [float("-inf")] + thresholds:
        kept = [det for det in detections if det.sim >= theta]
        p, r, f1 = segment_f1(kept, annotations)
        if best is None or f1 > best[3]:
            best = (theta, p, r, f1)
    assert best is not None
    return best


def evaluation_report(
    detections: list[Detection],
    annotations: list[CopyAnnotation],
    sweep: bool = False,
) -> dict:
    """JSON-ready summary: overall numbers plus a per-video-pair breakdown."""
    if sweep:
        threshold, precision, recall, f1 = best_f1_over_thresholds(
            detections, annotations
        )
        kept = [det for det in detections if det.sim >= threshold]
    else:
        threshold = float("-inf")
        kept = list(detections)
        precision, recall, f1 = segment_f1(kept, annotations)
    tp = sum(1 for det in kept if detection_matches_any(det, annotations))
    covered = sum(
        1
        for ann in annotations
        if any(detection_matches_annotation(det, ann) for det in kept)
    )
    per_pair: dict[str, dict[str, int]] = {}
    for det in kept:
        key = "|".join(sorted((det.query_id, det.reference_id)))
        entry = per_pair.setdefault(key, {"detections": 0, "true_positives": 0, "annotations": 0})
        entry["detections"] += 1
        entry["true_positives"] += int(detection_matches_any(det, annotations))
    for ann in annotations:
        key = "|".join(sorted((ann.video_a, ann.video_b)))
        entry = per_pair.setdefault(key, {"detections": 0, "true_positives": 0, "annotations": 0})
        entry["annotations"] += 1
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "threshold": threshold,
        "tp": tp,
        "fp": len(kept) - tp,
        "fn": len(annotations) - covered,
        "per_pair": per_pair,
    }
