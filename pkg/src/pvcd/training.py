"""Supervised training of the feature encoder.

A sample is a (query, reference) feature pair.  Positives carry the copy
segment location, which defines a ground-truth similarity matrix with
ones on the shifted diagonal of the copy and zeros elsewhere; negatives
use an all-zero target.  The loss is the mean squared weighted residual
between the encoded similarity matrix and that target, with the sparse
ones up-weighted against the abundant zeros.

Training runs Adam over per-sample analytic gradients (backprop through
both encoder applications and the similarity product).  Each epoch
subsamples the negative pool to the positive count so the classes stay
balanced.  Hard negatives come from the detections a baseline
(encoder-less) pipeline gets wrong.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import (
    EncoderConfig,
    EncoderWeights,
    PARAM_ORDER,
    backward_from_cache,
    forward_with_cache,
    init_encoder_weights,
)
from .evaluation import Detection, detection_matches_any
from .features import CopyAnnotation, VideoFeatures

DEFAULT_W_ZERO = 0.1
DEFAULT_W_ONE = 1.1


@dataclass
class TrainingSample:
    """One (query, reference) pair; ``segment`` is (s_q, s_r, length) or None."""

    query: np.ndarray  # T x d
    reference: np.ndarray  # M x d
    segment: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        self.query = np.asarray(self.query, dtype=np.float64)
        self.reference = np.asarray(self.reference, dtype=np.float64)
        if self.query.ndim != 2 or self.reference.ndim != 2:
            raise ValueError("query and reference must be 2-D feature matrices")
        if self.query.shape[1] != self.reference.shape[1]:
            raise ValueError(
                f"dimension mismatch: {self.query.shape} vs {self.reference.shape}"
            )
        if self.segment is not None:
            s_q, s_r, length = self.segment
            t, m = self.query.shape[0], self.reference.shape[0]
            if length < 1 or s_q < 0 or s_r < 0 or s_q + length > t or s_r + length > m:
                raise ValueError(
                    f"segment {self.segment} does not fit in {t}x{m} sample"
                )

    @property
    def is_positive(self) -> bool:
        return self.segment is not None

    def gt(self) -> np.ndarray:
        t, m = self.query.shape[0], self.reference.shape[0]
        if self.segment is None:
            return np.zeros((t, m))
        return gt_matrix(t, m, *self.segment)


def gt_matrix(T: int, M: int, s_q: int, s_r: int, L: int) -> np.ndarray:
    """Target similarity matrix: ones on the copy's shifted diagonal, zeros elsewhere."""
    if L < 1 or s_q < 0 or s_r < 0 or s_q + L > T or s_r + L > M:
        raise ValueError(f"segment (s_q={s_q}, s_r={s_r}, L={L}) out of bounds for {T}x{M}")
    gt = np.zeros((T, M))
    i = np.arange(L)
    gt[s_q + i, s_r + i] = 1.0
    return gt


def weighted_mse_loss(
    P: np.ndarray,
    P_gt: np.ndarray,
    w_zero: float = DEFAULT_W_ZERO,
    w_one: float = DEFAULT_W_ONE,
) -> float:
    """Mean over all T*M cells of the squared weighted residual.

    Each cell's residual is multiplied by ``w_one`` where the target is 1
    and ``w_zero`` elsewhere, inside the square.
    """
    P = np.asarray(P, dtype=np.float64)
    P_gt = np.asarray(P_gt, dtype=np.float64)
    if P.shape != P_gt.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {P_gt.shape}")
    weights = np.where(P_gt == 1.0, w_one, w_zero)
    return float((((P - P_gt) * weights) ** 2).mean())


def loss_and_gradient(
    sample: TrainingSample,
    w: EncoderWeights,
    cfg: EncoderConfig,
    w_zero: float = DEFAULT_W_ZERO,
    w_one: float = DEFAULT_W_ONE,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its analytic gradient w.r.t. every weight tensor.

    Both the query and the reference pass through the same encoder, so
    each weight accumulates gradient from both paths.
    """
    cache_q = forward_with_cache(sample.query, w, cfg)
    cache_r = forward_with_cache(sample.reference, w, cfg)
    eq, er = cache_q["out"], cache_r["out"]
    gt = sample.gt()
    p = eq @ er.T
    weights = np.where(gt == 1.0, w_one, w_zero)
    residual = (p - gt) * weights
    t, m = p.shape
    loss = float((residual**2).mean())
    d_p = 2.0 * residual * weights / (t * m)
    grads_q = backward_from_cache(cache_q, w, cfg, d_p @ er)
    grads_r = backward_from_cache(cache_r, w, cfg, d_p.T @ eq)
    grads = {name: grads_q[name] + grads_r[name] for name in PARAM_ORDER}
    return loss, grads


def loss_gradient(
    sample: TrainingSample,
    w: EncoderWeights,
    cfg: EncoderConfig,
    w_zero: float = DEFAULT_W_ZERO,
    w_one: float = DEFAULT_W_ONE,
) -> dict[str, np.ndarray]:
    return loss_and_gradient(sample, w, cfg, w_zero, w_one)[1]


class AdamOptimizer:
    """Textbook Adam with bias correction, one state pair per weight tensor."""

    def __init__(
        self,
        w: EncoderWeights,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in w.param_items()}
        self.v = {name: np.zeros_like(arr) for name, arr in w.param_items()}

    def step(self, w: EncoderWeights, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name in PARAM_ORDER:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / b1t) / (np.sqrt(self.v[name] / b2t) + self.eps)
            arr = getattr(w, name)
            arr -= self.lr * update


def _select_epoch_samples(
    positives: list[TrainingSample],
    negatives: list[TrainingSample],
    rng: np.random.Generator,
) -> list[TrainingSample]:
    """All positives plus negatives subsampled to the positive count.

    Sampling is without replacement while the pool allows it; a too-small
    pool is stretched with replacement so the classes still balance.
    """
    if not positives or not negatives:
        return list(positives) + list(negatives)
    replace = len(negatives) < len(positives)
    chosen = rng.choice(len(negatives), size=len(positives), replace=replace)
    return list(positives) + [negatives[int(i)] for i in chosen]


def train_encoder(
    samples: list[TrainingSample],
    cfg: EncoderConfig,
    epochs: int,
    learning_rate: float,
    init: EncoderWeights | None = None,
    w_zero: float = DEFAULT_W_ZERO,
    w_one: float = DEFAULT_W_ONE,
) -> tuple[EncoderWeights, list[float]]:
    """Adam training loop; returns the final weights and per-epoch mean loss.

    Deterministic for a fixed config seed: the seed drives the weight
    init, the per-epoch negative subsampling, and the sample order.
    """
    if not samples:
        raise ValueError("cannot train on an empty sample list")
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    w = init.copy() if init is not None else init_encoder_weights(cfg)
    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamOptimizer(w, learning_rate)
    positives = [s for s in samples if s.is_positive]
    negatives = [s for s in samples if not s.is_positive]
    history: list[float] = []
    for _ in range(epochs):
        epoch_samples = _select_epoch_samples(positives, negatives, rng)
        order = rng.permutation(len(epoch_samples))
        losses = []
        for i in order:
            loss, grads = loss_and_gradient(epoch_samples[int(i)], w, cfg, w_zero, w_one)
            optimizer.step(w, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return w, history


def save_history_csv(history: list[float], path) -> None:
    """Per-epoch training loss as ``epoch,mean_loss`` CSV."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,mean_loss\n")
        for epoch, loss in enumerate(history, start=1):
            f.write(f"{epoch},{loss!r}\n")


# ---------------------------------------------------------------------------
# training-set construction


def _crop(features: VideoFeatures, start_s: float, end_s: float, context: int = 0):
    """Frame rows covering an inclusive second span, widened by ``context`` frames."""
    last = features.n_frames - 1
    lo = max(0, int(round(start_s * features.fps)) - context)
    hi = min(last, int(round(end_s * features.fps)) + context)
    return features.matrix[lo : hi + 1], lo


def build_positive_samples(
    videos_by_id: dict[str, VideoFeatures],
    annotations: list[CopyAnnotation],
    context: int = 5,
) -> list[TrainingSample]:
    """One positive sample per annotation whose two videos are available.

    Crops both spans (with a little context so the diagonal is not always
    anchored at the origin) and records the in-crop segment location; the
    segment length is the shorter of the two annotated spans.
    """
    out: list[TrainingSample] = []
    for ann in annotations:
        va = videos_by_id.get(ann.video_a)
        vb = videos_by_id.get(ann.video_b)
        if va is None or vb is None:
            continue
        q_rows, q_lo = _crop(va, ann.a_start, ann.a_end, context)
        r_rows, r_lo = _crop(vb, ann.b_start, ann.b_end, context)
        s_q = int(round(ann.a_start * va.fps)) - q_lo
        s_r = int(round(ann.b_start * vb.fps)) - r_lo
        length = min(q_rows.shape[0] - s_q, r_rows.shape[0] - s_r)
        if length < 1:
            continue
        out.append(TrainingSample(q_rows, r_rows, (s_q, s_r, length)))
    return out


def _random_crop(
    video: VideoFeatures, rng: np.random.Generator, min_len: int = 3, max_len: int = 20
) -> tuple[np.ndarray, int, int]:
    length = int(rng.integers(min_len, max_len + 1))
    length = min(length, video.n_frames)
    start = int(rng.integers(0, video.n_frames - length + 1))
    return video.matrix[start : start + length], start, length


def _crops_annotated_as_copy(
    id_a: str,
    span_a: tuple[float, float],
    id_b: str,
    span_b: tuple[float, float],
    annotations: list[CopyAnnotation],
) -> bool:
    probe = Detection(
        query_id=id_a,
        reference_id=id_b,
        q_start=span_a[0],
        q_end=span_a[1],
        r_start=span_b[0],
        r_end=span_b[1],
        sim=1.0,
        length=1,
    )
    return detection_matches_any(probe, annotations)


def mine_hard_negatives(
    training_refs: list[VideoFeatures],
    training_queries: list[VideoFeatures],
    annotations: list[CopyAnnotation],
    baseline_params=None,
    seed: int = 0,
) -> list[TrainingSample]:
    """Negative samples from the baseline pipeline's false positives.

    Runs the encoder-less pipeline over the training queries; every
    detection that overlaps no annotation becomes a negative sample
    cropped at the detected spans.  If that yields fewer negatives than
    there are positives (one per usable annotation), random reference
    crops that are not annotated as copies pad out the difference.
    """
    from .index import build_flat_index
    from .pipeline import QueryParams, run_query

    params = baseline_params or QueryParams()
    if params.use_encoder:
        raise ValueError("hard-negative mining runs the baseline without the encoder")
    rng = np.random.default_rng(seed)
    index = build_flat_index(training_refs)
    refs_by_id = {v.video_id: v for v in training_refs}
    negatives: list[TrainingSample] = []
    for query in training_queries:
        for det in run_query(index, query, params):
            if detection_matches_any(det, annotations):
                continue
            q_rows, _ = _crop(query, det.q_start, det.q_end)
            r_rows, _ = _crop(refs_by_id[det.reference_id], det.r_start, det.r_end)
            negatives.append(TrainingSample(q_rows, r_rows, None))
    videos_by_id = dict(refs_by_id)
    for v in training_queries:
        videos_by_id.setdefault(v.video_id, v)
    n_positives = len(build_positive_samples(videos_by_id, annotations, context=0))
    while len(negatives) < n_positives:
        for _ in range(50):
            va = training_refs[int(rng.integers(len(training_refs)))]
            vb = training_refs[int(rng.integers(len(training_refs)))]
            rows_a, start_a, len_a = _random_crop(va, rng)
            rows_b, start_b, len_b = _random_crop(vb, rng)
            span_a = (start_a / va.fps, (start_a + len_a - 1) / va.fps)
            span_b = (start_b / vb.fps, (start_b + len_b - 1) / vb.fps)
            same_video_overlap = va.video_id == vb.video_id and not (
                span_a[1] < span_b[0] or span_b[1] < span_a[0]
            )
            if same_video_overlap:
                continue
            if _crops_annotated_as_copy(
                va.video_id, span_a, vb.video_id, span_b, annotations
            ):
                continue
            negatives.append(TrainingSample(rows_a, rows_b, None))
            break
        else:
            # pathological corpus: accept an arbitrary crop pair rather than spin
            va = training_refs[int(rng.integers(len(training_refs)))]
            rows_a, _, _ = _random_crop(va, rng)
            rows_b, _, _ = _random_crop(va, rng)
            negatives.append(TrainingSample(rows_a, rows_b, None))
    return negatives
