"""Transformer encoder over a video's frame-feature sequence.

One standard post-norm encoder block: per-head linear projections to
query/key/value, scaled dot-product attention, head concatenation and
output projection, residual add, LayerNorm, a two-layer ReLU
feed-forward, a second residual and LayerNorm, then a row-wise L2
re-normalization so the output plugs into the same cosine machinery as
the raw features.  Output shape always equals input shape.

The forward pass can record every intermediate activation; the backward
pass in :mod:`pvcd.training` consumes that cache to produce analytic
gradients (verified against finite differences).

Weight file format (``.pvcw``, little-endian):
    magic ``PVCW`` | version u16 = 1 | d u32 | n_heads u32 | d_k u32 |
    ffn_dim u32 | parameter tensors float32, row-major, in PARAM_ORDER
    (head-major for the per-head projections).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import FormatError, check_version, read_exact, read_magic, read_u16, read_u32, write_u16, write_u32

WEIGHTS_MAGIC = b"PVCW"
WEIGHTS_VERSION = 1

PARAM_ORDER = (
    "w_q",
    "w_k",
    "w_v",
    "w_o",
    "ln1_gain",
    "ln1_bias",
    "ffn_w1",
    "ffn_b1",
    "ffn_w2",
    "ffn_b2",
    "ln2_gain",
    "ln2_bias",
)


@dataclass(frozen=True)
class EncoderConfig:
    d: int
    n_heads: int = 2
    ffn_dim: int = 128
    layernorm_eps: float = 1e-6
    seed: int = 0
    positional: bool = False  # sinusoidal position signal added to the input

    def __post_init__(self) -> None:
        if self.d < 1 or self.n_heads < 1 or self.ffn_dim < 1:
            raise ValueError("all encoder dimensions must be >= 1")
        if self.d % self.n_heads != 0:
            raise ValueError(
                f"feature dim {self.d} not divisible by {self.n_heads} heads"
            )
        if self.layernorm_eps <= 0:
            raise ValueError("layernorm_eps must be positive")

    @property
    def d_k(self) -> int:
        return self.d // self.n_heads


@dataclass
class EncoderWeights:
    """All trainable tensors, plus the config they were built for."""

    config: EncoderConfig
    w_q: np.ndarray  # n_heads x d x d_k
    w_k: np.ndarray  # n_heads x d x d_k
    w_v: np.ndarray  # n_heads x d x d_k
    w_o: np.ndarray  # (n_heads * d_k) x d
    ln1_gain: np.ndarray  # d
    ln1_bias: np.ndarray  # d
    ffn_w1: np.ndarray  # d x ffn_dim
    ffn_b1: np.ndarray  # ffn_dim
    ffn_w2: np.ndarray  # ffn_dim x d
    ffn_b2: np.ndarray  # d
    ln2_gain: np.ndarray  # d
    ln2_bias: np.ndarray  # d

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in PARAM_ORDER]

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(
            self.config, *(getattr(self, n).copy() for n in PARAM_ORDER)
        )

    def __post_init__(self) -> None:
        cfg = self.config
        expected = _param_shapes(cfg)
        for name in PARAM_ORDER:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != expected[name]:
                raise ValueError(
                    f"{name} has shape {arr.shape}, expected {expected[name]}"
                )
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)


def _param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h, d, dk, ff = cfg.n_heads, cfg.d, cfg.d_k, cfg.ffn_dim
    return {
        "w_q": (h, d, dk),
        "w_k": (h, d, dk),
        "w_v": (h, d, dk),
        "w_o": (h * dk, d),
        "ln1_gain": (d,),
        "ln1_bias": (d,),
        "ffn_w1": (d, ff),
        "ffn_b1": (ff,),
        "ffn_w2": (ff, d),
        "ffn_b2": (d,),
        "ln2_gain": (d,),
        "ln2_bias": (d,),
    }


def init_encoder_weights(cfg: EncoderConfig) -> EncoderWeights:
    """Seeded init: weight matrices uniform in [-1/sqrt(d), 1/sqrt(d)],
    biases zero, LayerNorm gain 1 / bias 0."""
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / np.sqrt(cfg.d)

    def uniform(shape: tuple[int, ...]) -> np.ndarray:
        return rng.uniform(-bound, bound, size=shape)

    shapes = _param_shapes(cfg)
    return EncoderWeights(
        config=cfg,
        w_q=uniform(shapes["w_q"]),
        w_k=uniform(shapes["w_k"]),
        w_v=uniform(shapes["w_v"]),
        w_o=uniform(shapes["w_o"]),
        ln1_gain=np.ones(cfg.d),
        ln1_bias=np.zeros(cfg.d),
        ffn_w1=uniform(shapes["ffn_w1"]),
        ffn_b1=np.zeros(cfg.ffn_dim),
        ffn_w2=uniform(shapes["ffn_w2"]),
        ffn_b2=np.zeros(cfg.d),
        ln2_gain=np.ones(cfg.d),
        ln2_bias=np.zeros(cfg.d),
    )


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Numerically stable row-wise softmax; every output row sums to 1."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Classic sine/cosine position signal, n x d."""
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-np.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: pe[:, 1::2].shape[1]])
    return pe


def attention_head(
    X: np.ndarray, w_q: np.ndarray, w_k: np.ndarray, w_v: np.ndarray
) -> np.ndarray:
    """Single-head scaled dot-product self-attention.

    Projects the rows of X to query/key/value, scales the score matrix by
    1/sqrt(d_k), softmaxes per row, and mixes the values.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"input must be 2-D, got shape {X.shape}")
    d = X.shape[1]
    if w_q.shape[0] != d or w_k.shape[0] != d or w_v.shape[0] != d:
        raise ValueError(
            f"projection rows must match input dim {d}: "
            f"{w_q.shape}, {w_k.shape}, {w_v.shape}"
        )
    if not (w_q.shape[1] == w_k.shape[1] == w_v.shape[1]):
        raise ValueError("q/k/v projections must share their output dim")
    q, k, v = X @ w_q, X @ w_k, X @ w_v
    attn = softmax_rows(q @ k.T / np.sqrt(w_q.shape[1]))
    return attn @ v


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x - mu) / sigma
    return gain * xhat + bias, xhat, sigma


def forward_with_cache(X: np.ndarray, w: EncoderWeights, cfg: EncoderConfig) -> dict:
    """Full encoder forward pass, returning every intermediate needed by backprop."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.d:
        raise ValueError(f"input shape {X.shape} does not match encoder dim {cfg.d}")
    x = X + sinusoidal_positions(X.shape[0], cfg.d) if cfg.positional else X
    scale = np.sqrt(cfg.d_k)
    heads = []
    outputs = []
    for h in range(cfg.n_heads):
        q, k, v = x @ w.w_q[h], x @ w.w_k[h], x @ w.w_v[h]
        attn = softmax_rows(q @ k.T / scale)
        heads.append({"q": q, "k": k, "v": v, "attn": attn})
        outputs.append(attn @ v)
    concat = np.concatenate(outputs, axis=1)
    attn_out = concat @ w.w_o
    r1 = x + attn_out
    ln1_out, ln1_xhat, ln1_sigma = _layer_norm(r1, w.ln1_gain, w.ln1_bias, cfg.layernorm_eps)
    f1 = ln1_out @ w.ffn_w1 + w.ffn_b1
    a1 = np.maximum(f1, 0.0)
    f2 = a1 @ w.ffn_w2 + w.ffn_b2
    r2 = ln1_out + f2
    ln2_out, ln2_xhat, ln2_sigma = _layer_norm(r2, w.ln2_gain, w.ln2_bias, cfg.layernorm_eps)
    norms = np.linalg.norm(ln2_out, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise ValueError("encoder produced an all-zero row; cannot re-normalize")
    out = ln2_out / norms
    return {
        "x": x,
        "heads": heads,
        "concat": concat,
        "ln1_xhat": ln1_xhat,
        "ln1_sigma": ln1_sigma,
        "ln1_out": ln1_out,
        "f1": f1,
        "a1": a1,
        "ln2_xhat": ln2_xhat,
        "ln2_sigma": ln2_sigma,
        "ln2_out": ln2_out,
        "norms": norms,
        "out": out,
    }


def encode(X: np.ndarray, w: EncoderWeights, cfg: EncoderConfig | None = None) -> np.ndarray:
    """Encode a frame sequence; output has the input's shape and unit rows."""
    return forward_with_cache(X, w, cfg or w.config)["out"]


def _layer_norm_backward(
    dy: np.ndarray, xhat: np.ndarray, sigma: np.ndarray, gain: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    ) / sigma
    return dx, dgain, dbias


def backward_from_cache(
    cache: dict, w: EncoderWeights, cfg: EncoderConfig, d_out: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every weight tensor, given dLoss/dOutput.

    The input rows are data, not parameters, so their gradient is dropped
    at the residual and projection entry points.
    """
    x = cache["x"]
    scale = np.sqrt(cfg.d_k)
    grads = {name: np.zeros_like(getattr(w, name)) for name in PARAM_ORDER}
    # row re-normalization: out = ln2_out / norms
    out, norms = cache["out"], cache["norms"]
    d_ln2_out = (d_out - out * (d_out * out).sum(axis=1, keepdims=True)) / norms
    # second LayerNorm
    d_r2, grads["ln2_gain"], grads["ln2_bias"] = _layer_norm_backward(
        d_ln2_out, cache["ln2_xhat"], cache["ln2_sigma"], w.ln2_gain
    )
    # feed-forward with residual
    d_f2 = d_r2
    grads["ffn_w2"] = cache["a1"].T @ d_f2
    grads["ffn_b2"] = d_f2.sum(axis=0)
    d_a1 = d_f2 @ w.ffn_w2.T
    d_f1 = d_a1 * (cache["f1"] > 0.0)
    grads["ffn_w1"] = cache["ln1_out"].T @ d_f1
    grads["ffn_b1"] = d_f1.sum(axis=0)
    d_ln1_out = d_r2 + d_f1 @ w.ffn_w1.T
    # first LayerNorm
    d_r1, grads["ln1_gain"], grads["ln1_bias"] = _layer_norm_backward(
        d_ln1_out, cache["ln1_xhat"], cache["ln1_sigma"], w.ln1_gain
    )
    # output projection and heads (residual branch into x carries no params)
    d_attn_out = d_r1
    grads["w_o"] = cache["concat"].T @ d_attn_out
    d_concat = d_attn_out @ w.w_o.T
    dk = cfg.d_k
    for h, head in enumerate(cache["heads"]):
        d_o = d_concat[:, h * dk : (h + 1) * dk]
        attn, q, k, v = head["attn"], head["q"], head["k"], head["v"]
        d_attn = d_o @ v.T
        d_v = attn.T @ d_o
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
        d_q = d_scores @ k / scale
        d_k = d_scores.T @ q / scale
        grads["w_q"][h] = x.T @ d_q
        grads["w_k"][h] = x.T @ d_k
        grads["w_v"][h] = x.T @ d_v
    return grads


def save_weights(w: EncoderWeights, path: str | Path) -> None:
    """Serialize weights in the PVCW format (float32 payload)."""
    cfg = w.config
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(WEIGHTS_MAGIC)
            write_u16(f, WEIGHTS_VERSION)
            for value in (cfg.d, cfg.n_heads, cfg.d_k, cfg.ffn_dim):
                write_u32(f, value)
            for _, arr in w.param_items():
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as e:
        raise OSError(f"failed to write weights file {path}: {e}") from e


def load_weights(path: str | Path, layernorm_eps: float = 1e-6) -> EncoderWeights:
    """Read a PVCW file.

    Only the dimensions live in the file; ``layernorm_eps`` and the
    positional flag must be re-supplied if they differed from defaults.
    """
    path = Path(path)
    with open(path, "rb") as f:
        read_magic(f, WEIGHTS_MAGIC)
        check_version(read_u16(f, "version"), WEIGHTS_VERSION, "weights file")
        d = read_u32(f, "d")
        n_heads = read_u32(f, "n_heads")
        d_k = read_u32(f, "d_k")
        ffn_dim = read_u32(f, "ffn_dim")
        if n_heads == 0 or d == 0 or ffn_dim == 0:
            raise FormatError(f"{path}: zero dimension in weights header")
        if d_k * n_heads != d:
            raise FormatError(
                f"{path}: inconsistent header: d_k {d_k} * n_heads {n_heads} != d {d}"
            )
        cfg = EncoderConfig(d=d, n_heads=n_heads, ffn_dim=ffn_dim, layernorm_eps=layernorm_eps)
        arrays = {}
        for name, shape in _param_shapes(cfg).items():
            count = int(np.prod(shape))
            raw = read_exact(f, 4 * count, f"tensor {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"{path}: unexpected bytes after weight payload")
    return EncoderWeights(config=cfg, **arrays)
