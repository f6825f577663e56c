"""Frame-feature matrices and copy-segment annotations.

A video is represented by an M x d matrix of per-frame feature vectors,
row i holding the frame sampled at time i/fps seconds.  Features arrive
from an external extractor; this module loads, validates, normalizes and
persists them, and parses the CSV annotation format used for ground truth.

Feature file format (``.pvcf``, little-endian):
    magic ``PVCF`` | version u16 = 1 | dim u32 | frame_count u32 |
    frame_count x dim float32, row-major.

The file carries no video id; a manifest CSV (``video_id,relative_path``)
binds ids to files.  Annotations are CSV lines
``video_a,video_b,a_start,a_end,b_start,b_end`` with ``HH:MM:SS`` times.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import (
    FormatError,
    check_version,
    read_magic,
    read_u16,
    read_u32,
    write_u16,
    write_u32,
)

FEATURE_MAGIC = b"PVCF"
FEATURE_VERSION = 1


@dataclass
class VideoFeatures:
    """Per-frame feature vectors of one video.

    ``matrix`` is kept in float64 in memory; the on-disk payload is float32,
    so values loaded from a file round-trip bit-exactly.
    """

    video_id: str
    matrix: np.ndarray
    fps: float = 1.0

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {m.shape}")
        if m.shape[0] < 1 or m.shape[1] < 1:
            raise ValueError(
                f"feature matrix needs at least one frame and one dimension, "
                f"got shape {m.shape}"
            )
        if not np.isfinite(m).all():
            bad = int(np.flatnonzero(~np.isfinite(m).all(axis=1))[0])
            raise ValueError(f"non-finite feature value in row {bad}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        self.matrix = m

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def frame_time(self, frame_index: int) -> float:
        """Time in seconds of a frame index under this video's sampling rate."""
        return frame_index / self.fps


@dataclass(frozen=True)
class CopyAnnotation:
    """One annotated copy segment between two videos, spans in seconds (inclusive)."""

    video_a: str
    video_b: str
    a_start: float
    a_end: float
    b_start: float
    b_end: float

    def __post_init__(self) -> None:
        for name, start, end in (
            ("a", self.a_start, self.a_end),
            ("b", self.b_start, self.b_end),
        ):
            if start < 0 or end < 0:
                raise ValueError(f"span {name} has negative time: {start}..{end}")
            if start > end:
                raise ValueError(f"span {name} is inverted: {start} > {end}")


def normalize_rows(v: VideoFeatures) -> VideoFeatures:
    """Scale every row to unit L2 norm, preserving direction.

    Raises ValueError naming the row if any row is all-zero: a zero feature
    has no direction and would poison cosine similarity downstream.
    """
    norms = np.linalg.norm(v.matrix, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"cannot normalize all-zero feature row {int(zero[0])}")
    return VideoFeatures(v.video_id, v.matrix / norms[:, None], fps=v.fps)


def save_feature_file(v: VideoFeatures, path: str | Path) -> None:
    """Write a feature matrix in the PVCF binary format (float32 payload)."""
    path = Path(path)
    m = v.matrix
    try:
        with open(path, "wb") as f:
            f.write(FEATURE_MAGIC)
            write_u16(f, FEATURE_VERSION)
            write_u32(f, v.dim)
            write_u32(f, v.n_frames)
            f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
    except OSError as e:
        raise OSError(f"failed to write feature file {path}: {e}") from e


def load_feature_file(path: str | Path, video_id: str = "", fps: float = 1.0) -> VideoFeatures:
    """Parse a PVCF file.  Does not normalize.

    The format carries no id; callers bind one via a manifest (or pass it here).
    """
    path = Path(path)
    with open(path, "rb") as f:
        read_magic(f, FEATURE_MAGIC)
        check_version(read_u16(f, "version"), FEATURE_VERSION, "feature file")
        dim = read_u32(f, "dim")
        count = read_u32(f, "frame_count")
        if dim == 0:
            raise FormatError(f"{path}: dim is 0 at offset 6")
        if count == 0:
            raise FormatError(f"{path}: frame_count is 0 at offset 10")
        want = 4 * dim * count
        payload = f.read(want)
        if len(payload) != want:
            row = len(payload) // (4 * dim)
            raise FormatError(
                f"{path}: payload truncated in row {row}: wanted {want} bytes "
                f"at offset 14, got {len(payload)}"
            )
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"{path}: {len(trailing)}+ unexpected bytes after payload")
    m = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float64)
    if not np.isfinite(m).all():
        bad = int(np.flatnonzero(~np.isfinite(m).all(axis=1))[0])
        raise FormatError(f"{path}: non-finite feature value in row {bad}")
    return VideoFeatures(video_id or path.stem, m, fps=fps)


def _parse_timestamp(text: str) -> int:
    """``HH:MM:SS`` -> whole seconds."""
    parts = text.strip().split(":")
    if len(parts) != 3:
        raise ValueError(f"timestamp {text!r} is not HH:MM:SS")
    try:
        h, m, s = (int(p) for p in parts)
    except ValueError:
        raise ValueError(f"timestamp {text!r} has non-integer fields") from None
    if h < 0 or not 0 <= m < 60 or not 0 <= s < 60:
        raise ValueError(f"timestamp {text!r} out of range")
    return h * 3600 + m * 60 + s


def load_annotations(path: str | Path) -> list[CopyAnnotation]:
    """Parse the annotation CSV; one CopyAnnotation per non-empty line."""
    path = Path(path)
    out: list[CopyAnnotation] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 6:
                raise ValueError(
                    f"{path}:{lineno}: expected 6 fields, got {len(fields)}"
                )
            try:
                ann = CopyAnnotation(
                    video_a=fields[0].strip(),
                    video_b=fields[1].strip(),
                    a_start=_parse_timestamp(fields[2]),
                    a_end=_parse_timestamp(fields[3]),
                    b_start=_parse_timestamp(fields[4]),
                    b_end=_parse_timestamp(fields[5]),
                )
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            out.append(ann)
    return out


def load_manifest(path: str | Path) -> list[tuple[str, Path]]:
    """Parse a ``video_id,relative_path`` manifest; paths resolve relative to it."""
    path = Path(path)
    base = path.parent
    out: list[tuple[str, Path]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(fields)}")
            video_id, rel = fields[0].strip(), fields[1].strip()
            if not video_id or not rel:
                raise ValueError(f"{path}:{lineno}: empty video id or path")
            if video_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate video id {video_id!r}")
            seen.add(video_id)
            out.append((video_id, base / rel))
    return out


def load_videos_from_manifest(path: str | Path, fps: float = 1.0) -> list[VideoFeatures]:
    """Load every feature file named by a manifest, binding ids to matrices."""
    return [
        load_feature_file(p, video_id=vid, fps=fps) for vid, p in load_manifest(path)
    ]
