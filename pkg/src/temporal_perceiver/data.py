"""Synthetic boundary sequences, TPFT feature files, windowing and
window-to-video assembly of predictions."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURE_MAGIC = b"TPFT"
FEATURE_VERSION = 1


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray  # (N_total, C)
    gts: np.ndarray  # sorted boundary times in frames

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.gts = np.asarray(self.gts, dtype=np.float64).reshape(-1)
        if self.gts.size:
            if np.any(np.diff(self.gts) <= 0):
                raise ValueError(f"{self.video_id}: ground truths must be strictly increasing")
            if self.gts[0] < 0 or self.gts[-1] >= self.duration:
                raise ValueError(f"{self.video_id}: ground truth outside [0, {self.duration})")

    @property
    def duration(self) -> int:
        return self.features.shape[0]


@dataclass
class SyntheticConfig:
    min_segments: int = 2
    max_segments: int = 8
    min_segment_length: int = 10
    min_length: int = 100
    max_length: int = 400
    center_scale: float = 1.0
    ramp: int = 2
    noise: float = 0.3
    feature_dim: int = 64
    train_videos: int = 200
    val_videos: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.min_segment_length <= 2 * self.ramp:
            raise ValueError("min_segment_length must exceed twice the ramp half-width")
        if not 1 <= self.min_segments <= self.max_segments:
            raise ValueError("segment count range is empty")
        if self.min_segments * self.min_segment_length > self.min_length:
            raise ValueError("shortest video cannot hold the minimum number of segments")
        if not 0 < self.min_length <= self.max_length:
            raise ValueError("video length range is empty")


def generate_video(cfg: SyntheticConfig, seed: int, video_id: str | None = None) -> FeatureSequence:
    """Piecewise-constant cluster centres plus Gaussian noise, with linear
    cross-fades of half-width ``ramp`` frames around each boundary.

    A boundary sits at the first frame of each new segment.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
    most = min(cfg.max_segments, length // cfg.min_segment_length)
    n_seg = int(rng.integers(cfg.min_segments, most + 1))
    spare = length - n_seg * cfg.min_segment_length
    seg_len = cfg.min_segment_length + rng.multinomial(spare, np.full(n_seg, 1.0 / n_seg))
    gts = np.cumsum(seg_len)[:-1]
    centres = rng.normal(0.0, cfg.center_scale, size=(n_seg, cfg.feature_dim))

    frames = np.arange(length)
    feats = centres[np.searchsorted(gts, frames, side="right")]
    if cfg.ramp > 0:
        for q, b in enumerate(gts):
            span = frames[max(0, b - cfg.ramp) : min(length, b + cfg.ramp + 1)]
            w = np.clip((span - b) / (2.0 * cfg.ramp) + 0.5, 0.0, 1.0)[:, None]
            feats[span] = (1.0 - w) * centres[q] + w * centres[q + 1]
    feats = feats + rng.normal(0.0, cfg.noise, size=feats.shape)
    return FeatureSequence(video_id or f"video_{seed}", feats, gts.astype(np.float64))


def generate_split(cfg: SyntheticConfig, split: str) -> list[FeatureSequence]:
    """Independent per-video seeds derived from the master seed and index."""
    count = cfg.train_videos if split == "train" else cfg.val_videos
    offset = 0 if split == "train" else 1
    seqs = []
    for i in range(count):
        seed = int(np.random.SeedSequence([cfg.seed, offset, i]).generate_state(1)[0])
        seqs.append(generate_video(cfg, seed, f"{split}_{i:04d}"))
    return seqs


# ---------------------------------------------------------------------------
# TPFT files and manifests
# ---------------------------------------------------------------------------


def write_features(path, seq: FeatureSequence) -> None:
    """Little-endian: b"TPFT", u32 version, u32 N_total, u32 C, u32 G,
    G f64 boundary times, N_total*C f64 row-major features."""
    n, c = seq.features.shape
    header = FEATURE_MAGIC + struct.pack("<IIII", FEATURE_VERSION, n, c, len(seq.gts))
    body = np.ascontiguousarray(seq.gts, dtype="<f8").tobytes() + np.ascontiguousarray(seq.features, dtype="<f8").tobytes()
    Path(path).write_bytes(header + body)


def read_features(path, video_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 20:
        raise FeatureFormatError(f"{path}: truncated header")
    if data[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {data[:4]!r}")
    version, n, c, g = struct.unpack_from("<IIII", data, 4)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    expected = 20 + 8 * (g + n * c)
    if len(data) != expected:
        raise FeatureFormatError(f"{path}: size {len(data)} != expected {expected}")
    gts = np.frombuffer(data, "<f8", count=g, offset=20).astype(np.float64)
    feats = np.frombuffer(data, "<f8", count=n * c, offset=20 + 8 * g).astype(np.float64).reshape(n, c)
    return FeatureSequence(video_id or path.stem, feats, gts)


def write_manifest(path, entries: Iterable[tuple[str, str]]) -> None:
    """One ``<split> <path>`` line per video."""
    Path(path).write_text("".join(f"{split} {p}\n" for split, p in entries))


def read_manifest(path) -> list[tuple[str, Path]]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(maxsplit=1)
        if len(parts) != 2:
            raise FeatureFormatError(f"{path}:{lineno}: expected '<split> <path>'")
        split, file = parts
        file = Path(file)
        out.append((split, file if file.is_absolute() else path.parent / file))
    return out


def load_split(manifest, split: str) -> list[FeatureSequence]:
    return [read_features(p) for s, p in read_manifest(manifest) if s == split]


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass
class Window:
    video_id: str
    start: int
    features: np.ndarray  # (N, C), zero rows beyond valid_length
    gts: np.ndarray  # window-relative, as fractions of N
    valid_length: int
    scores: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def valid_mask(self) -> np.ndarray:
        return np.arange(self.size) < self.valid_length


def window_split(seq: FeatureSequence, n: int, mode: str = "infer", scores: np.ndarray | None = None) -> list[Window]:
    """Non-overlapping windows of ``n`` frames; the last one zero-padded.

    In ``train`` mode windows without ground truth are dropped. Per-frame
    ``scores`` for the whole video are sliced alongside (padding gets 0).
    """
    if n <= 0:
        raise ValueError("window size must be positive")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    total, c = seq.features.shape
    windows = []
    for start in range(0, max(total, 1), n):
        valid = min(n, total - start)
        feats = np.zeros((n, c))
        feats[:valid] = seq.features[start : start + valid]
        local = seq.gts[(seq.gts >= start) & (seq.gts < start + n)]
        if mode == "train" and local.size == 0:
            continue
        win_scores = None
        if scores is not None:
            win_scores = np.zeros(n)
            win_scores[:valid] = scores[start : start + valid]
        windows.append(Window(seq.video_id, start, feats, (local - start) / n, valid, win_scores))
    return windows


def assemble_predictions(windows: Sequence[Window], predictions: Sequence[tuple], gamma: float):
    """Threshold, map to absolute frames and sort. No suppression of
    near-duplicates is applied.

    ``predictions[i]`` is ``(t, p)`` arrays for ``windows[i]``. Returns
    ``(times, scores)`` arrays sorted by time.
    """
    times, scores = [], []
    for win, (t, p) in zip(windows, predictions):
        t = np.asarray(t, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        local = t * win.size
        keep = (p >= gamma) & (local < win.valid_length)
        times.append(win.start + local[keep])
        scores.append(p[keep])
    if not times:
        return np.zeros(0), np.zeros(0)
    times = np.concatenate(times)
    scores = np.concatenate(scores)
    order = np.argsort(times, kind="stable")
    return times[order], scores[order]
