"""The latent-query compression encoder, proposal decoder and prediction heads."""

from __future__ import annotations

import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .coherence import rank_order
from .layers import AttentionBlock, LayerNorm, Linear, Module


@dataclass
class ModelConfig:
    window: int = 100  # N
    width: int = 64  # C
    feature_dim: int = 64
    latents: int = 50  # M
    boundary_queries: int = 34  # K
    proposals: int = 16  # N_p
    enc_layers: int = 3
    dec_layers: int = 3
    heads: int = 4
    ffn_mult: int = 4
    gamma: float = 0.9
    alpha_cls: float = 2.0
    alpha_loc: float = 1.0
    alpha_align: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.boundary_queries <= self.latents <= self.window:
            raise ValueError(
                f"need 1 <= K <= M <= N, got K={self.boundary_queries} M={self.latents} N={self.window}"
            )
        if self.width % self.heads or self.width % 2:
            raise ValueError(f"width {self.width} must be even and divisible by {self.heads} heads")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma {self.gamma} outside (0, 1]")
        if min(self.proposals, self.enc_layers, self.dec_layers, self.feature_dim) < 1:
            raise ValueError("proposals, layer counts and feature_dim must be positive")

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown model config key {key!r}")
            out[key] = float(raw) if types[key] in ("float", float) else int(raw)
        return cls(**out)


def sine_positional_encoding(n: int, width: int) -> np.ndarray:
    """(n, width) table; even channels sin, odd channels cos, geometric frequencies."""
    if width % 2:
        raise ValueError(f"width must be even, got {width}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, width, 2, dtype=np.float64) / width)[None, :]
    table = np.empty((n, width))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


# Gain on the slot-index encodings added to attention keys and latent
# queries; at unit gain the content term dominates the logits and latents
# are slow to lock onto their slots.
SLOT_SCALE = 4.0


class Prediction(NamedTuple):
    """Per-stage decoder output: locations t in [0,1] and confidences p, both (B, N_p)."""

    t: Tensor
    p: Tensor


class ModelOutput(NamedTuple):
    stages: list[Prediction]  # one per decoder layer, last is final
    align_map: Tensor  # (B, M, N) head-averaged last-layer encoder cross-attention, sorted order
    encoder_maps: list[np.ndarray]  # every encoder layer's head-averaged cross-attention
    order: np.ndarray  # (B, N) ranking permutation used


class TemporalPerceiver(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.width
        self.input_proj = Linear(rng, config.feature_dim, c)
        self.memory_norm = LayerNorm(c)
        self.boundary_queries = ad.normal_init(rng, (config.boundary_queries, c))
        self.context_queries = ad.normal_init(rng, (config.latents - config.boundary_queries, c))
        self.encoder = [AttentionBlock(rng, c, config.heads, config.ffn_mult) for _ in range(config.enc_layers)]
        self.encoder_norm = LayerNorm(c)
        self.proposal_queries = ad.normal_init(rng, (config.proposals, c))
        self.decoder = [AttentionBlock(rng, c, config.heads, config.ffn_mult) for _ in range(config.dec_layers)]
        self.decoder_norm = LayerNorm(c)
        self.loc_head = [Linear(rng, c, c), Linear(rng, c, c), Linear(rng, c, 1)]
        self.cls_head = Linear(rng, c, 1)
        self._pe = sine_positional_encoding(config.window, c)

    # -- pieces ------------------------------------------------------------

    def latent_queries(self) -> Tensor:
        return ad.concat([self.boundary_queries, self.context_queries], axis=0)

    def embed(self, features: np.ndarray, scores: np.ndarray, valid: np.ndarray):
        """Project, add positional encoding, then reorder rows by coherence.

        Padding frames are ranked last regardless of their score.
        """
        x = ad.add(self.input_proj(Tensor(features)), Tensor(self._pe[: features.shape[1]]))
        ranked = np.where(valid, scores, -np.inf)
        order = rank_order(ranked)
        rows = np.arange(features.shape[0])[:, None]
        return ad.gather_rows(x, order), valid[rows, order], order

    def encode(self, memory: Tensor, memory_mask: np.ndarray | None):
        """Latents self-attend then cross-attend into the sorted features.

        Keys carry a sine encoding of the sorted slot index and latent m's
        cross-attention query carries the encoding of index m, so boundary
        query m can address rank m (the alignment target) through one shared
        map. Values keep each frame's temporal encoding.

        Returns compressed states (B, M, C) and per-layer head-averaged
        cross-attention tensors (B, M, N).
        """
        b = memory.shape[0]
        memory = self.memory_norm(memory)
        slot_pos = Tensor(SLOT_SCALE * self._pe[: memory.shape[1]])
        latent_pos = Tensor(SLOT_SCALE * self._pe[: self.config.latents])
        x = ad.add(self.latent_queries(), Tensor(np.zeros((b, self.config.latents, self.config.width))))
        maps = []
        for layer in self.encoder:
            x, _, cross = layer(x, memory, memory_mask, slot_pos, latent_pos)
            maps.append(ad.mean(cross, axis=1))
        return self.encoder_norm(x), maps

    def decode(self, compressed: Tensor) -> list[Tensor]:
        """Proposal queries attend to the latents, whose keys carry the
        latent-index encoding. The queries themselves carry no index, so
        permuting them permutes the outputs."""
        b = compressed.shape[0]
        x = ad.add(self.proposal_queries, Tensor(np.zeros((b, self.config.proposals, self.config.width))))
        latent_pos = Tensor(SLOT_SCALE * self._pe[: self.config.latents])
        stages = []
        for layer in self.decoder:
            x, _, _ = layer(x, compressed, None, latent_pos)
            stages.append(self.decoder_norm(x))
        return stages

    def heads(self, phi: Tensor) -> Prediction:
        h = ad.relu(self.loc_head[0](phi))
        h = ad.relu(self.loc_head[1](h))
        t = ad.sigmoid(self.loc_head[2](h))
        p = ad.sigmoid(self.cls_head(phi))
        b, n = phi.shape[:2]
        return Prediction(ad.reshape(t, (b, n)), ad.reshape(p, (b, n)))

    # -- full pass ---------------------------------------------------------

    def __call__(self, features: np.ndarray, scores: np.ndarray, valid: np.ndarray | None = None) -> ModelOutput:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 2:
            features = features[None]
            scores = np.asarray(scores)[None]
            valid = None if valid is None else np.asarray(valid)[None]
        b, n, cf = features.shape
        if n != self.config.window or cf != self.config.feature_dim:
            raise ValueError(
                f"window shape ({n}, {cf}) does not match config ({self.config.window}, {self.config.feature_dim})"
            )
        if valid is None:
            valid = np.ones((b, n), dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        memory, mask, order = self.embed(features, np.asarray(scores, dtype=np.float64), valid)
        compressed, maps = self.encode(memory, None if mask.all() else mask)
        stages = [self.heads(phi) for phi in self.decode(compressed)]
        return ModelOutput(stages, maps[-1], [m.values for m in maps], order)


def model_forward(model: TemporalPerceiver, features, scores, valid=None) -> ModelOutput:
    return model(features, scores, valid)


# ---------------------------------------------------------------------------
# complexity accounting
# ---------------------------------------------------------------------------


class AttentionFlops(NamedTuple):
    compressed: int
    dense: int

    @property
    def ratio(self) -> float:
        return self.compressed / self.dense


def attention_score_macs(n: int, m: int, width: int) -> AttentionFlops:
    """Multiply-accumulates of QK^T per layer: latent self (M^2 C) plus
    cross (N M C) against full self-attention over the input (N^2 C)."""
    return AttentionFlops((n * m + m * m) * width, n * n * width)


def attention_flops(n: int, m: int, width: int, heads: int = 1, layers: int = 1) -> AttentionFlops:
    """Total attention MACs (score products plus value products) over all
    encoder layers. Head count splits the width and does not change the total."""
    if min(n, m, width, heads, layers) < 1:
        raise ValueError("all arguments must be positive")
    per_layer = attention_score_macs(n, m, width)
    return AttentionFlops(2 * per_layer.compressed * layers, 2 * per_layer.dense * layers)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TPCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_text(values: dict) -> bytes:
    return "\n".join(f"{k}={v}" for k, v in values.items()).encode()


def write_checkpoint(path, config: dict, params: dict[str, np.ndarray]) -> None:
    """Little-endian: magic, u32 version, u32 config length, config text
    (key=value lines), u32 blob count, then per blob: u32 name length, name,
    u32 rank, rank x u32 dims, f64 values."""
    cfg = _config_text(config)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, cfg_len = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg_raw = data[pos : pos + cfg_len].decode()
    pos += cfg_len
    config = dict(line.split("=", 1) for line in cfg_raw.splitlines() if line)
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = data[pos : pos + name_len].decode()
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if pos + 8 * n > len(data):
            raise CheckpointError(f"{path}: truncated in {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    return config, params


def model_config_dict(config: ModelConfig) -> dict:
    return asdict(config)


def forward_time(model: TemporalPerceiver, repeats: int = 5, seed: int = 0) -> float:
    """Median wall time of one no-grad forward pass on a random window."""
    rng = np.random.default_rng(seed)
    n = model.config.window
    feats = rng.normal(size=(1, n, model.config.feature_dim))
    scores = rng.uniform(size=(1, n))
    times = []
    with ad.no_grad():
        for _ in range(repeats):
            start = time.perf_counter()
            model(feats, scores)
            times.append(time.perf_counter() - start)
    return float(np.median(times))


__all__ = [
    "ModelConfig",
    "TemporalPerceiver",
    "ModelOutput",
    "Prediction",
    "sine_positional_encoding",
    "model_forward",
    "attention_flops",
    "attention_score_macs",
    "write_checkpoint",
    "read_checkpoint",
]
