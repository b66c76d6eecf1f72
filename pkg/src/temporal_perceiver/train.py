"""Training and evaluation loops, ablation harnesses and attention dumps."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .coherence import DenseScorer, extract, gaussian_coherence, train_scorer
from .data import FeatureSequence, SyntheticConfig, Window, assemble_predictions, generate_split, load_split, window_split
from .matching import CALL_COUNTS, total_loss
from .metrics import MetricsReport, evaluate_video, mean_report
from .model import ModelConfig, TemporalPerceiver, attention_flops, read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

COHERENCE_SOURCES = ("learned-both", "learned-train-only", "gaussian-train-only")


class TrainingError(RuntimeError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    manifest: str | None = None
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    coherence: str = "learned-both"
    sigma: float = 2.0
    scorer_epochs: int = 5
    scorer_lr: float = 1e-3
    snippet: int = 9
    delta: float = 1.0
    out_dir: str = "runs/default"

    def validate(self) -> None:
        self.model.validate()
        if self.coherence not in COHERENCE_SOURCES:
            raise ValueError(f"coherence must be one of {COHERENCE_SOURCES}, got {self.coherence!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.manifest is not None and not Path(self.manifest).exists():
            raise FileNotFoundError(self.manifest)

    def with_model(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **changes))

    def flat(self) -> dict[str, str]:
        out = {f"model.{k}": v for k, v in dataclasses.asdict(self.model).items()}
        out.update({f"data.{k}": v for k, v in dataclasses.asdict(self.data).items()})
        for f in dataclasses.fields(self):
            if f.name not in ("model", "data"):
                value = getattr(self, f.name)
                out[f.name] = "" if value is None else value
        return {k: str(v) for k, v in out.items()}


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def run_config_from_dict(values: dict[str, str]) -> RunConfig:
    base = RunConfig()
    model, data, top = {}, {}, {}
    for key, raw in values.items():
        raw = raw.strip()
        if key.startswith("model."):
            name = key[6:]
            if not hasattr(base.model, name):
                raise KeyError(f"unknown config key {key!r}")
            model[name] = _coerce(raw, getattr(base.model, name))
        elif key.startswith("data."):
            name = key[5:]
            if not hasattr(base.data, name):
                raise KeyError(f"unknown config key {key!r}")
            data[name] = _coerce(raw, getattr(base.data, name))
        else:
            if not hasattr(base, key) or key in ("model", "data"):
                raise KeyError(f"unknown config key {key!r}")
            default = getattr(base, key)
            top[key] = (raw or None) if default is None else _coerce(raw, default)
    cfg = RunConfig(model=ModelConfig(**model), data=SyntheticConfig(**data), **top)
    return cfg


def load_run_config(path) -> RunConfig:
    """Flat ``key = value`` file; ``#`` comments; ``model.`` / ``data.``
    prefixes address the model and synthetic-data settings."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[run]\n" + Path(path).read_text())
    return run_config_from_dict(dict(parser["run"]))


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class WindowBatch:
    windows: list[Window]
    features: np.ndarray
    scores: np.ndarray
    valid: np.ndarray

    @classmethod
    def stack(cls, windows: Sequence[Window]) -> "WindowBatch":
        return cls(
            list(windows),
            np.stack([w.features for w in windows]),
            np.stack([w.scores for w in windows]),
            np.stack([w.valid_mask for w in windows]),
        )

    @property
    def gts(self) -> list[np.ndarray]:
        return [w.gts for w in self.windows]

    @property
    def valid_lengths(self) -> list[int]:
        return [w.valid_length for w in self.windows]


def load_data(cfg: RunConfig) -> tuple[list[FeatureSequence], list[FeatureSequence]]:
    if cfg.manifest:
        return load_split(cfg.manifest, "train"), load_split(cfg.manifest, "val")
    return generate_split(cfg.data, "train"), generate_split(cfg.data, "val")


def ranking_scores(seq: FeatureSequence, source: str, learned: np.ndarray, training: bool, sigma: float) -> np.ndarray:
    """Coherence scores used for ranking under the configured regime.

    In the train-only regimes inference uses constant scores, which makes the
    ranking fall back to temporal order.
    """
    if training and source == "gaussian-train-only":
        return gaussian_coherence(seq.gts, seq.duration, sigma)
    if training or source == "learned-both":
        return learned
    return np.zeros(seq.duration)


def make_windows(seqs, cfg: RunConfig, scorer: DenseScorer, training: bool, mode: str) -> list[Window]:
    """Backbone features and ranking scores per video, cut into windows."""
    out = []
    for seq in seqs:
        pooled, learned = extract(scorer, seq.features)
        scores = ranking_scores(seq, cfg.coherence, learned, training, cfg.sigma)
        out.extend(window_split(FeatureSequence(seq.video_id, pooled, seq.gts), cfg.model.window, mode, scores))
    return out


def new_scorer(cfg: RunConfig) -> DenseScorer:
    return DenseScorer(np.random.default_rng(cfg.seed + 7), cfg.data.feature_dim, cfg.model.feature_dim, cfg.snippet)


def build_scorer(cfg: RunConfig, train_seqs) -> DenseScorer:
    """Train the backbone. It supplies the detector's features in every
    regime and the ranking scores in the learned ones."""
    return train_scorer(new_scorer(cfg), train_seqs, cfg.scorer_epochs, sigma=cfg.sigma, lr=cfg.scorer_lr, seed=cfg.seed)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def predict_windows(model: TemporalPerceiver, windows: Sequence[Window], chunk: int = 64):
    """Final-stage (t, p) per window."""
    out = []
    with ad.no_grad():
        for lo in range(0, len(windows), chunk):
            batch = WindowBatch.stack(windows[lo : lo + chunk])
            final = model(batch.features, batch.scores, batch.valid).stages[-1]
            out.extend(zip(final.t.values, final.p.values))
    return out


def evaluate_model(model, seqs, cfg: RunConfig, scorer, gamma: float | None = None) -> MetricsReport:
    gamma = cfg.model.gamma if gamma is None else gamma
    per_video = {seq.video_id: make_windows([seq], cfg, scorer, False, "infer") for seq in seqs}
    flat = [w for ws in per_video.values() for w in ws]
    preds = predict_windows(model, flat)
    reports, pos = [], 0
    for seq in seqs:
        wins = per_video[seq.video_id]
        times, scores = assemble_predictions(wins, preds[pos : pos + len(wins)], gamma)
        pos += len(wins)
        reports.append(evaluate_video(times, scores, seq.gts, seq.duration, cfg.delta))
    return mean_report(reports)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    total: float
    loc: float
    cls: float
    align: float
    val_f1: float
    val_avg_f1: float
    wall_time: float

    def values(self) -> tuple:
        """Everything except wall time (for determinism comparisons)."""
        return dataclasses.astuple(self)[:-1]


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f.name for f in dataclasses.fields(EpochRecord)])
            for r in self.records:
                writer.writerow([repr(v) for v in dataclasses.astuple(r)])

    def comparable(self) -> list[tuple]:
        return [r.values() for r in self.records]

    def first_epoch_reaching(self, target_f1: float) -> float:
        for r in self.records:
            if r.val_f1 >= target_f1:
                return r.epoch
        return math.inf


@dataclass
class TrainResult:
    checkpoint: Path
    log: TrainLog
    model: TemporalPerceiver
    scorer: DenseScorer
    best_epoch: int
    best_val: MetricsReport | None


def save_run_checkpoint(path, cfg: RunConfig, model: TemporalPerceiver, scorer: DenseScorer, state=None) -> None:
    params = dict(state if state is not None else model.state_dict())
    params.update({f"scorer.{k}": v for k, v in scorer.state_dict().items()})
    # the output location is not part of the model, so copies stay bit-identical
    config = {k: v for k, v in cfg.flat().items() if k != "out_dir"}
    write_checkpoint(path, config, params)


def load_run_checkpoint(path) -> tuple[RunConfig, TemporalPerceiver, DenseScorer]:
    flat, params = read_checkpoint(path)
    cfg = run_config_from_dict(flat)
    model = TemporalPerceiver(cfg.model)
    model.load_state_dict({k: v for k, v in params.items() if not k.startswith("scorer.")})
    scorer = new_scorer(cfg)
    scorer.load_state_dict({k[7:]: v for k, v in params.items() if k.startswith("scorer.")})
    return cfg, model, scorer


def _check_feature_dim(seqs, expected: int) -> None:
    for seq in seqs:
        if seq.features.shape[1] != expected:
            raise ConfigMismatchError(f"{seq.video_id}: feature dim {seq.features.shape[1]} != configured {expected}")


def _train_step(model, params, state, batch: WindowBatch, cfg: RunConfig, epoch: int, index: int):
    try:
        out = model(batch.features, batch.scores, batch.valid)
        losses = total_loss(out.stages, batch.gts, out.align_map, cfg.model, batch.valid_lengths)
    except ad.NonFiniteError as exc:
        raise TrainingError(f"non-finite value at epoch={epoch} batch={index} term=forward: {exc}") from exc
    for term in ("loc", "cls", "align"):
        if not math.isfinite(getattr(losses, term)):
            raise TrainingError(f"non-finite loss at epoch={epoch} batch={index} term={term}")
    ad.backward(losses.total)
    ad.optimizer_step(params, state)
    return losses


def train(
    cfg: RunConfig,
    data: tuple[list[FeatureSequence], list[FeatureSequence]] | None = None,
    save: bool = True,
) -> TrainResult:
    """Fit the backbone scorer, then the detector on its features; keep the
    detector weights with the best val avg-f1."""
    cfg.validate()
    train_seqs, val_seqs = data if data is not None else load_data(cfg)
    _check_feature_dim(list(train_seqs) + list(val_seqs), cfg.data.feature_dim)
    scorer = build_scorer(cfg, train_seqs)
    windows = make_windows(train_seqs, cfg, scorer, True, "train")
    too_many = [w.video_id for w in windows if len(w.gts) > cfg.model.proposals]
    if too_many:
        raise ConfigMismatchError(f"windows hold more boundaries than proposals={cfg.model.proposals}: {too_many[:3]}")

    model = TemporalPerceiver(cfg.model, seed=cfg.seed)
    params = model.parameters()
    state = ad.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng([cfg.seed, 1])
    train_log = TrainLog()
    best_state, best_score, best_epoch, best_val = model.state_dict(), -math.inf, 0, None

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        sums = np.zeros(4)
        n_batches = 0
        perm = order_rng.permutation(len(windows))
        for index, lo in enumerate(range(0, len(perm), cfg.batch_size)):
            batch = WindowBatch.stack([windows[i] for i in perm[lo : lo + cfg.batch_size]])
            losses = _train_step(model, params, state, batch, cfg, epoch, index)
            sums += (losses.total.item(), losses.loc, losses.cls, losses.align)
            n_batches += 1
        means = sums / max(n_batches, 1)
        val = evaluate_model(model, val_seqs, cfg, scorer)
        record = EpochRecord(epoch, *means.tolist(), val.f1[0.05], val.avg_f1, time.perf_counter() - start)
        train_log.records.append(record)
        log.info(
            "epoch %d loss %.4f (loc %.4f cls %.4f align %.4f) val f1@0.05 %.4f avg-f1 %.4f",
            epoch, record.total, record.loc, record.cls, record.align, record.val_f1, record.val_avg_f1,
        )
        if val.avg_f1 > best_score:
            best_state, best_score, best_epoch, best_val = model.state_dict(), val.avg_f1, epoch, val

    model.load_state_dict(best_state)
    out_dir = Path(cfg.out_dir)
    ckpt = out_dir / "checkpoint.tpck"
    if save:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_run_checkpoint(ckpt, cfg, model, scorer)
        train_log.to_csv(out_dir / "train_log.csv")
    return TrainResult(ckpt, train_log, model, scorer, best_epoch, best_val)


def evaluate(checkpoint, seqs: Sequence[FeatureSequence], gamma: float | None = None) -> MetricsReport:
    cfg, model, scorer = load_run_checkpoint(checkpoint)
    _check_feature_dim(seqs, cfg.data.feature_dim)
    return evaluate_model(model, seqs, cfg, scorer, gamma)


# ---------------------------------------------------------------------------
# ablation harnesses
# ---------------------------------------------------------------------------


def _boundary_count(m: int) -> int:
    return max(1, min(m, math.ceil(2 * m / 3)))


def sweep_compression(cfg: RunConfig, m_values: Sequence[int], data=None) -> list[dict]:
    """One model per latent count M (K = ceil(2M/3)), shared seed."""
    data = data if data is not None else load_data(cfg)
    rows = []
    for m in m_values:
        if not 1 <= m <= cfg.model.window:
            raise ValueError(f"M={m} outside [1, N={cfg.model.window}]")
        arm = cfg.with_model(latents=m, boundary_queries=_boundary_count(m))
        arm.out_dir = str(Path(cfg.out_dir) / f"m{m}")
        result = train(arm, data)
        flops = attention_flops(cfg.model.window, m, cfg.model.width, cfg.model.heads, cfg.model.enc_layers)
        rows.append({"M": m, "avg_f1": result.best_val.avg_f1 if result.best_val else 0.0, "flops": flops.compressed})
    return rows


def sweep_query_ratio(cfg: RunConfig, k_values: Sequence[int], data=None) -> list[dict]:
    """One model per boundary-query count K at fixed M; rows sorted by K."""
    data = data if data is not None else load_data(cfg)
    rows = []
    for k in sorted(k_values):
        if not 1 <= k <= cfg.model.latents:
            raise ValueError(f"K={k} outside [1, M={cfg.model.latents}]")
        arm = cfg.with_model(boundary_queries=k)
        arm.out_dir = str(Path(cfg.out_dir) / f"k{k}")
        result = train(arm, data)
        rows.append({"K": k, "avg_f1": result.best_val.avg_f1 if result.best_val else 0.0})
    return rows


def convergence_ablation(
    cfg: RunConfig, target_f1: float, seeds: Sequence[int], data=None, finished: dict | None = None
) -> list[dict]:
    """Paired runs per seed with alpha_align in {1, 0} on shared data; epochs
    until val f1@0.05 first reaches ``target_f1`` (inf when never).

    ``finished`` may map (seed, alpha) to an existing TrainResult for that
    exact arm, which is reused instead of retrained.
    """
    data = data if data is not None else load_data(cfg)
    finished = finished or {}
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for arm_name, alpha in (("with_align", 1.0), ("without_align", 0.0)):
            arm = dataclasses.replace(cfg.with_model(alpha_align=alpha), seed=seed)
            arm.out_dir = str(Path(cfg.out_dir) / f"seed{seed}_{arm_name}")
            before = CALL_COUNTS["align_loss"]
            result = finished.get((seed, alpha)) or train(arm, data)
            row[f"epochs_{arm_name}"] = result.log.first_epoch_reaching(target_f1)
            row[f"final_avg_f1_{arm_name}"] = result.log.records[-1].val_avg_f1 if result.log.records else 0.0
            row[f"align_calls_{arm_name}"] = CALL_COUNTS["align_loss"] - before
            row[f"log_{arm_name}"] = result.log
        rows.append(row)
    return rows


def write_table(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])


def dump_attention(checkpoint, seq: FeatureSequence, out_dir, window_index: int = 0) -> list[Path]:
    """Write each encoder layer's head-averaged cross-attention (M rows x N
    columns, sorted-frame order) for one window of ``seq`` as CSV, plus a
    marker file with K and the ranking permutation."""
    cfg, model, scorer = load_run_checkpoint(checkpoint)
    _check_feature_dim([seq], cfg.data.feature_dim)
    windows = make_windows([seq], cfg, scorer, False, "infer")
    if not 0 <= window_index < len(windows):
        raise IndexError(f"window {window_index} outside [0, {len(windows)})")
    window = windows[window_index]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with ad.no_grad():
        out = model(window.features[None], window.scores[None], window.valid_mask[None])
    paths = []
    for i, attn in enumerate(out.encoder_maps):
        path = out_dir / f"encoder_layer{i + 1}.csv"
        np.savetxt(path, attn[0], delimiter=",", fmt="%.17g")
        paths.append(path)
    (out_dir / "marker.txt").write_text(
        f"K={cfg.model.boundary_queries}\nM={cfg.model.latents}\nN={cfg.model.window}\n"
        f"order={','.join(str(int(i)) for i in out.order[0])}\n"
    )
    return paths


def diagonal_mass(attn: np.ndarray, k: int) -> float:
    idx = np.arange(k)
    return float(attn[idx, idx].mean())


def tiny_grad_check(seed: int = 0) -> float:
    """Finite-difference check of the whole detector and loss on a tiny
    config (N=8, M=4, K=2, C=8, N_p=3, one encoder and one decoder layer)."""
    cfg = ModelConfig(
        window=8, width=8, feature_dim=4, latents=4, boundary_queries=2, proposals=3, enc_layers=1, dec_layers=1, heads=2
    )
    model = TemporalPerceiver(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    feats, scores = rng.normal(size=(1, 8, 4)), rng.random((1, 8))
    gts = [np.sort(rng.uniform(0.05, 0.95, 2))]

    def loss():
        out = model(feats, scores)
        return total_loss(out.stages, gts, out.align_map, cfg).total

    return ad.grad_check(loss, model.parameters())
