"""Per-frame coherence scores and the coherence-ranked split of a window.

Two score sources are supported: summed Gaussian kernels around ground-truth
boundaries (training-time only, needs labels) and a small learned dense scorer
that predicts boundary likeliness from a k-frame snippet around each frame.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, Module


class EmptyGroundTruthWarning(UserWarning):
    pass


def gaussian_coherence(gt_times: Sequence[float], n: int, sigma: float = 2.0) -> np.ndarray:
    """s_i = min(1, sum_b exp(-(i - t_b)^2 / (2 sigma^2))) for frames 0..n-1."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    gts = np.asarray(gt_times, dtype=np.float64).reshape(-1)
    if gts.size == 0:
        warnings.warn("no ground truth; coherence is all zeros", EmptyGroundTruthWarning, stacklevel=2)
        return np.zeros(n)
    if gts.min() < 0 or gts.max() >= n:
        raise ValueError(f"ground truth outside [0, {n})")
    frames = np.arange(n, dtype=np.float64)[:, None]
    kernels = np.exp(-((frames - gts[None, :]) ** 2) / (2.0 * sigma**2))
    return np.minimum(1.0, kernels.sum(axis=1))


@dataclass(frozen=True)
class RankPermutation:
    order: np.ndarray  # order[j] = original frame index at sorted position j
    k: int

    @property
    def boundary(self) -> np.ndarray:
        return self.order[: self.k]

    @property
    def context(self) -> np.ndarray:
        return self.order[self.k :]


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Descending by score, ties broken by ascending temporal index. Works on
    the last axis, so a (B, N) batch gives one permutation per row."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=-1, kind="stable")


def rank_and_split(features: np.ndarray, scores: np.ndarray, k: int) -> tuple[RankPermutation, np.ndarray]:
    features = np.asarray(features)
    n = features.shape[0]
    if len(scores) != n:
        raise ValueError(f"{len(scores)} scores for {n} frames")
    if not 1 <= k < n:
        raise ValueError(f"K={k} outside [1, {n})")
    order = rank_order(scores)
    return RankPermutation(order, k), features[order]


class DenseScorer(Module):
    """Snippet classifier: temporal convolution (kernel 3) over the k frames
    centred at each position, ReLU, max-pool over time, linear + sigmoid.
    The pooled activations double as the per-frame features fed to the
    detector.

    Each snippet is mean-centred before the convolution so segment content
    cancels and only within-snippet change remains. Sequence ends are padded
    by replicating the first/last frame.
    """

    def __init__(self, rng: np.random.Generator, feature_dim: int, hidden: int = 32, snippet: int = 9, stride: int = 1):
        if snippet < 3 or snippet % 2 == 0:
            raise ValueError("snippet size must be odd and >= 3")
        self.snippet = snippet
        self.stride = stride
        self.conv = Linear(rng, 3 * feature_dim, hidden)
        self.out = Linear(rng, hidden, 1)
        self.history: list[float] = []

    def _conv_inputs(self, features: np.ndarray) -> np.ndarray:
        n = features.shape[0]
        half = self.snippet // 2
        centres = np.arange(0, n, self.stride)
        idx = np.clip(centres[:, None] + np.arange(-half, half + 1)[None, :], 0, n - 1)
        snippets = features[idx]  # (n, k, C)
        snippets = snippets - snippets.mean(axis=1, keepdims=True)
        taps = [snippets[:, j : j + self.snippet - 2] for j in range(3)]
        return np.concatenate(taps, axis=-1)  # (n, k-2, 3C)

    @property
    def input_dim(self) -> int:
        return self.conv.weight.shape[0] // 3

    @property
    def hidden(self) -> int:
        return self.conv.weight.shape[1]

    def embed(self, features: np.ndarray) -> Tensor:
        """Max-pooled snippet features, (n, hidden)."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] < self.snippet:
            raise ValueError(f"sequence of {features.shape[0]} frames shorter than snippet {self.snippet}")
        hidden = ad.relu(self.conv(Tensor(self._conv_inputs(features))))
        return ad.max_(hidden, axis=1)

    def __call__(self, features: np.ndarray) -> Tensor:
        logits = self.out(self.embed(features))
        return ad.reshape(ad.sigmoid(logits), (logits.shape[0],))


def scorer_forward(scorer: DenseScorer, features: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return scorer(features).values


def extract(scorer: DenseScorer, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backbone outputs for one video: pooled snippet features (n, hidden)
    and coherence scores (n,)."""
    with ad.no_grad():
        pooled = scorer.embed(features)
        scores = ad.sigmoid(scorer.out(pooled))
    return pooled.values, scores.values.reshape(-1)


def bce(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with (possibly soft) targets."""
    target = np.asarray(target, dtype=np.float64)
    pos = ad.multiply(ad.log(pred), Tensor(target))
    neg = ad.multiply(ad.log(ad.add(ad.scale(pred, -1.0), Tensor(1.0))), Tensor(1.0 - target))
    return ad.scale(ad.mean(ad.add(pos, neg)), -1.0)


def train_scorer(
    scorer: DenseScorer,
    sequences: Sequence,
    epochs: int,
    *,
    sigma: float = 2.0,
    lr: float = 1e-3,
    seed: int = 0,
) -> DenseScorer:
    """Fit the scorer with per-frame BCE against Gaussian coherence targets.

    ``sequences`` holds objects with ``features`` (N x C) and ``gts``.
    Mean loss per epoch is appended to ``scorer.history``.
    """
    if epochs <= 0:
        return scorer
    rng = np.random.default_rng(seed)
    params = scorer.parameters()
    state = ad.OptimizerState(lr=lr, weight_decay=0.0)
    targets = [gaussian_coherence(s.gts, s.features.shape[0], sigma) for s in sequences]
    for _ in range(epochs):
        losses = []
        for i in rng.permutation(len(sequences)):
            loss = bce(scorer(sequences[i].features), targets[i])
            ad.backward(loss)
            ad.optimizer_step(params, state)
            losses.append(loss.item())
        scorer.history.append(float(np.mean(losses)))
    return scorer


def ranking_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC AUC via the Mann-Whitney rank-sum statistic (average ranks for ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
