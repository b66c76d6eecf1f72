"""One-to-one label assignment and the set-prediction loss stack."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Instrumentation: how many times each loss term was evaluated.
CALL_COUNTS: Counter = Counter()


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    """pred_idx[j] is the prediction assigned to ground truth j."""

    pred_idx: np.ndarray
    n_pred: int

    @property
    def gt_idx(self) -> np.ndarray:
        return np.arange(len(self.pred_idx))

    def as_dict(self) -> dict[int, int]:
        return {int(p): j for j, p in enumerate(self.pred_idx)}

    def labels(self) -> np.ndarray:
        out = np.zeros(self.n_pred)
        out[self.pred_idx] = 1.0
        return out


def pair_cost(t: float, p: float, t_gt: float, alpha_loc: float = 1.0, alpha_cls: float = 2.0) -> float:
    return alpha_loc * abs(t - t_gt) - alpha_cls * p


def cost_matrix(t, p, gts, alpha_loc: float = 1.0, alpha_cls: float = 2.0) -> np.ndarray:
    """(N_p, N_g) matrix of pair costs."""
    t = np.asarray(t, dtype=np.float64)[:, None]
    p = np.asarray(p, dtype=np.float64)[:, None]
    gts = np.asarray(gts, dtype=np.float64)[None, :]
    return alpha_loc * np.abs(t - gts) - alpha_cls * p


def _shortest_augmenting(cost: np.ndarray):
    """Hungarian method with potentials for an (n, m) matrix, n <= m.

    Returns the column of each row plus the row/column potentials, which
    satisfy u_i + v_j <= cost_ij with equality on the assignment and v <= 0.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.intp)  # 1-based row owning each column, 0 = free
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.intp)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _perfect_matching(rows: list[int], adj: dict[int, list[int]], cols: set[int]) -> bool:
    """Kuhn's augmenting paths: can every row be matched into ``cols``?"""
    match: dict[int, int] = {}

    def augment(r, seen):
        for c in adj[r]:
            if c in cols and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def hungarian_match(cost, tol: float = 1e-9) -> Assignment:
    """Minimum-cost injective map from ground truths (columns) to predictions
    (rows) of an (N_p, N_g) cost matrix, N_p >= N_g.

    Among equal-cost optima the lexicographically smallest tuple of
    prediction indices (taken in ground-truth order) is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost must be 2-D, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_gt > n_pred:
        raise MatchingError(f"{n_gt} ground truths exceed {n_pred} predictions")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix has non-finite entries")
    if n_gt == 0:
        return Assignment(np.zeros(0, dtype=np.intp), n_pred)

    pred_of_gt, u, v = _shortest_augmenting(cost.T)
    eps = tol * (1.0 + np.abs(cost).max())
    tight = (cost.T - u[:, None] - v[None, :]) <= eps  # (N_g, N_p)
    slack_free = np.abs(v) <= eps  # columns a zero-cost dummy row can take
    if tight.sum() == n_gt and slack_free.sum() == n_pred - n_gt:
        return Assignment(pred_of_gt, n_pred)

    # Optimal assignments are exactly the perfect matchings of the tight
    # subgraph of the problem padded with zero-cost dummy ground truths.
    dummies = [n_gt + d for d in range(n_pred - n_gt)]
    adj = {g: [int(c) for c in np.flatnonzero(tight[g])] for g in range(n_gt)}
    free_cols = [int(c) for c in np.flatnonzero(slack_free)]
    adj.update({d: free_cols for d in dummies})
    chosen = pred_of_gt.copy()
    remaining = set(range(n_pred))
    for g in range(n_gt):
        for cand in adj[g]:
            if cand not in remaining:
                continue
            if _perfect_matching(list(range(g + 1, n_gt)) + dummies, adj, remaining - {cand}):
                chosen[g] = cand
                break
        remaining.discard(int(chosen[g]))
    return Assignment(chosen, n_pred)


def assignment_cost(cost: np.ndarray, assignment: Assignment) -> float:
    return float(cost[assignment.pred_idx, assignment.gt_idx].sum())


# ---------------------------------------------------------------------------
# losses; batched cores operate on (B, N_p) tensors
# ---------------------------------------------------------------------------


def _as_batch(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    return ad.reshape(x, (1, x.shape[-1])) if x.ndim == 1 else x


def batched_loc_loss(t: Tensor, gts: Sequence[np.ndarray], assignments: Sequence[Assignment]) -> Tensor:
    """Mean over windows with ground truth of the per-window mean L1 over
    matched pairs. Raises when no window has a match."""
    b, n_pred = t.shape
    active = [i for i, a in enumerate(assignments) if len(a.pred_idx)]
    if not active:
        raise MatchingError("empty assignment: no matched pairs")
    flat_idx, targets, weights = [], [], []
    for i in active:
        a = assignments[i]
        flat_idx.append(i * n_pred + a.pred_idx)
        targets.append(np.asarray(gts[i], dtype=np.float64)[a.gt_idx])
        weights.append(np.full(len(a.pred_idx), 1.0 / (len(a.pred_idx) * len(active))))
    picked = ad.embedding(ad.reshape(t, (b * n_pred,)), np.concatenate(flat_idx))
    diff = ad.abs_(ad.add(picked, Tensor(-np.concatenate(targets))))
    return ad.sum_(ad.multiply(diff, Tensor(np.concatenate(weights))))


def batched_cls_loss(p: Tensor, assignments: Sequence[Assignment]) -> Tensor:
    """Binary cross-entropy over all N_p predictions (matched = 1), averaged."""
    labels = np.stack([a.labels() for a in assignments])
    pos = ad.multiply(ad.log(p), Tensor(labels))
    neg = ad.multiply(ad.log(ad.add(ad.scale(p, -1.0), Tensor(1.0))), Tensor(1.0 - labels))
    return ad.scale(ad.mean(ad.add(pos, neg)), -1.0)


def loc_loss(t, gts, assignment: Assignment) -> Tensor:
    """Mean |t_n - gt| over matched pairs of one window."""
    return batched_loc_loss(_as_batch(t), [np.asarray(gts, dtype=np.float64)], [assignment])


def cls_loss(p, assignment: Assignment) -> Tensor:
    return batched_cls_loss(_as_batch(p), [assignment])


def align_loss(attn: Tensor, k: int, valid_lengths: Sequence[int] | None = None) -> Tensor:
    """-log of the mean diagonal mass over the first K rows of an (M, N) or
    (B, M, N) attention map, averaged over the batch.

    With ``valid_lengths`` the diagonal stops at the window's valid length so
    padding columns (which carry no attention) are not targeted.
    """
    CALL_COUNTS["align_loss"] += 1
    if not isinstance(attn, Tensor):
        attn = Tensor(np.asarray(attn, dtype=np.float64))
    if attn.ndim == 2:
        attn = ad.reshape(attn, (1,) + attn.shape)
    b, m, n = attn.shape
    if not 1 <= k <= min(m, n):
        raise ValueError(f"K={k} outside [1, min(M, N)={min(m, n)}]")
    lengths = [k] * b if valid_lengths is None else [max(1, min(k, int(v))) for v in valid_lengths]
    diag = np.zeros((b, m, n))
    for i, kk in enumerate(lengths):
        idx = np.arange(kk)
        diag[i, idx, idx] = 1.0 / kk
    mass = ad.sum_(ad.multiply(attn, Tensor(diag)), axis=(1, 2))
    return ad.scale(ad.mean(ad.log(mass)), -1.0)


@dataclass
class LossBreakdown:
    total: Tensor
    loc: float  # summed over decoder stages
    cls: float  # summed over decoder stages
    align: float
    per_stage: list[tuple[float, float]] = field(default_factory=list)


def match_batch(t: np.ndarray, p: np.ndarray, gts: Sequence[np.ndarray], alpha_loc: float, alpha_cls: float):
    return [hungarian_match(cost_matrix(t[i], p[i], g, alpha_loc, alpha_cls)) for i, g in enumerate(gts)]


def total_loss(stages, gts: Sequence[np.ndarray], attn: Tensor, config, valid_lengths=None) -> LossBreakdown:
    """Final-stage loc/cls/align plus auxiliary loc/cls on every earlier stage.

    Each stage is matched independently. Windows without ground truth
    contribute to the classification term only. The alignment term is skipped (and
    never evaluated) when ``alpha_align`` is zero.
    """
    gts = [np.asarray(g, dtype=np.float64) for g in gts]
    terms = []
    loc_sum = cls_sum = 0.0
    per_stage = []
    for stage in stages:
        assignments = match_batch(stage.t.values, stage.p.values, gts, config.alpha_loc, config.alpha_cls)
        cl = batched_cls_loss(stage.p, assignments)
        terms.append(ad.scale(cl, config.alpha_cls))
        lo = None
        if any(len(g) for g in gts):
            lo = batched_loc_loss(stage.t, gts, assignments)
            terms.append(ad.scale(lo, config.alpha_loc))
        lo = 0.0 if lo is None else lo.item()
        loc_sum += lo
        cls_sum += cl.item()
        per_stage.append((lo, cl.item()))
    align = 0.0
    if config.alpha_align:
        al = align_loss(attn, config.boundary_queries, valid_lengths)
        terms.append(ad.scale(al, config.alpha_align))
        align = al.item()
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return LossBreakdown(total, loc_sum, cls_sum, align, per_stage)
