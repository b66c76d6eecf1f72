import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from temporal_perceiver import autodiff as ad
from temporal_perceiver.autodiff import Tensor
from temporal_perceiver.matching import (
    CALL_COUNTS,
    Assignment,
    MatchingError,
    align_loss,
    assignment_cost,
    cls_loss,
    cost_matrix,
    hungarian_match,
    loc_loss,
    pair_cost,
    total_loss,
)
from temporal_perceiver.model import Prediction


def brute_force(cost):
    """Every injection of ground truths (columns) into predictions (rows),
    returned as (minimum cost, lexicographically first optimal tuple)."""
    n_pred, n_gt = cost.shape
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(n_pred), n_gt):
        c = cost[list(perm), range(n_gt)].sum()
        if c < best - 1e-9:
            best, best_perm = c, perm
    return best, best_perm


class TestPairCost:
    def test_worked_example(self):
        assert pair_cost(0.5, 0.8, 0.4, 1.0, 2.0) == pytest.approx(-1.5, abs=1e-12)

    def test_perfect_limit(self):
        assert pair_cost(0.3, 1.0 - 1e-12, 0.3, 1.0, 2.0) == pytest.approx(-2.0, abs=1e-9)

    def test_monotone_in_distance(self):
        costs = [pair_cost(0.5 + d, 0.6, 0.5) for d in np.linspace(0, 0.4, 9)]
        assert np.all(np.diff(costs) > 0)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        t, p, g = rng.random(5), rng.random(5), rng.random(3)
        m = cost_matrix(t, p, g)
        for i in range(5):
            for j in range(3):
                assert m[i, j] == pytest.approx(pair_cost(t[i], p[i], g[j]), abs=1e-15)


class TestHungarian:
    def test_single(self):
        assert hungarian_match(np.array([[3.0]])).as_dict() == {0: 0}

    def test_zero_diagonal(self):
        assert hungarian_match(np.array([[0.0, 9.0], [9.0, 0.0]])).as_dict() == {0: 0, 1: 1}

    def test_anti_diagonal(self):
        assert hungarian_match(np.array([[9.0, 0.0], [0.0, 9.0]])).as_dict() == {1: 0, 0: 1}

    def test_optimal_not_greedy(self):
        # greedy would take (0,0)=1 and then pay 10; optimum is 2 + 2
        cost = np.array([[1.0, 2.0], [2.0, 10.0]])
        a = hungarian_match(cost)
        assert assignment_cost(cost, a) == 4.0

    def test_brute_force_6x4(self):
        for seed in range(1000):
            cost = np.random.default_rng(seed).normal(size=(6, 4))
            a = hungarian_match(cost)
            best, _ = brute_force(cost)
            assert assignment_cost(cost, a) == pytest.approx(best, abs=1e-9)
            assert len(set(a.pred_idx.tolist())) == 4

    def test_lexicographic_tie_break(self):
        for seed in range(300):
            rng = np.random.default_rng(seed)
            n_pred = int(rng.integers(1, 6))
            n_gt = int(rng.integers(1, n_pred + 1))
            cost = rng.integers(0, 3, size=(n_pred, n_gt)).astype(float)
            _, perm = brute_force(cost)
            assert tuple(hungarian_match(cost).pred_idx.tolist()) == perm

    def test_all_equal_costs(self):
        assert hungarian_match(np.ones((5, 3))).pred_idx.tolist() == [0, 1, 2]

    def test_row_shift_invariance(self):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            cost = rng.normal(size=(4, 4))
            shifted = cost.copy()
            shifted[int(rng.integers(4))] += rng.normal() * 5
            assert hungarian_match(cost).as_dict() == hungarian_match(shifted).as_dict()

    def test_too_many_gts(self):
        with pytest.raises(MatchingError, match="exceed"):
            hungarian_match(np.zeros((2, 3)))

    def test_non_finite(self):
        with pytest.raises(MatchingError, match="non-finite"):
            hungarian_match(np.array([[0.0, np.inf]]).T)

    def test_empty_gts(self):
        assert hungarian_match(np.zeros((3, 0))).pred_idx.size == 0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_never_worse_than_any_injection(self, n_gt, seed):
        rng = np.random.default_rng(seed)
        n_pred = n_gt + int(rng.integers(0, 2))
        cost = rng.random((n_pred, n_gt))
        got = assignment_cost(cost, hungarian_match(cost))
        for perm in itertools.permutations(range(n_pred), n_gt):
            assert got <= cost[list(perm), range(n_gt)].sum() + 1e-12


class TestLocLoss:
    def test_exact(self):
        a = Assignment(np.array([1, 0]), 3)
        assert loc_loss([0.2, 0.4, 0.9], [0.4, 0.2], a).item() == 0.0

    def test_single_pair(self):
        assert loc_loss([0.3], [0.4], Assignment(np.array([0]), 1)).item() == pytest.approx(0.1, abs=1e-15)

    def test_mean_of_two(self):
        a = Assignment(np.array([0, 1]), 2)
        assert loc_loss([0.1, 0.9], [0.2, 0.6], a).item() == pytest.approx(0.2, abs=1e-15)

    def test_empty_assignment(self):
        with pytest.raises(MatchingError):
            loc_loss([0.1], [], Assignment(np.zeros(0, dtype=int), 1))


class TestClsLoss:
    def test_confident_match(self):
        assert cls_loss([1 - 1e-12], Assignment(np.array([0]), 1)).item() < 1e-11

    def test_unmatched_half(self):
        a = Assignment(np.zeros(0, dtype=int), 1)
        assert cls_loss([0.5], a).item() == pytest.approx(np.log(2), abs=1e-15)

    def test_worked_example(self):
        value = cls_loss([0.9, 0.1], Assignment(np.array([0]), 2)).item()
        assert value == pytest.approx(-np.log(0.9), abs=1e-12)
        assert value == pytest.approx(0.1054, abs=1e-4)


class TestAlignLoss:
    def test_perfect_diagonal(self):
        assert align_loss(np.eye(4), 3).item() == 0.0

    def test_uniform(self):
        assert align_loss(np.full((5, 10), 0.1), 3).item() == pytest.approx(np.log(10), abs=1e-12)

    def test_worked_example(self):
        a = np.array([[0.5, 0.5, 0.0], [0.3, 0.3, 0.4]])
        assert align_loss(a, 2).item() == pytest.approx(-np.log(0.4), abs=1e-12)
        assert -np.log(0.4) == pytest.approx(0.9163, abs=1e-4)

    def test_zero_diagonal_clamped(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert align_loss(a, 2).item() == pytest.approx(-np.log(1e-12))

    def test_valid_length_truncates_target(self):
        a = np.zeros((1, 3, 4))
        a[0, 0, 0] = a[0, 1, 1] = 1.0
        a[0, 2, 0] = 1.0  # row 2 points into the valid range, slot 2 is padding
        assert align_loss(a, 3, valid_lengths=[2]).item() == 0.0

    def test_k_range(self):
        with pytest.raises(ValueError):
            align_loss(np.eye(3), 4)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        logits = ad.parameter(rng.normal(size=(2, 4, 6)))
        assert ad.grad_check(lambda: align_loss(ad.softmax(logits), 3), [logits]) <= 1e-6

    @given(st.integers(0, 10_000))
    def test_non_negative(self, seed):
        a = np.random.default_rng(seed).random((4, 7))
        a /= a.sum(axis=1, keepdims=True)
        assert align_loss(a, 4).item() >= 0.0


def _config(**kw):
    base = dict(alpha_loc=1.0, alpha_cls=2.0, alpha_align=1.0, boundary_queries=2)
    base.update(kw)
    return SimpleNamespace(**base)


def _stage(t, p):
    return Prediction(ad.parameter(np.array([t])), ad.parameter(np.array([p])))


class TestTotalLoss:
    def test_perfect_is_zero(self):
        stage = _stage([0.2, 0.7], [1 - 1e-13, 1e-13])
        out = total_loss([stage], [np.array([0.2])], np.eye(3)[None], _config())
        assert out.total.item() == pytest.approx(0.0, abs=1e-11)

    def test_single_stage_weighted_sum(self):
        stage = _stage([0.3, 0.8], [0.6, 0.3])
        gts = [np.array([0.4])]
        attn = np.array([[[0.5, 0.5, 0.0], [0.3, 0.3, 0.4]]])
        out = total_loss([stage], gts, attn, _config())
        loc = 0.1
        cls = -(np.log(0.6) + np.log(0.7)) / 2
        align = -np.log(0.4)
        assert out.total.item() == pytest.approx(1 * loc + 2 * cls + 1 * align, abs=1e-12)
        assert (out.loc, out.cls, out.align) == pytest.approx((loc, cls, align), abs=1e-12)

    def test_auxiliary_stages_add_loc_cls_only(self):
        stages = [_stage([0.3, 0.8], [0.6, 0.3]), _stage([0.5, 0.1], [0.2, 0.9])]
        gts = [np.array([0.4])]
        attn = np.eye(3)[None]
        out = total_loss(stages, gts, attn, _config())
        # stage 2 matches prediction 1 (cost 0.3 - 1.8 < 0.1 - 0.4)
        aux = 0.1 + 2 * -(np.log(0.6) + np.log(0.7)) / 2
        final = 0.3 + 2 * -(np.log(0.8) + np.log(0.9)) / 2
        assert out.total.item() == pytest.approx(aux + final, abs=1e-12)
        assert len(out.per_stage) == 2

    def test_alpha_align_zero_skips_term(self):
        stage = _stage([0.3, 0.8], [0.6, 0.3])
        before = CALL_COUNTS["align_loss"]
        out = total_loss([stage], [np.array([0.4])], np.full((1, 2, 3), 1 / 3), _config(alpha_align=0.0))
        assert CALL_COUNTS["align_loss"] == before
        assert out.align == 0.0

    def test_gradients_flow_to_predictions(self):
        stage = _stage([0.3, 0.8], [0.6, 0.3])
        attn = ad.parameter(np.full((1, 2, 3), 1 / 3))
        out = total_loss([stage], [np.array([0.4])], attn, _config())
        ad.backward(out.total)
        assert np.abs(stage.t.grad).sum() > 0 and np.abs(stage.p.grad).sum() > 0
        assert np.abs(attn.grad).sum() > 0

    def test_components_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            stage = _stage(rng.random(4), rng.uniform(0.01, 0.99, 4))
            attn = rng.random((1, 3, 5))
            attn /= attn.sum(axis=-1, keepdims=True)
            out = total_loss([stage], [np.sort(rng.random(2))], Tensor(attn), _config())
            assert min(out.loc, out.cls, out.align) >= 0.0
