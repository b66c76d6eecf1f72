import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from temporal_perceiver.data import (
    FeatureFormatError,
    FeatureSequence,
    SyntheticConfig,
    assemble_predictions,
    generate_split,
    generate_video,
    load_split,
    read_features,
    read_manifest,
    window_split,
    write_features,
    write_manifest,
)


class TestGenerator:
    def test_noise_free_is_piecewise_constant(self):
        cfg = SyntheticConfig(ramp=0, noise=0.0, min_segment_length=5, feature_dim=6)
        seq = generate_video(cfg, 3)
        changed = np.flatnonzero(np.abs(np.diff(seq.features, axis=0)).sum(axis=1) > 0) + 1
        np.testing.assert_array_equal(changed, seq.gts)

    def test_same_seed_identical(self):
        cfg = SyntheticConfig(feature_dim=8)
        a, b = generate_video(cfg, 11), generate_video(cfg, 11)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.gts, b.gts)

    def test_different_seeds_differ(self):
        cfg = SyntheticConfig(feature_dim=8)
        assert not np.array_equal(generate_video(cfg, 1).features[:5], generate_video(cfg, 2).features[:5])

    def test_ramp_midpoint_is_average(self):
        cfg = SyntheticConfig(ramp=2, noise=0.0, feature_dim=4)
        seq = generate_video(cfg, 5)
        b = int(seq.gts[0])
        left, right = seq.features[b - 3], seq.features[b + 3]
        np.testing.assert_allclose(seq.features[b], 0.5 * (left + right), atol=1e-12)
        np.testing.assert_allclose(seq.features[b - 2], left, atol=1e-12)
        np.testing.assert_allclose(seq.features[b + 2], right, atol=1e-12)

    def test_nearest_centre_recovers_segments(self):
        cfg = SyntheticConfig()
        correct = total = 0
        for seq in generate_split(SyntheticConfig(train_videos=30), "train"):
            seg = np.searchsorted(seq.gts, np.arange(seq.duration), side="right")
            centres = np.stack([seq.features[seg == s].mean(axis=0) for s in range(len(seq.gts) + 1)])
            dist = np.abs(np.arange(seq.duration)[:, None] - seq.gts[None, :]).min(axis=1)
            away = dist > cfg.ramp
            guess = np.argmin(((seq.features[:, None, :] - centres[None]) ** 2).sum(axis=-1), axis=1)
            correct += int((guess[away] == seg[away]).sum())
            total += int(away.sum())
        assert correct / total >= 0.99

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_gt_spacing_and_bounds(self, seed):
        cfg = SyntheticConfig(feature_dim=2)
        seq = generate_video(cfg, seed)
        assert cfg.min_length <= seq.duration <= cfg.max_length
        assert cfg.min_segments - 1 <= len(seq.gts) <= cfg.max_segments - 1
        edges = np.concatenate([[0], seq.gts, [seq.duration]])
        assert np.diff(edges).min() >= cfg.min_segment_length

    def test_infeasible_config(self):
        with pytest.raises(ValueError):
            generate_video(SyntheticConfig(min_segment_length=4, ramp=2), 0)
        with pytest.raises(ValueError):
            generate_video(SyntheticConfig(min_segments=8, min_segment_length=20, min_length=100), 0)

    def test_split_sizes_and_ids(self):
        cfg = SyntheticConfig(train_videos=3, val_videos=2, feature_dim=4)
        tr, va = generate_split(cfg, "train"), generate_split(cfg, "val")
        assert [s.video_id for s in tr] == ["train_0000", "train_0001", "train_0002"]
        assert len(va) == 2
        assert not np.array_equal(tr[0].features[:3], va[0].features[:3])


class TestFeatureFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        seq = generate_video(SyntheticConfig(feature_dim=5), 2)
        write_features(tmp_path / "a.tpft", seq)
        back = read_features(tmp_path / "a.tpft")
        assert back.features.tobytes() == seq.features.tobytes()
        assert back.gts.tobytes() == seq.gts.tobytes()

    def test_layout(self, tmp_path):
        seq = FeatureSequence("v", np.arange(6.0).reshape(3, 2), [1.5])
        write_features(tmp_path / "v.tpft", seq)
        raw = (tmp_path / "v.tpft").read_bytes()
        assert raw[:4] == b"TPFT"
        assert struct.unpack_from("<IIII", raw, 4) == (1, 3, 2, 1)
        assert struct.unpack_from("<d", raw, 20) == (1.5,)
        assert struct.unpack_from("<6d", raw, 28) == tuple(range(6))

    def test_empty_gts_round_trip(self, tmp_path):
        seq = FeatureSequence("e", np.ones((4, 3)), [])
        write_features(tmp_path / "e.tpft", seq)
        assert read_features(tmp_path / "e.tpft").gts.size == 0

    def test_corrupted_magic(self, tmp_path):
        path = tmp_path / "bad.tpft"
        write_features(path, FeatureSequence("b", np.ones((2, 2)), []))
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FeatureFormatError, match="magic"):
            read_features(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.tpft"
        write_features(path, FeatureSequence("t", np.ones((2, 2)), []))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FeatureFormatError, match="size"):
            read_features(path)

    def test_manifest(self, tmp_path):
        cfg = SyntheticConfig(train_videos=2, val_videos=1, feature_dim=3)
        entries = []
        for split in ("train", "val"):
            for seq in generate_split(cfg, split):
                write_features(tmp_path / f"{seq.video_id}.tpft", seq)
                entries.append((split, f"{seq.video_id}.tpft"))
        write_manifest(tmp_path / "manifest.txt", entries)
        assert len(read_manifest(tmp_path / "manifest.txt")) == 3
        val = load_split(tmp_path / "manifest.txt", "val")
        assert [s.video_id for s in val] == ["val_0000"]

    def test_manifest_bad_line(self, tmp_path):
        (tmp_path / "m.txt").write_text("train\n")
        with pytest.raises(FeatureFormatError):
            read_manifest(tmp_path / "m.txt")


def _seq(length, gts, c=2):
    return FeatureSequence("s", np.random.default_rng(length).normal(size=(length, c)), gts)


class TestWindows:
    def test_three_windows_last_padded(self):
        wins = window_split(_seq(250, [30.0]), 100)
        assert [w.start for w in wins] == [0, 100, 200]
        assert wins[-1].valid_length == 50
        np.testing.assert_array_equal(wins[-1].features[50:], 0.0)

    def test_train_mode_drops_gt_free(self):
        wins = window_split(_seq(250, [30.0, 230.0]), 100, "train")
        assert [w.start for w in wins] == [0, 200]

    def test_local_fraction(self):
        wins = window_split(_seq(250, [130.0]), 100)
        assert wins[1].gts.tolist() == pytest.approx([0.30])

    def test_scores_sliced_and_padded(self):
        scores = np.linspace(0, 1, 150)
        wins = window_split(_seq(150, [10.0]), 100, scores=scores)
        np.testing.assert_array_equal(wins[1].scores[:50], scores[100:])
        np.testing.assert_array_equal(wins[1].scores[50:], 0.0)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            window_split(_seq(10, []), 0)
        with pytest.raises(ValueError):
            window_split(_seq(10, []), 5, "eval")

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 350), st.integers(1, 120))
    def test_reconstruction(self, length, n):
        seq = _seq(length, [])
        wins = window_split(seq, n)
        rebuilt = np.concatenate([w.features[: w.valid_length] for w in wins])
        np.testing.assert_array_equal(rebuilt, seq.features)
        assert all(0.0 <= g <= 1.0 for w in wins for g in w.gts)


def _window(start=0, valid=100):
    return window_split(_seq(start + valid, []), 100)[-1] if start else window_split(_seq(valid, []), 100)[0]


class TestAssemble:
    def test_threshold_one_empties(self):
        times, _ = assemble_predictions([_window()], [(np.array([0.3]), np.array([0.99]))], 1.0)
        assert times.size == 0

    def test_absolute_mapping(self):
        win = _window(start=200)
        assert win.start == 200
        times, scores = assemble_predictions([win], [(np.array([0.25]), np.array([0.95]))], 0.9)
        assert times.tolist() == [225.0] and scores.tolist() == [0.95]

    def test_padding_discarded(self):
        win = _window(valid=50)
        times, _ = assemble_predictions([win], [(np.array([0.9, 0.2]), np.array([0.95, 0.95]))], 0.9)
        assert times.tolist() == [20.0]

    def test_sorted_and_no_suppression(self):
        wins = window_split(_seq(200, []), 100)
        preds = [(np.array([0.5, 0.1]), np.array([0.95, 0.92])), (np.array([0.1, 0.1]), np.array([0.99, 0.97]))]
        times, scores = assemble_predictions(wins, preds, 0.9)
        assert times.tolist() == [10.0, 50.0, 110.0, 110.0]
        assert scores.tolist() == [0.92, 0.95, 0.99, 0.97]

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
    def test_monotone_in_gamma(self, ps, g1, g2):
        lo, hi = sorted((g1, g2))
        t = np.linspace(0, 0.99, len(ps))
        pred = [(t, np.array(ps))]
        a, _ = assemble_predictions([_window()], pred, lo)
        b, _ = assemble_predictions([_window()], pred, hi)
        assert set(b.tolist()) <= set(a.tolist())
