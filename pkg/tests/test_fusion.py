import math

import numpy as np
import pytest

from wuw.errors import DataError, ModelError
from wuw.evaluation import macro_f1
from wuw.fusion import (
    FusionModel,
    LogOddsVector,
    ScoreDataset,
    fuse,
    fusion_predictions,
    load_fusion,
    log_odds,
    mlp_forward,
    mlp_grads,
    stack_scores,
    synth_score_task,
    train_fusion,
)
from wuw.nnet import ScorePair, TrainSpec, WeightStore, save_weights, softmax2


def fusion_from_arrays(w1, b1, w2, b2, member_ids):
    ws = WeightStore(
        {"fc1.w": w1, "fc1.b": b1, "fc2.w": w2, "fc2.b": b2},
        {"kind": "fusion", "member_ids": list(member_ids)},
    )
    return FusionModel(ws)


class TestLogOdds:
    def test_even_split_is_zero(self):
        assert log_odds(0.5, 0.5) == 0.0

    def test_nine_to_one(self):
        assert log_odds(0.9, 0.1) == pytest.approx(math.log(9.0), rel=1e-12)

    def test_softmax_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = rng.uniform(-8, 8, size=2)
            lo = log_odds(*softmax2(ScorePair(a, b)))
            assert lo == pytest.approx(a - b, abs=1e-5)

    def test_clamped_extremes_stay_finite(self):
        lo = log_odds(*softmax2(ScorePair(100.0, -100.0)))
        assert np.isfinite(lo)
        assert lo == pytest.approx(math.log((1 - 1e-7) / 1e-7), rel=1e-6)

    def test_inconsistent_probabilities_rejected(self):
        with pytest.raises(DataError):
            log_odds(0.7, 0.7)


class TestStackScores:
    def test_all_even_scores_give_zero_vector(self):
        z = stack_scores([ScorePair(0.0, 0.0)] * 3, ["a", "b", "c"])
        np.testing.assert_array_equal(z.values, np.zeros(3))
        assert z.member_ids == ("a", "b", "c")

    def test_single_member_identity(self):
        z = stack_scores([ScorePair(2.0, 0.0)], ["only"])
        assert z.values[0] == pytest.approx(2.0, abs=1e-5)

    def test_count_mismatch_rejected(self):
        with pytest.raises(DataError):
            stack_scores([ScorePair(0.0, 0.0)], ["a", "b"])

    def test_permuted_member_order_rejected_by_fuse(self):
        model = fusion_from_arrays(
            np.ones((2, 2)), np.zeros(2), np.ones((2, 2)), np.zeros(2), ["a", "b"]
        )
        z = stack_scores([ScorePair(1.0, 0.0), ScorePair(0.0, 1.0)], ["b", "a"])
        with pytest.raises(ModelError):
            fuse(z, model)


class TestFuse:
    def test_zero_weights_zero_logits(self):
        model = fusion_from_arrays(
            np.zeros((4, 2)), np.zeros(4), np.zeros((2, 4)), np.zeros(2), ["a", "b"]
        )
        z = LogOddsVector(np.array([1.0, -1.0]), ("a", "b"))
        assert fuse(z, model) == ScorePair(0.0, 0.0)

    def test_handbuilt_relu_passthrough(self):
        # hidden unit 0 carries z0 through ReLU; output 0 reads it back,
        # so logit_pos = max(z0, 0).
        w1 = np.zeros((3, 2))
        w1[0, 0] = 1.0
        w2 = np.zeros((2, 3))
        w2[0, 0] = 1.0
        model = fusion_from_arrays(w1, np.zeros(3), w2, np.zeros(2), ["a", "b"])
        for z0 in (-2.0, -0.5, 0.0, 0.7, 3.0):
            z = LogOddsVector(np.array([z0, 1.0]), ("a", "b"))
            assert fuse(z, model).logit_pos == pytest.approx(max(z0, 0.0))

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        w1 = rng.normal(size=(5, 3))
        b1 = rng.normal(size=5)
        w2 = rng.normal(size=(2, 5))
        b2 = rng.normal(size=2)
        model = fusion_from_arrays(w1, b1, w2, b2, ["a", "b", "c"])
        z = rng.normal(size=3)
        w1f, b1f, w2f, b2f = (model.weights[k].astype(np.float64)
                              for k in ("fc1.w", "fc1.b", "fc2.w", "fc2.b"))
        hidden = [max(sum(w1f[i, j] * z[j] for j in range(3)) + b1f[i], 0.0)
                  for i in range(5)]
        oracle = [sum(w2f[k, i] * hidden[i] for i in range(5)) + b2f[k]
                  for k in range(2)]
        out = fuse(LogOddsVector(z, ("a", "b", "c")), model)
        np.testing.assert_allclose([out.logit_pos, out.logit_neg], oracle, rtol=1e-6)


class TestMlpGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        delta = 1e-4
        for _ in range(100):
            n_members = int(rng.integers(1, 5))
            hidden = int(rng.integers(2, 6))
            n = int(rng.integers(1, 6))
            params = [
                rng.normal(size=(hidden, n_members)),
                rng.normal(size=hidden),
                rng.normal(size=(2, hidden)),
                rng.normal(size=2),
            ]
            z = rng.normal(size=(n, n_members))
            y = rng.integers(0, 2, size=n)
            _, grads = mlp_grads(params, z, y)
            for p_idx, p in enumerate(params):
                flat_grad = np.asarray(grads[p_idx]).reshape(-1)
                for flat_i in range(p.size):
                    idx = np.unravel_index(flat_i, p.shape)
                    orig = p[idx]
                    p[idx] = orig + delta
                    up = mlp_grads(params, z, y)[0]
                    p[idx] = orig - delta
                    down = mlp_grads(params, z, y)[0]
                    p[idx] = orig
                    num = (up - down) / (2 * delta)
                    np.testing.assert_allclose(
                        flat_grad[flat_i], num, rtol=1e-4, atol=1e-7
                    )


def heldout_macro_f1(model, data):
    return macro_f1(data.labels, fusion_predictions(model, data))


def member_macro_f1(data, member_idx):
    pred = (data.log_odds[:, member_idx] > 0).astype(int)
    return macro_f1(data.labels, pred)


class TestSynthScoreTask:
    def test_zero_sigma_members_are_perfect(self):
        rng = np.random.default_rng(3)
        data = synth_score_task(2, [0.0, 0.0], 500, rng)
        for i in range(2):
            assert member_macro_f1(data, i) == 1.0

    def test_fully_seeded(self):
        a = synth_score_task(3, [1.0, 2.0, 3.0], 100, np.random.default_rng(4))
        b = synth_score_task(3, [1.0, 2.0, 3.0], 100, np.random.default_rng(4))
        np.testing.assert_array_equal(a.log_odds, b.log_odds)
        np.testing.assert_array_equal(a.labels, b.labels)


class TestTrainFusion:
    def test_perfect_oracle_member(self):
        rng = np.random.default_rng(5)
        train = synth_score_task(1, [0.0], 2000, rng, mu=3.0)
        test = synth_score_task(1, [0.0], 500, rng, mu=3.0)
        model = train_fusion(train, TrainSpec(max_epochs=80, seed=0))
        pred = fusion_predictions(model, test)
        assert (pred == test.labels).mean() >= 0.99

    def test_zero_information_gives_chance(self):
        labels = np.arange(400) % 2
        data = ScoreDataset(np.zeros((400, 2)), labels, ("a", "b"))
        model = train_fusion(data, TrainSpec(max_epochs=30, seed=0))
        pred = fusion_predictions(model, data)
        acc = (pred == data.labels).mean()
        assert 0.35 <= acc <= 0.65
        from wuw.fusion import mlp_forward as fwd
        from wuw.nnet import _ce_batch

        params = [model.weights[k].astype(np.float64)
                  for k in ("fc1.w", "fc1.b", "fc2.w", "fc2.b")]
        loss, _ = _ce_batch(fwd(params, data.log_odds), data.labels)
        assert loss == pytest.approx(math.log(2.0), abs=0.05)

    def test_fused_beats_best_member_on_heterogeneous_task(self):
        rng = np.random.default_rng(6)
        sigmas = [1.5, 2.0, 2.5, 3.0]
        train = synth_score_task(4, sigmas, 20000, rng)
        test = synth_score_task(4, sigmas, 5000, rng)
        model = train_fusion(train, TrainSpec(seed=0))
        fused = heldout_macro_f1(model, test)
        best_member = max(member_macro_f1(test, i) for i in range(4))
        assert fused > best_member

    def test_useless_member_changes_little(self):
        rng = np.random.default_rng(7)
        base = synth_score_task(2, [1.0, 1000.0], 20000, rng)
        test = synth_score_task(2, [1.0, 1000.0], 5000, rng)
        with_junk = train_fusion(base, TrainSpec(seed=0))
        f1_with = heldout_macro_f1(with_junk, test)

        solo_train = ScoreDataset(base.log_odds[:, :1], base.labels, ("m0",))
        solo_test = ScoreDataset(test.log_odds[:, :1], test.labels, ("m0",))
        solo = train_fusion(solo_train, TrainSpec(seed=0))
        f1_solo = heldout_macro_f1(solo, solo_test)
        assert abs(f1_with - f1_solo) < 0.01

    def test_monotone_in_oracle_member(self):
        rng = np.random.default_rng(8)
        train = synth_score_task(1, [0.0], 2000, rng, mu=3.0)
        model = train_fusion(train, TrainSpec(max_epochs=80, seed=1))
        low = fuse(LogOddsVector(np.array([-3.0]), ("m0",)), model)
        high = fuse(LogOddsVector(np.array([3.0]), ("m0",)), model)
        assert high.logit_pos >= low.logit_pos

    def test_single_class_rejected(self):
        data = ScoreDataset(np.ones((10, 1)), np.ones(10), ("m0",))
        with pytest.raises(DataError):
            train_fusion(data, TrainSpec(max_epochs=1))

    def test_seeded_determinism(self):
        rng = np.random.default_rng(9)
        data = synth_score_task(2, [1.0, 2.0], 1500, rng)
        spec = TrainSpec(max_epochs=25, seed=3)
        a = train_fusion(data, spec)
        b = train_fusion(data, spec)
        for name in a.weights.tensors:
            assert a.weights[name].tobytes() == b.weights[name].tobytes()

    def test_persistence_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        data = synth_score_task(2, [1.0, 2.0], 800, rng)
        model = train_fusion(data, TrainSpec(max_epochs=10, seed=0))
        save_weights(model.weights, tmp_path / "f.wuwm")
        back = load_fusion(tmp_path / "f.wuwm")
        assert back.member_ids == model.member_ids
        z = LogOddsVector(np.array([0.3, -0.2]), model.member_ids)
        assert fuse(z, back) == fuse(z, model)
