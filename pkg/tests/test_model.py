"""End-to-end model: forward composition, training, accounting, checkpoints."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mivc.errors import DataError, ShapeError, UsageError
from mivc.gradcheck import model_gradcheck
from mivc.model import (
    STRATEGIES,
    EncoderParams,
    HeadParams,
    Model,
    TrainConfig,
    build_model,
    count_params,
    forward,
    load_model,
    loss_and_grads,
    save_model,
    train,
)
from mivc.numkern import make_rng, sigm_vec, softmax_stable
from mivc.pooling import Bag

# Frozen serialization of a seed-42 parameter-free model (strategy avg,
# identity encoder, two classes over two dims).  Any byte change means the
# checkpoint format or the seeded init stream changed.
GOLDEN_CHECKPOINT_HEX = (
    "4d49564d010000000b0000006d6574612e636f6e666967010000000c00000000000000"
    "00000000000000000000000000000000000000400000000000000040000000000000f0"
    "bf00000000000000400000000000000040000000000000f0bf000000000000f0bf0000"
    "00000000f0bf000000000000f03f000000000000000006000000686561642e57020000"
    "00020000000200000058cc3718b1cbd83f008e10c2dc20b6bf5aeb832b713ae03fa45e"
    "77691cddd13f06000000686561642e6201000000020000000000000000000000000000"
    "0000000000"
)


def labeled_bags(n_bags, dim, seed, n_classes=2, max_n=5, shaped=False):
    rng = make_rng(seed)
    out = []
    for i in range(n_bags):
        n = int(rng.integers(1, max_n + 1))
        shape = (1, dim) if shaped else None
        out.append(Bag.from_array(f"b{i}", rng.normal(size=(n, dim)),
                                  label=int(rng.integers(n_classes)),
                                  shape=shape))
    return out


class TestConfigValidation:
    def test_identity_encoder_requires_matching_dims(self):
        with pytest.raises(UsageError):
            TrainConfig(m_in=4, m=8)

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(UsageError):
            TrainConfig(learning_rate=-0.1)

    def test_zero_learning_rate_allowed(self):
        assert TrainConfig(learning_rate=0.0).learning_rate == 0.0

    def test_epoch_and_batch_bounds(self):
        with pytest.raises(UsageError):
            TrainConfig(epochs=0)
        with pytest.raises(UsageError):
            TrainConfig(batch_size=0)

    def test_unknown_names_rejected(self):
        with pytest.raises(UsageError):
            TrainConfig(strategy="median")
        with pytest.raises(UsageError):
            TrainConfig(encoder="cnn")
        with pytest.raises(UsageError):
            TrainConfig(optimizer="lbfgs")

    def test_two_classes_minimum(self):
        with pytest.raises(UsageError):
            TrainConfig(c=1)


class TestBuildModel:
    def test_same_seed_same_arrays(self):
        cfg = TrainConfig(strategy="gated", seed=9)
        a, b = build_model(cfg), build_model(cfg)
        np.testing.assert_array_equal(a.pool_params.w, b.pool_params.w)
        np.testing.assert_array_equal(a.pool_params.G, b.pool_params.G)
        np.testing.assert_array_equal(a.head.W, b.head.W)

    def test_biases_start_at_zero(self):
        model = build_model(TrainConfig(strategy="attn", seed=1))
        np.testing.assert_array_equal(model.head.b, np.zeros(2))

    def test_grid_requires_resolved_side(self):
        with pytest.raises(UsageError):
            build_model(TrainConfig(strategy="grid"))


class TestForward:
    def test_zero_head_zero_logits(self):
        model = build_model(TrainConfig(strategy="avg", m_in=3, m=3, seed=0))
        model.head.W[...] = 0.0
        result = forward(model, Bag.from_array("z", np.ones((2, 3))))
        np.testing.assert_array_equal(result.logits, [0.0, 0.0])

    def test_singleton_equals_single_instance_pipeline(self):
        cfg = TrainConfig(strategy="attn", m_in=4, m=4, k=3, seed=5)
        model = build_model(cfg)
        x = make_rng(7).normal(size=(1, 4))
        logits = forward(model, Bag.from_array("one", x)).logits
        # single-instance pipeline: the head applied to the instance itself
        np.testing.assert_allclose(logits, model.head.W @ x[0] + model.head.b,
                                   atol=1e-12)

    def test_composition_matches_hand_sequenced_kernels(self):
        cfg = TrainConfig(strategy="gated", m_in=3, m=4, k=5, c=3,
                          encoder="mlp1", seed=13)
        model = build_model(cfg)
        bag = Bag.from_array("h", make_rng(21).normal(size=(3, 3)))
        got = forward(model, bag).logits

        # independent step-by-step recomputation
        enc = [np.tanh(model.encoder.W @ inst.values + model.encoder.b)
               for inst in bag.instances]
        pp = model.pool_params
        scores = np.array([
            float(pp.w @ (np.tanh(pp.Z @ e) * sigm_vec(pp.G @ e)))
            for e in enc])
        alpha = softmax_stable(scores)
        fused = sum(a * e for a, e in zip(alpha, enc))
        expected = model.head.W @ fused + model.head.b
        np.testing.assert_allclose(got, expected, atol=1e-12)

    @pytest.mark.parametrize("strategy", ["avg", "max", "attn", "gated"])
    def test_logits_permutation_invariant_for_pooling_strategies(
            self, strategy):
        cfg = TrainConfig(strategy=strategy, m_in=6, m=6, k=4, seed=3)
        model = build_model(cfg)
        values = make_rng(17).normal(size=(5, 6))
        base = forward(model, Bag.from_array("p", values)).logits
        for perm_seed in range(5):
            perm = make_rng(perm_seed).permutation(5)
            permuted = forward(model, Bag.from_array("p", values[perm])).logits
            np.testing.assert_allclose(permuted, base, atol=1e-9)

    def test_oversized_bag_rejected_by_grid_model(self):
        cfg = TrainConfig(strategy="grid", m_in=4, m=4, grid_side=2, seed=0)
        model = build_model(cfg)
        big = Bag.from_array("big", make_rng(0).normal(size=(5, 4)),
                             shape=(1, 4))
        with pytest.raises(ShapeError):
            forward(model, big)


class TestLossAndGrads:
    def test_uniform_logits_loss_is_log_class_count(self):
        for c in (2, 3, 5):
            cfg = TrainConfig(strategy="avg", m_in=3, m=3, c=c, seed=0)
            model = build_model(cfg)
            model.head.W[...] = 0.0
            bags = labeled_bags(4, 3, seed=1, n_classes=c)
            loss, _ = loss_and_grads(model, bags)
            np.testing.assert_allclose(loss, math.log(c), rtol=1e-12)

    def test_fully_frozen_model_returns_no_gradients(self):
        cfg = TrainConfig(strategy="avg", m_in=3, m=3, seed=0,
                          freeze_encoder=True, freeze_head=True)
        model = build_model(cfg)
        _, grads = loss_and_grads(model, labeled_bags(3, 3, seed=2))
        assert all(g is None for g in grads.blocks().values())

    def test_unlabeled_bag_rejected(self):
        model = build_model(TrainConfig(strategy="avg", m_in=3, m=3, seed=0))
        with pytest.raises(DataError):
            loss_and_grads(model, [Bag.from_array("u", np.ones((2, 3)))])

    def test_out_of_range_label_rejected(self):
        model = build_model(TrainConfig(strategy="avg", m_in=3, m=3, seed=0))
        with pytest.raises(DataError):
            loss_and_grads(model, [Bag.from_array("o", np.ones((2, 3)),
                                                  label=7)])

    def test_empty_batch_rejected(self):
        model = build_model(TrainConfig(strategy="avg", m_in=3, m=3, seed=0))
        with pytest.raises(DataError):
            loss_and_grads(model, [])


class TestEndToEndGradients:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_every_strategy_matches_finite_differences(self, strategy):
        cfg = TrainConfig(strategy=strategy, m_in=4, m=4, k=3, c=2, seed=11,
                          encoder="mlp1", freeze_encoder=False, hidden_dim=5,
                          max_images=4,
                          grid_side=3 if strategy == "grid" else None)
        bags = labeled_bags(2, 4, seed=3, shaped=(strategy == "grid"))
        errors = model_gradcheck(cfg, bags)
        assert errors, "no trainable blocks checked"
        worst = max(errors.values())
        assert worst < 1e-5, f"{strategy}: {errors}"

    def test_two_bag_batch_identity_encoder(self):
        cfg = TrainConfig(strategy="attn", m_in=5, m=5, k=4, c=3, seed=19)
        errors = model_gradcheck(cfg, labeled_bags(2, 5, seed=23,
                                                   n_classes=3))
        assert max(errors.values()) < 1e-5


class TestTrain:
    def test_zero_learning_rate_is_a_no_op(self):
        cfg = TrainConfig(strategy="attn", m_in=4, m=4, k=3, seed=2,
                          learning_rate=0.0, epochs=1)
        initial = build_model(cfg)
        trained, _ = train(cfg, labeled_bags(6, 4, seed=4))
        np.testing.assert_array_equal(trained.pool_params.w,
                                      initial.pool_params.w)
        np.testing.assert_array_equal(trained.pool_params.Z,
                                      initial.pool_params.Z)
        np.testing.assert_array_equal(trained.head.W, initial.head.W)

    def test_same_seed_identical_history_and_params(self):
        cfg = TrainConfig(strategy="gated", m_in=4, m=4, k=3, seed=6,
                          epochs=3, learning_rate=0.05)
        bags = labeled_bags(10, 4, seed=8)
        model_a, hist_a = train(cfg, bags)
        model_b, hist_b = train(cfg, bags)
        assert hist_a == hist_b
        np.testing.assert_array_equal(model_a.pool_params.G,
                                      model_b.pool_params.G)
        np.testing.assert_array_equal(model_a.head.W, model_b.head.W)

    def test_frozen_blocks_bit_identical_after_training(self):
        cfg = TrainConfig(strategy="attn", m_in=4, m=6, k=3, seed=7,
                          encoder="mlp1", freeze_encoder=True,
                          freeze_head=True, epochs=2)
        initial = build_model(cfg)
        trained, _ = train(cfg, labeled_bags(8, 4, seed=9))
        np.testing.assert_array_equal(trained.encoder.W, initial.encoder.W)
        np.testing.assert_array_equal(trained.encoder.b, initial.encoder.b)
        np.testing.assert_array_equal(trained.head.W, initial.head.W)
        np.testing.assert_array_equal(trained.head.b, initial.head.b)
        # while the unfrozen pooling parameters actually moved
        assert not np.array_equal(trained.pool_params.w,
                                  initial.pool_params.w)

    def test_separable_task_reaches_high_accuracy(self, small_dataset):
        train_ds, _ = small_dataset
        two_class = [b for b in train_ds.bags if b.label < 2][:160]
        cfg = TrainConfig(strategy="attn", m_in=16, m=16, k=32, c=2, seed=0,
                          learning_rate=0.1, epochs=50, batch_size=16)
        _, history = train(cfg, two_class)
        assert history[-1]["accuracy"] >= 0.95

    @pytest.mark.parametrize("lr", [0.01, 0.1, 0.5])
    def test_first_epoch_loss_decreases_in_stable_range(self, lr,
                                                        small_dataset):
        train_ds, _ = small_dataset
        bags = list(train_ds.bags[:200])
        cfg = TrainConfig(strategy="attn", m_in=16, m=16, k=32, c=3, seed=1,
                          learning_rate=lr, epochs=1, batch_size=16)
        init_loss, _ = loss_and_grads(build_model(cfg), bags)
        _, history = train(cfg, bags)
        assert history[0]["loss"] < init_loss

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            train(TrainConfig(strategy="avg", m_in=2, m=2, seed=0), [])

    def test_adam_optimizer_runs_deterministically(self):
        cfg = TrainConfig(strategy="attn", m_in=4, m=4, k=3, seed=3,
                          optimizer="adam", learning_rate=0.01, epochs=2)
        bags = labeled_bags(8, 4, seed=5)
        model_a, hist_a = train(cfg, bags)
        model_b, hist_b = train(cfg, bags)
        assert hist_a == hist_b
        np.testing.assert_array_equal(model_a.pool_params.w,
                                      model_b.pool_params.w)


class TestCountParams:
    def test_small_example_counts(self):
        attn = count_params(TrainConfig(strategy="attn", m_in=3, m=3, k=2))
        gated = count_params(TrainConfig(strategy="gated", m_in=3, m=3, k=2))
        assert attn.extra_over_baseline == 8
        assert gated.extra_over_baseline == 14

    def test_parameter_free_strategies_add_nothing(self):
        for strategy in ("avg", "max", "single"):
            report = count_params(TrainConfig(strategy=strategy, m_in=3,
                                              m=3, k=2))
            assert report.extra_over_baseline == 0

    @given(st.integers(1, 4096), st.integers(1, 4096))
    @settings(max_examples=100)
    def test_closed_form_accounting(self, k, m):
        attn = count_params(TrainConfig(strategy="attn", m_in=m, m=m, k=k))
        gated = count_params(TrainConfig(strategy="gated", m_in=m, m=m, k=k))
        assert attn.extra_over_baseline == k * (m + 1)
        assert gated.extra_over_baseline == k * (2 * m + 1)
        assert gated.extra_over_baseline - attn.extra_over_baseline == k * m
        ratio = gated.extra_over_baseline / attn.extra_over_baseline
        assert ratio == (2 * m + 1) / (m + 1) < 2.0

    def test_ratio_approaches_two_for_large_dims(self):
        report_small = count_params(TrainConfig(strategy="attn", m_in=2,
                                                m=2, k=8))
        ratio = lambda m: (2 * m + 1) / (m + 1)
        assert ratio(2) < ratio(64) < ratio(4096) < 2.0
        assert abs(ratio(4096) - 2.0) < 1e-3
        assert report_small.extra_over_baseline == 8 * 3

    @pytest.mark.parametrize("strategy", ["avg", "max", "attn", "gated",
                                          "single", "concat"])
    def test_total_matches_built_model_arrays(self, strategy):
        cfg = TrainConfig(strategy=strategy, m_in=5, m=5, k=4, c=3, seed=0,
                          hidden_dim=7, max_images=3)
        report = count_params(cfg)
        model = build_model(cfg)
        actual = model.head.W.size + model.head.b.size
        if model.pool_params is not None and model.pool_params.w is not None:
            actual += model.pool_params.param_count()
        if model.concat_params is not None:
            actual += model.concat_params.param_count()
        assert report.total == actual

    def test_grid_total_counts_widened_head(self):
        cfg = TrainConfig(strategy="grid", m_in=5, m=5, c=3, seed=0,
                          grid_side=2)
        report = count_params(cfg)
        assert report.head_params == 3 * (4 * 5) + 3
        assert report.total == report.head_params


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        for strategy in STRATEGIES:
            cfg = TrainConfig(strategy=strategy, m_in=4, m=6, k=3, c=3,
                              seed=31, encoder="mlp1", hidden_dim=5,
                              max_images=4,
                              grid_side=2 if strategy == "grid" else None)
            model = build_model(cfg)
            first = tmp_path / f"{strategy}-1.mivm"
            second = tmp_path / f"{strategy}-2.mivm"
            save_model(model, first)
            save_model(load_model(first), second)
            assert first.read_bytes() == second.read_bytes()

    def test_loaded_model_predicts_identically(self, tmp_path):
        cfg = TrainConfig(strategy="gated", m_in=4, m=4, k=3, c=2, seed=37)
        model, _ = train(cfg, labeled_bags(8, 4, seed=39))
        path = tmp_path / "model.mivm"
        save_model(model, path)
        loaded = load_model(path)
        bag = Bag.from_array("p", make_rng(41).normal(size=(3, 4)))
        np.testing.assert_array_equal(forward(model, bag).logits,
                                      forward(loaded, bag).logits)

    def test_golden_bytes_stable(self, tmp_path):
        cfg = TrainConfig(strategy="avg", m_in=2, m=2, k=4, c=2, seed=42,
                          epochs=1)
        path = tmp_path / "golden.mivm"
        save_model(build_model(cfg), path)
        assert path.read_bytes().hex() == GOLDEN_CHECKPOINT_HEX

    def test_golden_bytes_load(self, tmp_path):
        path = tmp_path / "golden.mivm"
        path.write_bytes(bytes.fromhex(GOLDEN_CHECKPOINT_HEX))
        model = load_model(path)
        assert model.strategy == "avg"
        assert model.head.n_classes == 2
        np.testing.assert_allclose(
            model.head.W,
            [[0.3874323593619855, -0.08643893945605186],
             [0.5071340417774579, 0.2791205434745996]], rtol=0, atol=0)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.mivm"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(DataError):
            load_model(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "v9.mivm"
        path.write_bytes(b"MIVM" + (9).to_bytes(4, "little") + bytes(8))
        with pytest.raises(DataError):
            load_model(path)

    def test_missing_meta_record_rejected(self, tmp_path):
        # a file with only a head.W record and no leading meta.config
        import struct
        payload = struct.pack("<4sI", b"MIVM", 1)
        name = b"head.W"
        payload += struct.pack("<I", len(name)) + name
        payload += struct.pack("<II", 1, 2) + np.zeros(2).tobytes()
        path = tmp_path / "nometa.mivm"
        path.write_bytes(payload)
        with pytest.raises(DataError):
            load_model(path)


class TestParamContainers:
    def test_identity_encoder_carries_no_arrays(self):
        with pytest.raises(UsageError):
            EncoderParams(kind="identity", W=np.ones((2, 2)), b=np.zeros(2))

    def test_mlp_encoder_requires_consistent_shapes(self):
        with pytest.raises(ShapeError):
            EncoderParams(kind="mlp1", W=np.ones((2, 3)), b=np.zeros(5))

    def test_head_requires_two_classes(self):
        with pytest.raises(UsageError):
            HeadParams(W=np.ones((1, 4)), b=np.zeros(1))
