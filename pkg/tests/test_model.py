"""Tests for branch construction, inference, training and serialization."""

import numpy as np
import pytest

from concnn.dataset import SynthConfig, generate_synthetic
from concnn.model import (
    BranchConfig,
    BranchModel,
    ModelFormatError,
    TrainConfig,
    batch_forward,
    branch_forward,
    build_branch,
    load_model,
    loss_and_gradients,
    save_model,
    train_branch,
)
from concnn.patching import slice_grid
from concnn.preprocess import histogram_equalize, load_raster, normalize

TINY = BranchConfig(patch_size=32, channel_widths=(2, 2, 2, 2, 2), fc_widths=(8, 8), num_classes=3)


def tiny_patches(rng, count):
    return rng.random((count, 3, 32, 32))


def reference_loss(model, patches, labels):
    probs = batch_forward(model, patches)
    return -float(np.log(probs[np.arange(len(labels)), labels]).mean())


class TestBranchConfig:
    def test_default_spatial_progression(self):
        assert BranchConfig().spatial_sizes() == [224, 112, 56, 28, 14, 7]

    def test_patch_64_final_map(self):
        config = BranchConfig(patch_size=64)
        assert config.spatial_sizes()[-1] == 2

    def test_padding_zero_progression(self):
        config = BranchConfig(patch_size=94, conv_padding=0)
        assert config.spatial_sizes() == [94, 46, 22, 10, 4, 1]

    def test_feature_size(self):
        assert BranchConfig().feature_size == 128 * 7 * 7
        assert TINY.feature_size == 2

    def test_padded_patch_must_divide_by_32(self):
        with pytest.raises(ValueError, match="divisible by 32"):
            BranchConfig(patch_size=100)

    def test_padding_zero_odd_map_rejected(self):
        with pytest.raises(ValueError, match="would pool"):
            BranchConfig(patch_size=64, conv_padding=0)

    @pytest.mark.parametrize(
        "kwargs,message",
        [
            ({"channel_widths": (16, 32)}, "5 positive ints"),
            ({"channel_widths": (16, 32, 64, 128, 0)}, "5 positive ints"),
            ({"fc_widths": (256,)}, "2 positive ints"),
            ({"num_classes": 1}, "num_classes"),
            ({"conv_padding": 2}, "conv_padding"),
        ],
    )
    def test_invalid_configs_rejected(self, kwargs, message):
        with pytest.raises(ValueError, match=message):
            BranchConfig(**kwargs)


class TestBuildBranch:
    def test_default_layer_shapes(self):
        model = build_branch(BranchConfig(), "ppl", seed=0)
        kernel_shapes = [k.shape for k in model.conv_kernels]
        assert kernel_shapes == [
            (16, 3, 3, 3),
            (32, 16, 3, 3),
            (64, 32, 3, 3),
            (128, 64, 3, 3),
            (128, 128, 3, 3),
        ]
        assert [w.shape for w in model.fc_weights] == [(256, 6272), (128, 256), (13, 128)]
        assert model.fc_weights[2].shape[0] == 13
        assert model.dtype == np.float32
        assert all(np.all(b == 0) for b in model.conv_biases + model.fc_biases)

    def test_seeded_construction_reproducible(self):
        a = build_branch(TINY, "ci", seed=5)
        b = build_branch(TINY, "ci", seed=5)
        c = build_branch(TINY, "ci", seed=6)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa, pb)
        assert any(not np.array_equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_he_scaling(self):
        model = build_branch(BranchConfig(), "xpl", seed=1)
        k = model.conv_kernels[1]  # fan-in 16 * 9 = 144
        assert abs(k.std() - np.sqrt(2.0 / 144)) < 0.002

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError, match="branch role"):
            build_branch(TINY, "composite6", seed=0)

    def test_inconsistent_shapes_rejected(self):
        model = build_branch(TINY, "ci", seed=0)
        bad = model.parameters()
        with pytest.raises(ValueError, match="do not match config"):
            BranchModel(
                "ci",
                TINY,
                conv_kernels=model.conv_kernels[::-1],
                conv_biases=model.conv_biases,
                fc_weights=model.fc_weights,
                fc_biases=model.fc_biases,
            )
        assert bad  # keep the original intact


class TestForward:
    def test_distribution_sums_to_one_default_config(self):
        rng = np.random.default_rng(201)
        model = build_branch(BranchConfig(), "ppl", seed=3)
        patch = rng.random((3, 224, 224))
        dist = branch_forward(model, patch)
        assert dist.shape == (13,)
        assert abs(float(dist.sum()) - 1.0) < 1e-9
        assert np.all(dist >= 0)

    def test_deterministic_on_identical_patches(self):
        rng = np.random.default_rng(202)
        model = build_branch(TINY, "ci", seed=4)
        patch = rng.random((3, 32, 32))
        assert np.array_equal(branch_forward(model, patch), branch_forward(model, patch.copy()))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(203)
        model = build_branch(TINY, "ci", seed=4)
        batch = tiny_patches(rng, 5)
        stacked = batch_forward(model, batch)
        for i in range(5):
            assert np.allclose(stacked[i], branch_forward(model, batch[i]), atol=1e-6)

    def test_wrong_shape_rejected(self):
        model = build_branch(TINY, "ci", seed=0)
        with pytest.raises(ValueError, match="3, 32, 32"):
            branch_forward(model, np.zeros((3, 16, 16)))

    def test_unnormalized_patch_rejected(self):
        model = build_branch(TINY, "ci", seed=0)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            branch_forward(model, np.full((3, 32, 32), 255.0))

    def test_trained_toy_model_separates_constants(self):
        model = build_branch(
            BranchConfig(patch_size=32, channel_widths=(2, 2, 2, 2, 2), fc_widths=(8, 8), num_classes=2),
            "ppl",
            seed=7,
        )
        zeros = np.zeros((3, 32, 32))
        ones = np.ones((3, 32, 32))
        train_branch(
            model,
            [(zeros, 0), (ones, 1)],
            TrainConfig(learning_rate=0.05, batch_size=2, max_iterations=300, seed=0),
        )
        assert branch_forward(model, zeros).argmax() == 0
        assert branch_forward(model, ones).argmax() == 1


class TestTrainBranch:
    def test_overfits_single_sample(self):
        rng = np.random.default_rng(211)
        model = build_branch(TINY, "ci", seed=8)
        sample = (rng.random((3, 32, 32)), 2)
        log = train_branch(model, [sample], TrainConfig(0.01, 1, 200, seed=0))
        assert log.iterations == 200
        assert log.losses[-1] < log.losses[0]

    def test_zero_learning_rate_freezes_parameters(self):
        rng = np.random.default_rng(212)
        model = build_branch(TINY, "ci", seed=9)
        before = [p.copy() for p in model.parameters()]
        train_branch(model, [(rng.random((3, 32, 32)), 0)], TrainConfig(0.0, 1, 50, seed=0))
        for old, new in zip(before, model.parameters()):
            assert np.array_equal(old, new)

    def test_loss_monotone_at_small_lr(self):
        rng = np.random.default_rng(213)
        model = build_branch(TINY, "ci", seed=10, dtype=np.float64)
        log = train_branch(
            model, [(rng.random((3, 32, 32)), 1)], TrainConfig(1e-3, 1, 100, seed=0)
        )
        assert np.all(np.diff(log.losses) <= 1e-12)

    def test_training_deterministic(self):
        rng = np.random.default_rng(214)
        samples = [(patch, i % 3) for i, patch in enumerate(tiny_patches(rng, 6))]
        cfg = TrainConfig(0.01, 2, 30, seed=3)
        a = build_branch(TINY, "ci", seed=11)
        b = build_branch(TINY, "ci", seed=11)
        log_a = train_branch(a, samples, cfg)
        log_b = train_branch(b, samples, cfg)
        assert log_a.losses == log_b.losses
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa, pb)

    def test_momentum_changes_trajectory_and_still_learns(self):
        rng = np.random.default_rng(218)
        samples = [(patch, i % 3) for i, patch in enumerate(tiny_patches(rng, 6))]
        plain = build_branch(TINY, "ci", seed=13)
        heavy = build_branch(TINY, "ci", seed=13)
        log_plain = train_branch(plain, samples, TrainConfig(0.01, 2, 60, seed=3))
        log_heavy = train_branch(heavy, samples, TrainConfig(0.01, 2, 60, seed=3, momentum=0.9))
        assert log_plain.losses[:3] != log_heavy.losses[:3] or log_plain.losses != log_heavy.losses
        assert np.mean(log_heavy.losses[-10:]) < np.mean(log_heavy.losses[:10])

    def test_train_config_bounds(self):
        with pytest.raises(ValueError, match="learning_rate"):
            TrainConfig(learning_rate=-0.1)
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError, match="max_iterations"):
            TrainConfig(max_iterations=0)
        with pytest.raises(ValueError, match="momentum"):
            TrainConfig(momentum=1.0)
        with pytest.raises(ValueError, match="momentum"):
            TrainConfig(momentum=-0.2)

    def test_epoch_bookkeeping(self):
        rng = np.random.default_rng(215)
        samples = [(patch, 0) for patch in tiny_patches(rng, 4)]
        log = train_branch(
            build_branch(TINY, "ci", seed=12), samples, TrainConfig(0.01, 2, 7, seed=0)
        )
        # 2 iterations per epoch; 7 iterations = 3 full epochs + 1 partial.
        assert log.iterations == 7
        assert len(log.epoch_accuracies) == 4
        assert all(0.0 <= acc <= 1.0 for acc in log.epoch_accuracies)

    def test_empty_samples_rejected(self):
        with pytest.raises(ValueError, match="empty sample"):
            train_branch(build_branch(TINY, "ci", seed=0), [], TrainConfig())

    def test_out_of_range_label_rejected(self):
        rng = np.random.default_rng(216)
        with pytest.raises(ValueError, match=r"labels must lie in \[0, 3\)"):
            train_branch(
                build_branch(TINY, "ci", seed=0),
                [(rng.random((3, 32, 32)), 3)],
                TrainConfig(),
            )

    def test_nonfinite_loss_aborts_with_diagnostic(self):
        rng = np.random.default_rng(217)
        model = build_branch(TINY, "ci", seed=13)
        model.fc_weights[2][:] = np.nan
        with pytest.raises(ArithmeticError, match="diverged.*iteration 1"):
            train_branch(model, [(rng.random((3, 32, 32)), 0)], TrainConfig(0.01, 1, 5, seed=0))

    @pytest.mark.parametrize(
        "kwargs",
        [{"learning_rate": -1.0}, {"batch_size": 0}, {"max_iterations": 0}, {"seed": -1}],
    )
    def test_invalid_train_config_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_separable_synthetic_textures_reach_95_percent(self, tmp_path):
        config = SynthConfig(num_classes=2, sections_per_class=1, image_size=64, seed=17)
        records = generate_synthetic(config, tmp_path)
        samples = []
        for label, record in enumerate(records):
            image = normalize(histogram_equalize(load_raster(record.images[0].ppl_path)))
            grid = slice_grid(image, 32)
            for i in range(grid.count):
                samples.append((grid.patches[i].transpose(2, 0, 1), label))
        model = build_branch(
            BranchConfig(patch_size=32, channel_widths=(4, 4, 8, 8, 8), fc_widths=(16, 16), num_classes=2),
            "ppl",
            seed=19,
        )
        log = train_branch(model, samples, TrainConfig(0.05, 8, 400, seed=1))
        assert log.iterations <= 2000
        assert log.epoch_accuracies[-1] >= 0.95


class TestGradientCheck:
    def test_full_branch_gradients_match_finite_differences(self):
        rng = np.random.default_rng(221)
        config = BranchConfig(patch_size=32, channel_widths=(2, 2, 2, 2, 2), fc_widths=(8, 8), num_classes=3)
        model = build_branch(config, "ci", seed=23, dtype=np.float64)
        patches = rng.random((2, 3, 32, 32))
        labels = np.array([0, 2])
        _, grads = loss_and_gradients(model, patches, labels)
        epsilon = 1e-5
        worst = 0.0
        for param, grad in zip(model.parameters(), grads):
            flat_p = param.ravel()
            flat_g = grad.ravel()
            for i in range(flat_p.size):
                orig = flat_p[i]
                flat_p[i] = orig + epsilon
                up = reference_loss(model, patches, labels)
                flat_p[i] = orig - epsilon
                down = reference_loss(model, patches, labels)
                flat_p[i] = orig
                numeric = (up - down) / (2 * epsilon)
                analytic = float(flat_g[i])
                denom = max(abs(analytic), abs(numeric))
                if denom < 1e-9:
                    continue
                worst = max(worst, abs(analytic - numeric) / denom)
        assert worst < 1e-3


class TestSerialization:
    def test_round_trip_bit_exact(self):
        model = build_branch(TINY, "xpl", seed=29)
        blob = save_model(model)
        back = load_model(blob)
        assert back.role == "xpl"
        assert back.config == TINY
        for pa, pb in zip(model.parameters(), back.parameters()):
            assert pa.dtype == pb.dtype == np.float32
            assert np.array_equal(pa, pb)
        assert save_model(back) == blob

    def test_forward_identical_after_round_trip(self):
        rng = np.random.default_rng(231)
        model = build_branch(TINY, "ci", seed=31)
        back = load_model(save_model(model))
        patch = rng.random((3, 32, 32))
        assert np.array_equal(branch_forward(model, patch), branch_forward(back, patch))

    def test_float64_model_persists_as_float32(self):
        model = build_branch(TINY, "ci", seed=32, dtype=np.float64)
        back = load_model(save_model(model))
        assert back.dtype == np.float32

    def test_bad_magic_rejected(self):
        blob = bytearray(save_model(build_branch(TINY, "ci", seed=0)))
        blob[:4] = b"JUNK"
        with pytest.raises(ModelFormatError, match="bad magic"):
            load_model(bytes(blob))

    def test_future_version_rejected(self):
        blob = bytearray(save_model(build_branch(TINY, "ci", seed=0)))
        blob[4:6] = (2).to_bytes(2, "little")
        with pytest.raises(ModelFormatError, match="unsupported format version 2"):
            load_model(bytes(blob))

    def test_truncation_rejected(self):
        blob = save_model(build_branch(TINY, "ci", seed=0))
        for cut in (3, 5, 20, len(blob) - 7):
            with pytest.raises(ModelFormatError, match="truncated|bad magic"):
                load_model(blob[:cut])

    def test_trailing_data_rejected(self):
        blob = save_model(build_branch(TINY, "ci", seed=0))
        with pytest.raises(ModelFormatError, match="trailing data"):
            load_model(blob + b"\x00\x00")

    def test_shape_table_mismatch_rejected(self):
        blob = bytearray(save_model(build_branch(TINY, "ci", seed=0)))
        role_len = blob[6]
        n_conv_at = 7 + role_len + 4
        n_conv = blob[n_conv_at]
        n_fc_at = n_conv_at + 1 + 4 * n_conv
        n_fc = blob[n_fc_at]
        num_classes_at = n_fc_at + 1 + 4 * n_fc
        blob[num_classes_at] = TINY.num_classes + 1  # config no longer matches the table
        with pytest.raises(ModelFormatError, match="shape table"):
            load_model(bytes(blob))

    def test_unknown_role_rejected(self):
        blob = bytearray(save_model(build_branch(TINY, "ci", seed=0)))
        assert blob[7:9] == b"ci"
        blob[7:9] = b"qq"
        with pytest.raises(ModelFormatError, match="unknown branch role"):
            load_model(bytes(blob))
