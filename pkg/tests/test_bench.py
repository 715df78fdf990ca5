"""Tests for datasets, corruption, metrics, and the experiment runner."""

import math
import struct

import numpy as np
import pytest

from bayespcn.bench import (
    CIFAR_RECORD_BYTES,
    CorruptionSpec,
    Dataset,
    ExperimentConfig,
    corrupt,
    load_cifar10,
    load_config,
    load_raw_tensor,
    mse,
    parse_config_text,
    recall_accuracy,
    run_experiment,
    save_raw_tensor,
    synthetic_dataset,
    synthetic_iid_dataset,
)
from bayespcn.engine import OptimizerConfig, ReadConfig


def write_cifar_fixture(path, records):
    """records: list of (label, 3072 pixel bytes)"""
    blob = b"".join(bytes([label]) + bytes(pixels) for label, pixels in records)
    path.write_bytes(blob)


class TestCifarLoader:
    def test_all_zero_record_maps_to_minus_one(self, tmp_path):
        f = tmp_path / "batch.bin"
        write_cifar_fixture(f, [(0, [0] * 3072)])
        ds = load_cifar10(f)
        np.testing.assert_allclose(ds.vectors[0], -1.0)
        assert ds.image_shape == (3, 32, 32)

    def test_all_255_record_maps_to_plus_one(self, tmp_path):
        f = tmp_path / "batch.bin"
        write_cifar_fixture(f, [(3, [255] * 3072)])
        np.testing.assert_allclose(load_cifar10(f).vectors[0], 1.0)

    def test_two_known_records(self, tmp_path):
        f = tmp_path / "batch.bin"
        pix_a = list(range(256)) * 12
        pix_b = [7] * 3072
        write_cifar_fixture(f, [(1, pix_a), (9, pix_b)])
        ds = load_cifar10(f)
        assert len(ds) == 2
        np.testing.assert_allclose(ds.vectors[0], 2.0 * np.array(pix_a) / 255.0 - 1.0)
        np.testing.assert_allclose(ds.vectors[1], 2.0 * 7.0 / 255.0 - 1.0)

    def test_truncated_file_rejected(self, tmp_path):
        f = tmp_path / "bad.bin"
        f.write_bytes(b"\x00" * (CIFAR_RECORD_BYTES + 10))
        with pytest.raises(ValueError):
            load_cifar10(f)

    def test_directory_of_batches(self, tmp_path):
        write_cifar_fixture(tmp_path / "a.bin", [(0, [0] * 3072)])
        write_cifar_fixture(tmp_path / "b.bin", [(0, [255] * 3072)])
        ds = load_cifar10(tmp_path)
        assert len(ds) == 2


class TestRawTensor:
    def test_known_small_file(self, tmp_path):
        f = tmp_path / "v.bpt"
        payload = struct.pack("<4sIII", b"BPTD", 1, 1, 4)
        payload += np.array([-1.0, 0.0, 0.5, 1.0], dtype="<f4").tobytes()
        f.write_bytes(payload)
        ds = load_raw_tensor(f)
        np.testing.assert_allclose(ds.vectors[0], [-1.0, 0.0, 0.5, 1.0])

    def test_empty_dataset_rejected(self, tmp_path):
        f = tmp_path / "v.bpt"
        f.write_bytes(struct.pack("<4sIII", b"BPTD", 1, 0, 4))
        with pytest.raises(ValueError, match="empty"):
            load_raw_tensor(f)

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        vectors = rng.uniform(-1, 1, size=(100, 7)).astype(np.float32).astype(np.float64)
        f = tmp_path / "v.bpt"
        save_raw_tensor(f, vectors)
        back = load_raw_tensor(f).vectors
        assert np.array_equal(back, vectors)

    def test_bad_magic(self, tmp_path):
        f = tmp_path / "v.bpt"
        f.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(ValueError, match="magic"):
            load_raw_tensor(f)

    def test_out_of_range_values(self, tmp_path):
        f = tmp_path / "v.bpt"
        payload = struct.pack("<4sIII", b"BPTD", 1, 1, 2)
        payload += np.array([0.0, 2.0], dtype="<f4").tobytes()
        f.write_bytes(payload)
        with pytest.raises(ValueError, match="outside"):
            load_raw_tensor(f)


class TestCorrupt:
    def test_zero_noise_is_identity(self):
        x = np.linspace(-1, 1, 10)
        out, mask = corrupt(x, CorruptionSpec("white_noise", 0.0, seed=1))
        np.testing.assert_allclose(out, x, atol=0)
        assert mask is None

    def test_mask_blacks_rightmost_columns(self):
        c, h, w = 3, 4, 32
        x = np.full(c * h * w, 0.5)
        out, mask = corrupt(x, CorruptionSpec("mask", 0.25, seed=0), (c, h, w))
        img = out.reshape(c, h, w)
        np.testing.assert_allclose(img[:, :, 24:], -1.0)
        np.testing.assert_allclose(img[:, :, :24], 0.5)
        assert mask.sum() == c * h * 24

    def test_dropout_touches_exact_site_count(self):
        c, h, w = 3, 8, 8
        x = np.full(c * h * w, 0.5)
        out, mask = corrupt(x, CorruptionSpec("dropout", 0.25, seed=2), (c, h, w))
        hit = ~mask.reshape(c, h, w)
        # identical site pattern across channels, exactly round(f*H*W) sites
        assert np.array_equal(hit[0], hit[1]) and np.array_equal(hit[0], hit[2])
        assert hit[0].sum() == round(0.25 * h * w)
        np.testing.assert_allclose(out[~mask], -1.0)
        np.testing.assert_allclose(out[mask], 0.5)

    def test_white_noise_effective_scale(self):
        # identity-model calibration anchor: sigma 0.2 on the [0,1] pixel
        # scale doubles in [-1,1], so the corruption MSE is 0.4^2 = 0.16
        x = np.zeros(100_000)
        out, _ = corrupt(x, CorruptionSpec("white_noise", 0.2, seed=3))
        assert mse(out, x) == pytest.approx(0.16, rel=0.02)

    def test_spatial_corruption_requires_shape(self):
        with pytest.raises(ValueError):
            corrupt(np.zeros(12), CorruptionSpec("dropout", 0.25, seed=0))

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            CorruptionSpec("dropout", 1.5)
        with pytest.raises(ValueError):
            CorruptionSpec("blur", 0.1)
        with pytest.raises(ValueError):
            CorruptionSpec("white_noise", -0.1)


class TestMetrics:
    def test_identical_vectors(self):
        assert mse(np.ones(5), np.ones(5)) == 0.0

    def test_uniform_offset(self):
        assert mse(np.zeros(10), np.full(10, 0.1)) == pytest.approx(0.01)

    def test_against_fsum_reference(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=10_000)
        b = rng.normal(size=10_000)
        ref = math.fsum((ai - bi) ** 2 for ai, bi in zip(a, b)) / a.size
        assert abs(mse(a, b) - ref) <= 1e-12 * abs(ref)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mse(np.zeros(3), np.zeros(4))

    def test_accuracy_extremes(self):
        exact = [(np.zeros(4), np.zeros(4))] * 3
        assert recall_accuracy(exact) == 1.0
        off = [(np.zeros(4), np.full(4, math.sqrt(0.02)))] * 3
        assert recall_accuracy(off, threshold=0.01) == 0.0

    def test_accuracy_hand_count(self):
        pairs = [
            (np.zeros(2), np.zeros(2)),                      # mse 0     -> hit
            (np.zeros(2), np.full(2, 0.05)),                 # 0.0025    -> hit
            (np.zeros(2), np.full(2, 0.2)),                  # 0.04      -> miss
            (np.zeros(2), np.array([0.0, 0.2])),             # 0.02      -> miss
        ]
        assert recall_accuracy(pairs, threshold=0.01) == 0.5

    def test_accuracy_empty_rejected(self):
        with pytest.raises(ValueError):
            recall_accuracy([])


class TestDatasets:
    def test_synthetic_bounds_and_determinism(self):
        a = synthetic_dataset(16, 24, seed=5)
        b = synthetic_dataset(16, 24, seed=5)
        assert np.array_equal(a.vectors, b.vectors)
        assert np.abs(a.vectors).max() <= 1.0

    def test_iid_bounds(self):
        ds = synthetic_iid_dataset(8, 10, seed=6)
        assert np.abs(ds.vectors).max() <= 1.0

    def test_dataset_range_validated(self):
        with pytest.raises(ValueError):
            Dataset(vectors=np.array([[0.0, 1.5]]))


FAST_READ = ReadConfig(icm_iterations=6, steps_per_phase=500)


def tiny_config(**overrides):
    base = dict(
        model="bayespcn",
        dims=(16, 12, 12),
        sequence_length=4,
        corruption=CorruptionSpec("dropout", 0.25, seed=3),
        read=FAST_READ,
        write_steps=500,
        seeds=(0,),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestRunExperiment:
    def test_identity_calibration(self):
        cfg = ExperimentConfig(
            model="identity",
            dims=(5000,),
            sequence_length=20,
            corruption=CorruptionSpec("white_noise", 0.2, seed=7),
            seeds=(0,),
        )
        result = run_experiment(cfg)
        assert result.overall_mse == pytest.approx(0.16, rel=0.05)

    def test_single_item_accuracy_one(self):
        result = run_experiment(tiny_config(sequence_length=1))
        assert result.accuracy == 1.0

    def test_unfired_forget_schedule_is_bit_identical(self):
        a = run_experiment(tiny_config(forget_beta=0.5, forget_every=None))
        b = run_experiment(tiny_config(forget_beta=0.0, forget_every=None))
        assert _strip_timing(a.csv_bytes()) == _strip_timing(b.csv_bytes())

    def test_same_seed_same_csv(self):
        a = run_experiment(tiny_config())
        b = run_experiment(tiny_config())
        assert _strip_timing(a.csv_bytes()) == _strip_timing(b.csv_bytes())

    def test_hetero_keys_preserved(self):
        cfg = tiny_config()
        result = run_experiment(cfg)
        # rebuild the corruption stream to locate the known entries
        ds = synthetic_dataset(cfg.sequence_length, cfg.dims[0], seed=[0, 7919])
        for row in result.rows:
            i = row["item_index"]
            rng = np.random.default_rng([cfg.corruption.seed, 0, i])
            q, known = corrupt(ds.vectors[i], cfg.corruption, (1, 1, 16), rng=rng)
            assert row["mse"] <= mse(ds.vectors[i], q)

    def test_batch_indices_follow_sixteenths(self):
        result = run_experiment(tiny_config(sequence_length=4, model="identity"))
        assert [r["batch_index"] for r in result.rows] == [0, 1, 2, 3]
        cfg32 = tiny_config(sequence_length=32, model="identity")
        result32 = run_experiment(cfg32)
        assert [r["batch_index"] for r in result32.rows] == [i // 2 for i in range(32)]

    def test_mhn_and_gpcn_models_run(self):
        for model in ("mhn", "gpcn-online"):
            result = run_experiment(tiny_config(model=model, sequence_length=2,
                                                gpcn_weight_iters=5))
            assert len(result.rows) == 2
            assert np.isfinite(result.overall_mse)


def _strip_timing(csv_bytes):
    lines = csv_bytes.decode().splitlines()
    return "\n".join(",".join(line.split(",")[:-1]) for line in lines)


class TestConfigParsing:
    def test_round_trip_of_documented_keys(self):
        text = """
        # experiment
        model = bayespcn
        dims = 48,64,64,64
        activation = gelu
        particles = 2
        sigma_w2 = 1.0
        sigma_x2 = 0.0001
        sequence_length = 8
        corruption = mask
        corruption_param = 0.25
        corruption_seed = 5
        forget_beta = 0.02
        forget_every = 16
        icm_iterations = 10
        steps_per_phase = 200
        learning_rate = 0.02
        write_steps = 300
        seeds = 1,2
        data = synthetic-iid
        image_shape = 1,1,48
        accuracy_threshold = 0.01
        """
        cfg = parse_config_text(text)
        assert cfg.model == "bayespcn"
        assert cfg.dims == (48, 64, 64, 64)
        assert cfg.n_particles == 2
        assert cfg.corruption == CorruptionSpec("mask", 0.25, 5)
        assert cfg.forget_every == 16
        assert cfg.read.icm_iterations == 10
        assert cfg.read.optimizer.learning_rate == 0.02
        assert cfg.seeds == (1, 2)
        assert cfg.image_shape == (1, 1, 48)

    def test_forget_every_none(self):
        assert parse_config_text("forget_every = none").forget_every is None

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config_text("mystery = 1")

    def test_malformed_line_rejected(self):
        with pytest.raises(ValueError, match="key=value"):
            parse_config_text("just some words")

    def test_load_config_from_file(self, tmp_path):
        f = tmp_path / "exp.cfg"
        f.write_text("model = identity\nsequence_length = 3\n")
        cfg = load_config(f)
        assert cfg.model == "identity"
        assert cfg.sequence_length == 3
