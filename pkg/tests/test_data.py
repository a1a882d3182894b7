"""IDX parsing, synthetic data, and run-config round trips."""

import numpy as np
import pytest

from civet.data import (ConfigError, Dataset, IdxParseError, RunConfig,
                        apply_assignments, config_echo, load_idx,
                        load_run_datasets, parse_config, serialize_config,
                        synthetic_dataset, write_idx)


class TestIdx:
    def test_hand_built_scaling(self, tmp_path):
        path = tmp_path / "two.idx"
        imgs = np.array([[[0, 255], [128, 64]], [[255, 0], [0, 255]]], dtype=np.uint8)
        write_idx(path, imgs)
        ds = load_idx(path)
        assert len(ds) == 2
        assert ds.examples[0] == pytest.approx([0.0, 1.0, 128 / 255, 64 / 255])
        assert ds.image_shape == (2, 2)

    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        path = tmp_path / "r.idx"
        write_idx(path, imgs)
        ds = load_idx(path)
        assert np.array_equal((ds.examples * 255).round().astype(np.uint8),
                              imgs.reshape(7, 15))

    def test_wrong_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x00\x00\x08\x01" + b"\x00" * 20)
        with pytest.raises(IdxParseError, match="offset 0") as err:
            load_idx(path)
        assert err.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.idx"
        imgs = np.zeros((4, 3, 3), dtype=np.uint8)
        write_idx(path, imgs)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(IdxParseError, match="truncated"):
            load_idx(path)

    def test_limit(self, tmp_path):
        path = tmp_path / "many.idx"
        write_idx(path, np.zeros((50, 2, 2), dtype=np.uint8))
        assert len(load_idx(path, limit=10)) == 10
        assert len(load_idx(path, limit=100)) == 50


class TestSynthetic:
    def test_deterministic(self):
        a = synthetic_dataset(20, 5, seed=9)
        b = synthetic_dataset(20, 5, seed=9)
        assert np.array_equal(a.examples, b.examples)

    def test_range_and_size(self):
        ds = synthetic_dataset(200, 8, seed=1)
        assert ds.examples.shape == (200, 8)
        assert ds.examples.min() >= 0.0 and ds.examples.max() <= 1.0

    def test_seed_changes_data(self):
        a = synthetic_dataset(20, 5, seed=0)
        b = synthetic_dataset(20, 5, seed=1)
        assert not np.array_equal(a.examples, b.examples)

    def test_validation(self):
        with pytest.raises(ValueError):
            synthetic_dataset(0, 5, seed=0)
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            Dataset(np.full((2, 2), 1.5))


class TestConfig:
    def test_minimal_with_defaults(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("method = standard\n")
        cfg = parse_config(path)
        # protocol defaults
        assert cfg.train.learning_rate == 1e-4
        assert cfg.train.weight_decay == 1e-5
        assert cfg.train.warmup_standard_iters == 250
        assert cfg.train.warmup_ramp_iters == 250
        assert cfg.train.pgd_steps == 10
        assert cfg.train.pgd_step_frac == 0.1
        assert cfg.train.sabr_tau == 0.1
        assert cfg.delta == 0.05

    def test_comments_and_values(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("""
# training setup
method = civet
epsilon = 0.3        # perturbation radius
delta_schedule = 0.35,0.2,0.05
epochs = 7
seed = 42
dataset = synthetic:n=100,d=8
output_dir = results
""")
        cfg = parse_config(path)
        assert cfg.train.method == "civet"
        assert cfg.train.epsilon == 0.3
        assert cfg.train.delta_schedule.deltas == (0.35, 0.2, 0.05)
        assert cfg.train.epochs == 7
        assert cfg.seed == 42
        assert cfg.output_dir == "results"

    def test_unknown_key_names_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("method = standard\nlearning_rte = 0.1\n")
        with pytest.raises(ConfigError, match="line 2") as err:
            parse_config(path)
        assert err.value.line == 2

    def test_duplicate_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 2\nepochs = 3\n")
        with pytest.raises(ConfigError, match="duplicate key"):
            parse_config(path)

    def test_unparsable_value_names_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("method = standard\nepochs = banana\n")
        with pytest.raises(ConfigError, match="line 2"):
            parse_config(path)

    def test_missing_equals(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("just some words\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config(path)

    def test_roundtrip_stable(self, tmp_path):
        cfg = RunConfig()
        cfg.train.method = "civet-sabr"
        cfg.train.epsilon = 0.25
        cfg.train.rng_seed = 17
        cfg.dataset = "synthetic:n=50,d=8"
        text = serialize_config(cfg)
        path = tmp_path / "run.cfg"
        path.write_text(text)
        cfg2 = parse_config(path)
        assert serialize_config(cfg2) == text
        assert cfg2.train == cfg.train
        assert (cfg2.dataset, cfg2.architecture, cfg2.output_dir, cfg2.delta) == \
            (cfg.dataset, cfg.architecture, cfg.output_dir, cfg.delta)

    def test_overrides_last_wins(self):
        cfg = RunConfig()
        apply_assignments(cfg, [("epochs", "3", 1), ("epochs", "9", 2)])
        assert cfg.train.epochs == 9

    def test_config_echo_is_json_friendly(self):
        import json
        echo = config_echo(RunConfig())
        json.dumps(echo)
        assert echo["learning_rate"] == 1e-4


class TestRunDatasets:
    def test_synthetic_split_shares_manifold(self):
        cfg = RunConfig()
        cfg.dataset = "synthetic:n=100,d=6,seed=2"
        train, test = load_run_datasets(cfg)
        assert len(train) == 100
        assert len(test) == 20
        assert train.d_in == test.d_in == 6
        # same pool: no overlap but identical generator settings
        pool = synthetic_dataset(120, 6, seed=2)
        assert np.array_equal(train.examples, pool.examples[:100])
        assert np.array_equal(test.examples, pool.examples[100:])

    def test_idx_split(self, tmp_path):
        path = tmp_path / "imgs.idx"
        write_idx(path, (np.arange(40 * 4) % 256).astype(np.uint8).reshape(40, 2, 2))
        cfg = RunConfig()
        cfg.dataset = f"idx:{path},limit=20"
        train, test = load_run_datasets(cfg)
        assert len(train) == 20
        assert len(test) == 4

    def test_unknown_source(self):
        cfg = RunConfig()
        cfg.dataset = "cifar"
        with pytest.raises(ConfigError, match="unknown dataset source"):
            load_run_datasets(cfg)
