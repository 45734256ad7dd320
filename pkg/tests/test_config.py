import dataclasses

import pytest

from brushrl.config import RunConfig, load, parse, save, serialize


class TestRoundTrip:
    def test_default_round_trip(self):
        assert parse(serialize(RunConfig())) == RunConfig()

    def test_modified_round_trip(self):
        cfg = RunConfig(
            environment="scene",
            canvas_size=16,
            episode_len=3,
            terminal_source="l2",
            policy_lr=3e-4,
            threaded=True,
            run_dir='with "quotes" and \\slashes',
        )
        assert parse(serialize(cfg)) == cfg

    def test_every_field_serialized(self):
        text = serialize(RunConfig())
        for f in dataclasses.fields(RunConfig):
            assert f"{f.name} = " in text

    def test_file_round_trip(self, tmp_path):
        cfg = RunConfig(seed=42)
        save(cfg, tmp_path / "c.toml")
        assert load(tmp_path / "c.toml") == cfg


class TestParsing:
    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            parse('bogus = 1\n')

    def test_type_mismatch_rejected(self):
        with pytest.raises(ValueError, match="expects int"):
            parse('seed = "zero"\n')

    def test_bool_not_coerced_to_number(self):
        with pytest.raises(ValueError, match="seed"):
            parse("seed = true\n")

    def test_int_promoted_to_float(self):
        assert parse("policy_lr = 1\n").policy_lr == 1.0

    def test_malformed_text_rejected(self):
        with pytest.raises(ValueError, match="malformed"):
            parse("seed =")


class TestValidation:
    def test_default_valid(self):
        RunConfig().validate()

    def test_unknown_environment(self):
        with pytest.raises(ValueError, match="environment"):
            RunConfig(environment="voxels").validate()

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="preset"):
            RunConfig(preset="datacenter").validate()

    def test_bad_canvas(self):
        with pytest.raises(ValueError, match="canvas_size"):
            RunConfig(canvas_size=20).validate()

    def test_bad_counts(self):
        with pytest.raises(ValueError, match="batch_size"):
            RunConfig(batch_size=0).validate()

    def test_pbt_population(self):
        with pytest.raises(ValueError, match="population"):
            RunConfig(pbt=True, population=1).validate()

    def test_unknown_dataset(self):
        with pytest.raises(ValueError, match="dataset"):
            RunConfig(dataset="imagenet").validate()

    def test_idx_dataset_accepted(self):
        RunConfig(dataset="idx:/some/file").validate()

    def test_derived_objects(self):
        cfg = RunConfig(canvas_size=16, grid_size=8, color=False, episode_len=3, terminal_source="l2")
        spec = cfg.env_spec()
        assert spec.canvas_size == 16
        assert cfg.reward_config().terminal_source == "l2"
        assert cfg.train_settings().batch_size == cfg.batch_size
