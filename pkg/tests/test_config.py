import json

import pytest

from densebox.config import ConfigError, RunConfig, apply_overrides, load_config


class TestLoadConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.geometry.reg_norm == cfg.pyramid.reg_norm == 12.5
        assert cfg.patch.patch_size == 240

    def test_target_height_propagates(self):
        cfg = load_config(overrides=["geometry.target_height=40"])
        assert cfg.geometry.reg_norm == 10.0
        assert cfg.pyramid.reg_norm == 10.0
        assert cfg.patch.target_height == 40

    def test_landmark_count_propagates(self):
        cfg = load_config(overrides=["model.n_landmarks=0"])
        assert cfg.geometry.n_landmarks == 0

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"optimizer": {"lr": 0.5}, "seed": 3}))
        cfg = load_config(path, ["--optimizer.iterations=7", "seed=4"])
        assert (cfg.optimizer.lr, cfg.optimizer.iterations, cfg.seed) == (0.5, 7, 4)

    def test_roundtrip(self):
        cfg = load_config(overrides=["model.stage_depths=[1,2,3]"])
        assert RunConfig.from_dict(json.loads(cfg.dumps())) == cfg

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            load_config(overrides=["model.width=3"])
        with pytest.raises(ConfigError):
            load_config(overrides=["bogus=1"])
        with pytest.raises(ConfigError):
            apply_overrides({}, ["nosection.x=1"])

    def test_inconsistent(self):
        with pytest.raises(ConfigError):
            load_config(overrides=["pyramid.reg_norm=3"])
        with pytest.raises(ConfigError):
            load_config(overrides=["geometry.patch_size=244", "patch.patch_size=244"])

    def test_string_values(self):
        cfg = load_config(overrides=["optimizer.precision=float32"])
        assert cfg.optimizer.precision == "float32"

    def test_desk_profile(self):
        from pathlib import Path
        cfg = load_config(Path(__file__).parents[1] / "configs" / "desk.json")
        assert cfg.n_scenes == 500 and cfg.optimizer.batch_size == 10 and cfg.geometry.patch_size == 240
