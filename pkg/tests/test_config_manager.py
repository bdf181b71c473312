import json

import pytest

from config_manager import (ConfigManager, ExperimentConfig, default_threads, parse_overrides,
                            read_config_file)
from errors import ConfigError


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# experiment\nframes = 16  # K\n\nmu=2.5\nscene = synthetic:7\nlog_psnr = yes\n")
    values = read_config_file(str(path))
    assert values == {"frames": "16", "mu": "2.5", "scene": "synthetic:7", "log_psnr": "yes"}

    cfg = ExperimentConfig.from_file(str(path))
    assert cfg.frames == 16
    assert cfg.mu == 2.5
    assert cfg.log_psnr is True


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_config_file(str(tmp_path / "missing.cfg"))
    path = tmp_path / "bad.cfg"
    path.write_text("frames 16\n")
    with pytest.raises(ConfigError):
        read_config_file(str(path))


def test_overrides_are_coerced():
    cfg = ExperimentConfig().apply_overrides(parse_overrides(["range_max=1e5", "max_iters = 1e3",
                                                              "backtracking=off"]))
    assert cfg.range_max == 100000.0
    assert cfg.max_iters == 1000
    assert cfg.backtracking is False
    cfg.apply_overrides({"depth": 7, "c": 3})
    assert cfg.depth == 7
    assert isinstance(cfg.c, float)


def test_bad_overrides():
    with pytest.raises(ConfigError):
        parse_overrides(["frames"])
    with pytest.raises(ConfigError):
        ExperimentConfig().apply_overrides({"nonsense": "1"})
    for key, value in (("frames", "2.5"), ("mu", "lots"), ("log_psnr", "maybe")):
        with pytest.raises(ConfigError):
            ExperimentConfig().apply_overrides({key: value})


def test_builders_report_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig(sigma=-1.0).sensing_operator()
    with pytest.raises(ConfigError):
        ExperimentConfig(variant="adam").solver_config()
    with pytest.raises(ConfigError):
        ExperimentConfig(tile=2, q_max=10).threshold_pattern()
    with pytest.raises(ConfigError):
        ExperimentConfig(pattern="no/such/pattern.txt").threshold_pattern()
    with pytest.raises(ConfigError):
        ExperimentConfig(dictionary="no/such/dict.btsr").load_dictionary()


def test_builders(tmp_path):
    cfg = ExperimentConfig(patch_side=4, atoms_per_axis=6, max_iters=30)
    assert cfg.load_dictionary().atoms.shape == (16, 36)
    assert cfg.solver_config().max_iters == 30
    assert cfg.solver_config(max_iters=3).max_iters == 3
    assert cfg.threshold_pattern().tile.shape == (5, 5)


def test_saved_file_reloads(tmp_path):
    cfg = ExperimentConfig(frames=32, pattern="hdr", log_psnr=True)
    path = cfg.save(str(tmp_path / "saved.cfg"))
    assert ExperimentConfig.from_file(path).to_dict() == cfg.to_dict()


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("JOTRECON_THREADS", "6")
    assert default_threads() == 6
    monkeypatch.setenv("JOTRECON_THREADS", "0")
    assert default_threads() == 1
    monkeypatch.setenv("JOTRECON_THREADS", "many")
    with pytest.raises(ConfigError):
        default_threads()


def test_presets(tmp_path, capsys):
    manager = ConfigManager(str(tmp_path))
    assert manager.list_saved_configs() == []
    manager.save_config("hdr", {"pattern": "hdr", "frames": 8})
    assert manager.preset_values("hdr") == {"pattern": "hdr", "frames": 8}
    assert "saved_at" in manager.load_config("hdr")
    assert manager.list_saved_configs() == ["hdr"]
    assert "hdr" in capsys.readouterr().out

    with pytest.raises(ConfigError):
        manager.save_config("bad", {"colour": "red"})
    with pytest.raises(ConfigError):
        manager.preset_values("missing")


def test_delete_asks_for_confirmation(tmp_path, monkeypatch):
    manager = ConfigManager(str(tmp_path))
    manager.save_config("a", {"frames": 2})
    monkeypatch.setattr(ConfigManager, "confirm", lambda self, message: False)
    assert not manager.delete_config_interactive("a")
    assert manager.load_config("a") is not None
    monkeypatch.setattr(ConfigManager, "confirm", lambda self, message: True)
    assert manager.delete_config_interactive("a")
    assert manager.load_config("a") is None
    assert not manager.delete_config_interactive("a", assume_yes=True)


def test_corrupt_preset_file(tmp_path):
    manager = ConfigManager(str(tmp_path))
    with open(manager.config_file, "w") as f:
        f.write("{not json")
    with pytest.raises(ConfigError):
        manager.load_all_configs()


def test_preset_home_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("JOTRECON_HOME", str(tmp_path / "home"))
    manager = ConfigManager()
    manager.save_config("x", {"mu": 1.0})
    with open(tmp_path / "home" / "saved_configs.json") as f:
        assert json.load(f)["x"]["mu"] == 1.0


def test_exposure_scales():
    assert ExperimentConfig().scales() == (1.0,)
    cfg = ExperimentConfig().apply_overrides({"exposure_scales": " 0.01, 0.05 ,0.2"})
    assert cfg.scales() == (0.01, 0.05, 0.2)
    assert cfg.peak() == pytest.approx(0.26 * cfg.range_max)
    for bad in ("", "1,,2", "fast", "0.5,-1", "0"):
        with pytest.raises(ConfigError):
            ExperimentConfig(exposure_scales=bad).scales()


def test_training_settings():
    cfg = ExperimentConfig(train_order="theta, D", decay=0.25, max_decays=1, epochs=7, loss="log_mse")
    train = cfg.train_config()
    assert train.order == ("theta", "D")
    assert (train.decay, train.max_decays, train.epochs, train.loss) == (0.25, 1, 7, "log_mse")
    assert ExperimentConfig().train_config().order == ("W", "A", "Q", "theta", "D")
    for key, value in (("train_order", "W,B"), ("train_order", " , "), ("decay", 1.5), ("max_decays", -1)):
        with pytest.raises(ConfigError):
            ExperimentConfig(**{key: value}).train_config()


def test_file_values_override_base(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("frames = 16\n")
    cfg = ExperimentConfig.from_file(str(path), threads=4, frames=2)
    assert (cfg.threads, cfg.frames) == (4, 16)
