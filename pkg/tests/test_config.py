"""Profiles, YAML round-trips, and override plumbing."""

import dataclasses

import pytest

from maskduo.config import (
    PROFILES,
    RunConfig,
    apply_overrides,
    env_overrides,
    load_config,
    resolve_cache_dir,
    save_config,
)


class TestProfiles:
    def test_toy_profile_geometry(self):
        cfg = PROFILES["toy"]()
        assert cfg.encoder.width == 96 and cfg.encoder.depth == 2
        assert cfg.grid.n_frames % cfg.grid.patch_size == 0
        assert cfg.predictor.width == 48

    def test_paper_base_profile_geometry(self):
        cfg = PROFILES["paper-base"]()
        assert cfg.encoder.width == 768 and cfg.encoder.depth == 12
        assert (cfg.grid.n_mels, cfg.grid.n_frames) == (80, 608)
        assert cfg.train.epochs == 300 and cfg.train.warmup_epochs == 20
        assert cfg.train.batch_size == 2048 and cfg.train.base_lr == 3e-4
        assert cfg.train.masking_ratio == 0.6
        assert cfg.train.tau_start == 0.99995 and cfg.train.tau_end == 0.99999

    def test_unknown_profile_rejected(self):
        with pytest.raises(ValueError, match="profile"):
            load_config(profile="enormous")


class TestYaml:
    def test_round_trip(self, tmp_path):
        cfg = PROFILES["toy"]()
        path = save_config(cfg, tmp_path / "c.yaml")
        back = load_config(path)
        assert back == cfg

    def test_partial_file_overlays_profile(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("profile: toy\ntrain:\n  masking_ratio: 0.7\n")
        cfg = load_config(p)
        assert cfg.train.masking_ratio == 0.7
        assert cfg.encoder.width == 96  # untouched toy default

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  warp_speed: 9\n")
        with pytest.raises(ValueError, match="warp_speed"):
            load_config(p)


class TestOverrides:
    def test_dotted_paths_with_type_coercion(self):
        cfg = PROFILES["toy"]()
        out = apply_overrides(
            cfg,
            ["train.masking_ratio=0.75", "train.epochs=7", "data.kind=synthetic_bands",
             "train.target_input=all_patches"],
        )
        assert out.train.masking_ratio == 0.75
        assert out.train.epochs == 7
        assert out.train.target_input == "all_patches"
        assert cfg.train.epochs != 7  # original untouched

    def test_top_level_key(self):
        out = apply_overrides(PROFILES["toy"](), ["out_dir=/tmp/somewhere"])
        assert out.out_dir == "/tmp/somewhere"

    def test_unknown_path_rejected(self):
        with pytest.raises(ValueError):
            apply_overrides(PROFILES["toy"](), ["train.nope=1"])
        with pytest.raises(ValueError):
            apply_overrides(PROFILES["toy"](), ["nosection.x=1"])

    def test_malformed_rejected(self):
        with pytest.raises(ValueError, match="path.key=value"):
            apply_overrides(PROFILES["toy"](), ["train.epochs"])

    def test_invalid_value_surfaces_validation(self):
        with pytest.raises(ValueError):
            apply_overrides(PROFILES["toy"](), ["train.masking_ratio=1.5"])

    def test_none_for_optional_field(self):
        cfg = apply_overrides(PROFILES["toy"](), ["data.probe_clips_per_class=2"])
        assert cfg.data.probe_clips_per_class == 2
        back = apply_overrides(cfg, ["data.probe_clips_per_class=null"])
        assert back.data.probe_clips_per_class is None


class TestEnvOverrides:
    def test_collection_and_ordering(self):
        env = {
            "MASKDUO_SET_train__epochs": "3",
            "MASKDUO_SET_grid__n_frames": "96",
            "UNRELATED": "x",
        }
        got = env_overrides(env)
        assert got == ["grid.n_frames=96", "train.epochs=3"]

    def test_applied_by_load_config(self, monkeypatch):
        monkeypatch.setenv("MASKDUO_SET_train__epochs", "11")
        cfg = load_config(profile="toy")
        assert cfg.train.epochs == 11

    def test_explicit_overrides_beat_env(self, monkeypatch):
        monkeypatch.setenv("MASKDUO_SET_train__epochs", "11")
        cfg = load_config(profile="toy", overrides=["train.epochs=13"])
        assert cfg.train.epochs == 13


class TestCacheDir:
    def test_env_wins(self, monkeypatch, tmp_path):
        monkeypatch.setenv("MASKDUO_CACHE_DIR", str(tmp_path / "c"))
        cfg = PROFILES["toy"]()
        assert resolve_cache_dir(cfg) == tmp_path / "c"

    def test_defaults_under_out_dir(self, monkeypatch):
        monkeypatch.delenv("MASKDUO_CACHE_DIR", raising=False)
        cfg = dataclasses.replace(PROFILES["toy"](), out_dir="/tmp/run7")
        assert str(resolve_cache_dir(cfg)) == "/tmp/run7/cache"


def test_grid_divisibility_enforced():
    from maskduo.config import GridConfig

    with pytest.raises(ValueError):
        GridConfig(patch_size=16, n_mels=80, n_frames=100)


def test_run_config_sections_are_dataclasses():
    cfg = RunConfig()
    for name in ("grid", "audio", "data", "encoder", "predictor", "train", "probe"):
        assert dataclasses.is_dataclass(getattr(cfg, name))
