import json

import pytest

from emorl.config import (
    ConfigError,
    GeneratorPreset,
    ModelConfig,
    PRESETS,
    apply_overrides,
    config_hash,
    load_config,
    preset_config,
    resolve_config,
    run_config_from_dict,
    run_config_to_dict,
)


class TestPresets:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_resolve(self, name):
        cfg = preset_config(name)
        assert cfg.model.num_slots >= 1
        assert cfg.train.curriculum[0][0] == 0

    def test_tetromino_preset_shape(self):
        cfg = preset_config("tetromino")
        assert (cfg.model.image_height, cfg.model.image_width) == (32, 32)
        assert cfg.model.num_slots == 4
        assert cfg.model.latent_dim == 32
        assert cfg.model.decoder == "light"
        assert cfg.model.sigma_lik == 0.3
        assert cfg.train.geco.enabled
        assert cfg.train.grad_clip == 5.0
        assert cfg.train.lr.base == 4e-4

    def test_sprites_preset_shape(self):
        cfg = preset_config("sprites")
        assert cfg.model.num_slots == 5
        assert cfg.model.latent_dim == 64
        assert cfg.model.decoder == "standard"
        assert not cfg.train.geco.enabled
        assert cfg.train.curriculum == [(0, 3), (15000, 1)]

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            resolve_config({"preset": "marbles"})


class TestLoading:
    def test_file_overrides_preset(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({
            "preset": "tetromino",
            "train": {"seed": 11, "total_steps": 5},
        }))
        cfg = load_config(p)
        assert cfg.train.seed == 11
        assert cfg.train.total_steps == 5
        assert cfg.model.num_slots == 4  # inherited

    def test_set_overrides_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"preset": "tetromino", "train": {"seed": 11}}))
        cfg = load_config(p, ["train.seed=12", "model.num_slots=6"])
        assert cfg.train.seed == 12
        assert cfg.model.num_slots == 6

    def test_set_parses_json_values(self):
        d = apply_overrides({}, ["a.b=[1, 2]", "a.c=true", "a.d=text"])
        assert d == {"a": {"b": [1, 2], "c": True, "d": "text"}}

    def test_set_requires_equals(self):
        with pytest.raises(ConfigError, match="key=value"):
            apply_overrides({}, ["oops"])

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            resolve_config({"preset": "tetromino", "train": {"warp": 9}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(p)

    def test_roundtrip_dict(self):
        cfg = preset_config("sprites")
        again = run_config_from_dict(run_config_to_dict(cfg))
        assert run_config_to_dict(again) == run_config_to_dict(cfg)


class TestHash:
    def test_hash_covers_model_and_train(self):
        a = preset_config("tetromino")
        b = preset_config("tetromino")
        assert config_hash(a) == config_hash(b)
        b.train.seed += 1
        assert config_hash(a) != config_hash(b)

    def test_hash_ignores_eval_and_paths(self):
        a = preset_config("tetromino")
        b = preset_config("tetromino")
        b.eval.steps = 0
        b.eval.num_slots = 9
        b.data.path = "elsewhere.bin"
        b.out_dir = "other"
        assert config_hash(a) == config_hash(b)


class TestValidation:
    def test_model_config_guards(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_slots=3, latent_dim=8, image_height=12,
                        image_width=12, sigma_lik=0.1, likelihood="laplace")
        with pytest.raises(ConfigError):
            ModelConfig(num_slots=3, latent_dim=8, image_height=12,
                        image_width=12, sigma_lik=0.1, num_layers=1,
                        prior_variant="reversed_pp")
        with pytest.raises(ConfigError):
            ModelConfig(num_slots=3, latent_dim=8, image_height=12,
                        image_width=12, sigma_lik=-0.1)

    def test_generator_guards(self):
        with pytest.raises(ConfigError):
            GeneratorPreset(name="x", kind="vector", height=16, width=16,
                            count_range=(1, 2), allow_overlap=False,
                            background="black")
        with pytest.raises(ConfigError):
            GeneratorPreset(name="x", kind="sprite", height=16, width=16,
                            count_range=(3, 1), allow_overlap=False,
                            background="gray")

    def test_factor_kinds(self):
        tet = GeneratorPreset(name="t", kind="tetromino", height=16, width=16,
                              count_range=(1, 1), allow_overlap=False,
                              background="black")
        kinds = dict(tet.factor_kinds())
        assert kinds["shape"] == "discrete"
        assert kinds["angle"] == "discrete"
        spr = GeneratorPreset(name="s", kind="sprite", height=16, width=16,
                              count_range=(1, 1), allow_overlap=True,
                              background="gray")
        assert dict(spr.factor_kinds())["angle"] == "continuous"
