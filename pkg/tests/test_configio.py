"""key=value parsing and the checkpoint config snapshot."""

import pytest

from adapt3d import configio as ci
from adapt3d.model import AdaptConfig
from adapt3d.trainer import TrainConfig


class TestParse:
    def test_comments_and_blanks_ignored(self):
        raw = ci.parse_kv_text("# header\n\nlr = 1e-3  # inline\nepochs = 3\n")
        assert raw == {"lr": "1e-3", "epochs": "3"}

    def test_missing_equals_rejected(self):
        with pytest.raises(ci.ConfigError, match="key = value"):
            ci.parse_kv_text("epochs 3\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ci.ConfigError, match="duplicate"):
            ci.parse_kv_text("lr = 1\nlr = 2\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ci.ConfigError, match="unknown key"):
            ci.coerce_options({"wibble": "1"})

    def test_bad_value_rejected(self):
        with pytest.raises(ci.ConfigError, match="bad value"):
            ci.coerce_options({"epochs": "three"})

    def test_layers_parsing(self):
        model_kw, _ = ci.coerce_options({"layers": "1,1,2,2"})
        assert model_kw["layers"] == (1, 1, 2, 2)
        with pytest.raises(ci.ConfigError):
            ci.coerce_options({"layers": "1,2"})

    def test_bool_parsing(self):
        _, train_kw = ci.coerce_options({"augment": "false"})
        assert train_kw["augment"] is False

    def test_bounds_derived_from_n_total(self):
        model_cfg, _ = ci.build_configs({"n_total": "48", "image_extent": "224",
                                         "patch_size": "16", "embed_dim": "256"})
        assert (model_cfg.n_min, model_cfg.n_max) == (4, 40)


class TestSnapshot:
    def test_roundtrip(self):
        model_cfg = AdaptConfig()
        train_cfg = TrainConfig(lr=2e-4, epochs=7, augment=False, cosine_horizon=123)
        text = ci.snapshot_text(model_cfg, train_cfg, epoch=5)
        back_model, back_train, epoch = ci.parse_snapshot(text)
        assert back_model == model_cfg
        assert back_train == train_cfg
        assert epoch == 5

    def test_roundtrip_full_scale(self):
        model_cfg = AdaptConfig.full_scale()
        train_cfg = TrainConfig()
        text = ci.snapshot_text(model_cfg, train_cfg, epoch=0)
        back_model, back_train, _ = ci.parse_snapshot(text)
        assert back_model == model_cfg
        assert back_train == train_cfg
