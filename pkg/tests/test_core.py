import numpy as np
import pytest
from hypothesis import given, strategies as st

from adadqa.core import (ConfigError, EvalResult, QualityRecord, TrainConfig, VideoClip, normalize_mos, read_config,
                         validate_config, write_config)


def test_defaults_from_empty_config():
    cfg = validate_config({})
    assert (cfg.gamma, cfg.lambda_, cfg.d) == (0.1, 0.8, 32)
    assert (cfg.epochs, cfg.warmup_epochs, cfg.lr_init, cfg.weight_decay, cfg.batch_size) == (60, 2, 1e-3, 2e-2, 1)
    assert validate_config(None) == cfg


def test_negative_gamma_rejected():
    with pytest.raises(ConfigError, match="gamma must be ≥ 0"):
        validate_config({"gamma": -1})


@pytest.mark.parametrize("field,value", [("lambda_", -0.1), ("d", 0), ("n_extractors", 0), ("crop_size", 16),
                                         ("frame_count", 0), ("distill_loss_kind", "KL")])
def test_invalid_fields_named(field, value):
    with pytest.raises(ConfigError, match=field):
        validate_config({field: value})


def test_epoch_warmup_accepted_unchanged():
    cfg = validate_config({"epochs": 60, "warmup_epochs": 2})
    assert cfg.epochs == 60 and cfg.warmup_epochs == 2


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        validate_config({"gama": 0.1})


def test_validate_idempotent():
    cfg = validate_config(TrainConfig.desk(seed=3))
    assert validate_config(cfg) == cfg


def test_config_file_roundtrip(tmp_path):
    cfg = TrainConfig.desk(gamma=0.2, student_widths=(4, 8), sparsity_enabled=False, distill_loss_kind="JS")
    path = tmp_path / "run.ini"
    write_config(cfg, path)
    assert "[model]" in path.read_text()
    assert read_config(path) == cfg


def test_config_file_unknown_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[model]\ngamma = 0.2\nbogus = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        read_config(path)


def test_config_file_top_level_keys(tmp_path):
    path = tmp_path / "flat.ini"
    path.write_text("gamma = 0.5\nepochs = 4\nwarmup_epochs = 1\n")
    cfg = read_config(path)
    assert cfg.gamma == 0.5 and cfg.epochs == 4


@pytest.mark.parametrize("raw,rng,expected", [(3.0, (1, 5), 3.0), (0.0, (0, 100), 1.0), (50.0, (0, 100), 3.0)])
def test_normalize_mos_examples(raw, rng, expected):
    assert normalize_mos(raw, rng) == pytest.approx(expected, abs=1e-12)


def test_normalize_mos_out_of_range():
    with pytest.raises(ValueError):
        normalize_mos(101.0, (0, 100))
    with pytest.raises(ValueError):
        normalize_mos(1.0, (5, 5))


@given(st.floats(-50, 50), st.floats(0.1, 100), st.floats(0, 1), st.floats(0, 1))
def test_normalize_mos_monotone_endpoints(lo, width, a, b):
    hi = lo + width
    assert normalize_mos(lo, (lo, hi)) == 1.0
    assert normalize_mos(hi, (lo, hi)) == pytest.approx(5.0, abs=1e-12)
    ra, rb = lo + a * width, lo + b * width
    if ra < rb:
        assert normalize_mos(ra, (lo, hi)) <= normalize_mos(rb, (lo, hi))


def test_videoclip_validation():
    ok = np.zeros((2, 32, 32, 3))
    clip = VideoClip(ok)
    assert clip.shape == (2, 32, 32, 3) and clip.t == 2
    with pytest.raises(ValueError):
        clip.frames[0, 0, 0, 0] = 1.0  # read-only
    for bad in (np.zeros((0, 32, 32, 3)), np.zeros((1, 16, 32, 3)), np.zeros((1, 32, 32, 1)),
                np.full((1, 32, 32, 3), 1.5), np.zeros((32, 32, 3))):
        with pytest.raises(ValueError):
            VideoClip(bad)


def test_quality_record_checks():
    QualityRecord("a", 3.0, 3.0)
    with pytest.raises(ValueError):
        QualityRecord("a", 6.0, 6.0)
    with pytest.raises(ValueError):
        QualityRecord("a", 3.0, 3.0, raw_range=(5, 1))


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_evalresult_mean(s, p):
    r = EvalResult.from_metrics(s, p)
    assert abs(r.mean - (s + p) / 2) <= 1e-12
    with pytest.raises(ValueError):
        EvalResult(s, p, r.mean + 1e-6)
