import pytest

from mri2speech.config import OUTPUT_ROOT_ENV, derive_seed, resolve_config
from mri2speech.errors import SchemaError


def test_defaults_and_derived_seeds():
    cfg = resolve_config()
    assert cfg.run.seed == 0
    seeds = {cfg.corpus.seed, cfg.recognizer.seed, cfg.tts.seed, cfg.synthesis.seed}
    assert len(seeds) == 4
    assert cfg.tts.seed == derive_seed(0, "tts")
    assert resolve_config(overrides=["run.seed=5"]).tts.seed == derive_seed(5, "tts") != cfg.tts.seed


def test_file_then_overrides(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[recognizer]\nlayers = 2\nlr_peak = 0.002\n[tts]\nseed = 11\n[eval]\nablation_modes = full,lip_only\n")
    cfg = resolve_config(ini, ["recognizer.layers=3", "recognizer.frontend_channels=4,8"])
    assert cfg.recognizer.layers == 3
    assert cfg.recognizer.lr_peak == 0.002
    assert cfg.recognizer.frontend_channels == (4, 8)
    assert cfg.tts.seed == 11
    assert cfg.eval.ablation_modes == ("full", "lip_only")


def test_ini_round_trip(tmp_path):
    cfg = resolve_config(overrides=["recognizer.layers=3", "tts.hidden=48", "eval.decoder=beam"])
    path = tmp_path / "resolved.ini"
    path.write_text(cfg.to_ini())
    assert resolve_config(path).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("override, message", [
    ("recognizer.lr_peak=abc", "recognizer.lr_peak: expected float, got 'abc'"),
    ("recognizer.nonsense=1", "unknown config key 'recognizer.nonsense'"),
    ("bogus.key=1", "unknown config key 'bogus.key'"),
    ("novalue", "section.key=value"),
    ("eval.decoder=viterbi", "decoder"),
    ("recognizer.warmup_fraction=1.5", "warmup_fraction"),
])
def test_bad_values(override, message):
    with pytest.raises(SchemaError, match=message.replace(".", r"\.").replace("(", r"\(")):
        resolve_config(overrides=[override])


def test_bad_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        resolve_config(tmp_path / "missing.ini")
    bad = tmp_path / "bad.ini"
    bad.write_text("[unknown]\nx = 1\n")
    with pytest.raises(SchemaError, match="unknown config section"):
        resolve_config(bad)


def test_output_root(monkeypatch, tmp_path):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert str(resolve_config().output_root) == "runs"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert resolve_config().output_root == tmp_path
    assert str(resolve_config(overrides=["run.output_root=elsewhere"]).output_root) == "elsewhere"
