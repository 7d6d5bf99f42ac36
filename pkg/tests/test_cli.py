import json
from pathlib import Path

import pytest

from mri2speech.cli import main
from mri2speech.recognizer import RecognizerConfig, train_recognizer

GEN = ["gen-data", "--seed", "4", "--speakers", "2", "--utterances", "3", "--set", "corpus.max_tokens=5"]


def run_dirs(root: Path, command: str):
    return sorted(p for p in root.iterdir() if p.name.split("-", 1)[1].startswith(command))


def test_gen_data_is_deterministic(tmp_path, capsys):
    root = tmp_path / "runs"
    assert main(GEN + ["--output-root", str(root)]) == 0
    assert main(GEN + ["--output-root", str(root)]) == 0
    a, b = run_dirs(root, "gen-data")
    assert a != b  # append-only: a fresh directory per invocation
    for d in (a, b):
        assert {"config.ini", "run.log", "metrics.json", "corpus"} <= {p.name for p in d.iterdir()}
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    assert (a / "corpus/manifest.jsonl").read_bytes() == (b / "corpus/manifest.jsonl").read_bytes()
    metrics = json.loads((a / "metrics.json").read_text())
    assert metrics["utterances"] == 6 and metrics["speakers"] == ["spk0", "spk1"]
    assert "max_tokens = 5" in (a / "config.ini").read_text()
    assert str(a / "corpus" / "manifest.jsonl") in capsys.readouterr().out


def test_transcribe_and_eval(small_corpus, tmp_path, capsys):
    cfg = RecognizerConfig(frontend_channels=(2, 4, 4), layers=1, width=16, heads=2, audio_feature_dim=8,
                           total_steps=1, batch_size=4)
    ckpt = train_recognizer(small_corpus.manifest, cfg, out_dir=tmp_path / "rec").checkpoint_path
    entry = small_corpus.manifest.split("test")[0]
    clip = small_corpus.manifest.resolve(entry.clip_path)
    root = tmp_path / "runs"
    assert main(["transcribe", "--clip", str(clip), "--ckpt", str(ckpt), "--output-root", str(root)]) == 0
    (d,) = run_dirs(root, "transcribe")
    assert (d / "transcript.txt").read_text().strip() == capsys.readouterr().out.strip()
    manifest = small_corpus.manifest.root / "manifest.jsonl"
    assert main(["eval", "--manifest", str(manifest), "--ckpt", str(ckpt), "--output-root", str(root)]) == 0
    assert main(["eval", "--manifest", str(manifest), "--ckpt", str(ckpt), "--output-root", str(root)]) == 0
    e1, e2 = run_dirs(root, "eval")
    assert (e1 / "metrics.json").read_bytes() == (e2 / "metrics.json").read_bytes()
    assert (e1 / "eval.json").is_file()


def test_runtime_failure_exits_1(tmp_path, capsys):
    code = main(["transcribe", "--clip", str(tmp_path / "x.clip"), "--ckpt", str(tmp_path / "missing.ckpt"),
                 "--output-root", str(tmp_path / "runs")])
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("mri2speech: error:") and "\n" not in err


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["transcribe", "--clip", "x"],
    ["gen-data", "--set", "corpus.bogus=1"],
    ["gen-data", "--set", "recognizer.lr_peak=abc"],
])
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--output-root", str(tmp_path)] if argv[:1] == ["gen-data"] else argv) == 2
    assert not any(tmp_path.iterdir())


def test_report(tmp_path):
    import numpy as np

    from mri2speech.media import write_wav

    paths = []
    for i, f in enumerate((220, 440)):
        p = tmp_path / f"w{i}.wav"
        write_wav(p, 0.3 * np.sin(2 * np.pi * f * np.arange(8000) / 16000), 16000)
        paths.append(str(p))
    root = tmp_path / "runs"
    assert main(["report", "--wav", paths[0], "--wav", paths[1], "--output-root", str(root)]) == 0
    (d,) = run_dirs(root, "report")
    assert (d / "spectrograms.png").stat().st_size > 0
