import json

import numpy as np
import pytest

from mri2speech.corpus import (ArticulatoryClip, MaskSpec, Utterance, apply_mask, default_lip_region, load_manifest,
                               preprocess_clip, resample_indices, resize_frames)
from mri2speech.errors import EmptyTranscriptError, SchemaError


def clip(n=10, h=40, w=40, fps=25.0, value=None, rng=None):
    rng = rng or np.random.default_rng(0)
    frames = rng.random((n, h, w)).astype(np.float32) if value is None else np.full((n, h, w), value, np.float32)
    return ArticulatoryClip(frames, fps, "s")


def test_clip_validation():
    with pytest.raises(ValueError):
        ArticulatoryClip(np.zeros((3, 4, 40), np.float32), 25)
    with pytest.raises(ValueError):
        ArticulatoryClip(np.full((3, 8, 8), 1.5, np.float32), 25)
    with pytest.raises(ValueError):
        ArticulatoryClip(np.zeros((3, 8, 8), np.float32), 0)
    c = clip(n=50)
    assert c.duration == pytest.approx(2.0)


def test_utterance_checks():
    c = clip(n=25)
    u = Utterance(c, "Hello, World", np.zeros(16000), 16000, "s")
    assert u.transcript == "hello world"
    with pytest.raises(ValueError):
        Utterance(c, "x", np.zeros(4000), 16000, "s")
    with pytest.raises(EmptyTranscriptError):
        Utterance(c, "...", np.zeros(16000), 16000, "s")


def test_resize_identity_and_shape(rng):
    f = rng.random((3, 20, 30)).astype(np.float32)
    assert np.array_equal(resize_frames(f, 20, 30), f)
    out = resize_frames(f, 96, 96)
    assert out.shape == (3, 96, 96)
    assert out.min() >= f.min() - 1e-6 and out.max() <= f.max() + 1e-6


def test_resample_indices():
    assert resample_indices(10, 25, 25).tolist() == list(range(10))
    idx = resample_indices(50, 50, 25)
    assert len(idx) == 25 and idx[0] == 1 and np.all(np.diff(idx) == 2)
    assert len(resample_indices(100, 83.28, 25)) == round(100 * 25 / 83.28)


def test_preprocess_clip():
    c = preprocess_clip(clip(n=20, h=40, w=50, fps=50), 96, 25)
    assert c.frames.shape == (10, 96, 96) and c.fps == 25


def test_masks():
    c = clip(value=0.5)
    r0, r1, c0, c1 = default_lip_region(40, 40)
    full = apply_mask(c, MaskSpec("full"))
    assert np.array_equal(full.frames, c.frames)
    masked = apply_mask(c, MaskSpec("masked_lip"))
    assert np.all(masked.frames[:, r0:r1, c0:c1] == 0)
    assert masked.frames.sum() == pytest.approx(c.frames.sum() - 0.5 * c.num_frames * (r1 - r0) * (c1 - c0))
    lip = apply_mask(c, MaskSpec("lip_only"))
    assert lip.frames.shape == c.frames.shape
    with pytest.raises(ValueError):
        MaskSpec("nope")
    with pytest.raises(ValueError):
        MaskSpec("masked_lip", (30, 20, 0, 10)).region_for(40, 40)
    with pytest.raises(ValueError):
        MaskSpec("masked_lip", (0, 50, 0, 10)).region_for(40, 40)


def test_masked_lip_hides_exactly_the_rectangle(rng):
    c = clip(rng=rng)
    spec = MaskSpec("masked_lip", (5, 15, 10, 20))
    out = apply_mask(c, spec).frames
    keep = np.ones(out.shape[1:], bool)
    keep[5:15, 10:20] = False
    assert np.array_equal(out[:, keep], c.frames[:, keep])


def test_manifest_round_trip(small_corpus, tmp_path):
    m = small_corpus.manifest
    assert len(m) == 8
    loaded = load_manifest(m.root / "manifest.jsonl")
    assert [e.to_record() for e in loaded] == [e.to_record() for e in m]
    u = loaded.load_utterance(loaded.entries[0])
    assert u.sample_rate == 16000 and u.clip.height == 68


def _write(tmp_path, lines):
    p = tmp_path / "manifest.jsonl"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_manifest_schema_errors(tmp_path):
    good = {"clip_path": "a.clip", "transcript": "x", "audio_path": "a.wav", "speaker_id": "s", "split": "train"}
    with pytest.raises(SchemaError, match=r"manifest.jsonl:1:"):
        load_manifest(_write(tmp_path, [json.dumps({k: v for k, v in good.items() if k != "split"})]),
                      check_paths=False)
    with pytest.raises(SchemaError, match=r"manifest.jsonl:2:"):
        load_manifest(_write(tmp_path, [json.dumps(good), json.dumps({**good, "split": "dev"})]), check_paths=False)
    with pytest.raises(SchemaError):
        load_manifest(_write(tmp_path, ["{not json"]), check_paths=False)
    with pytest.raises(SchemaError, match="empty"):
        load_manifest(_write(tmp_path, [""]), check_paths=False)
    with pytest.raises(FileNotFoundError, match="a.clip"):
        load_manifest(_write(tmp_path, [json.dumps(good)]))
    (tmp_path / "speakers.json").write_text(json.dumps(["other"]))
    with pytest.raises(SchemaError, match="speakers"):
        load_manifest(_write(tmp_path, [json.dumps(good)]), check_paths=False)
    (tmp_path / "speakers.json").write_text(json.dumps({"speakers": ["other"]}))
    with pytest.raises(SchemaError, match="speaker table"):
        load_manifest(_write(tmp_path, [json.dumps(good)]), check_paths=False)
