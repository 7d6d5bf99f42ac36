import filecmp
import json

import numpy as np
import pytest

from mri2speech.corpus import load_manifest
from mri2speech.synthetic import DEFAULT_INVENTORY, SyntheticConfig, generate_synthetic_corpus
from mri2speech.text import phonemize


def test_determinism(tmp_path):
    a = generate_synthetic_corpus(tmp_path / "a", seed=7, num_speakers=2, utterances_per_speaker=3)
    b = generate_synthetic_corpus(tmp_path / "b", seed=7, num_speakers=2, utterances_per_speaker=3)
    names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert names
    for n in names:
        assert filecmp.cmp(tmp_path / "a" / n, tmp_path / "b" / n, shallow=False), n
    c = generate_synthetic_corpus(tmp_path / "c", seed=8, num_speakers=2, utterances_per_speaker=3)
    assert [e.transcript for e in c.manifest] != [e.transcript for e in a.manifest]


def test_corpus_contents(small_corpus):
    m = load_manifest(small_corpus.manifest.root / "manifest.jsonl")
    assert m.speakers == ("spk0", "spk1")
    assert {e.split for e in m} <= {"train", "test"}
    for entry in m:
        utt = m.load_utterance(entry)
        ph = phonemize(utt.transcript, small_corpus.lexicon)
        assert len(ph.phonemes) <= 6
        # every phoneme holds `span` video frames and a whole number of hops of audio
        assert utt.clip.num_frames == 6 * len(ph.phonemes)
        assert utt.waveform.size % 256 == 0
        assert np.abs(utt.waveform).max() <= 1.0


def test_durations_file_matches_audio(small_corpus):
    root = small_corpus.manifest.root
    rows = [json.loads(l) for l in (root / "durations.jsonl").read_text().splitlines()]
    by_id = {e.utt_id: e for e in small_corpus.manifest}
    for r in rows:
        utt = small_corpus.manifest.load_utterance(by_id[r["utt_id"]])
        assert (sum(r["frames"]) + sum(r["gaps"])) * 256 == utt.waveform.size
        assert all(f >= 2 for f in r["frames"])
        # pauses sit only at word ends, never after the final phoneme
        n_words = len(utt.transcript.split())
        assert sum(g > 0 for g in r["gaps"]) == n_words - 1 and r["gaps"][-1] == 0


def test_word_gap_is_near_silent(tmp_path):
    c = generate_synthetic_corpus(tmp_path, seed=5, num_speakers=1, utterances_per_speaker=4, min_tokens=6,
                                  word_gap=3)
    row = json.loads((tmp_path / "durations.jsonl").read_text().splitlines()[0])
    entry = next(e for e in c.manifest if e.utt_id == row["utt_id"])
    wav = c.manifest.load_utterance(entry).waveform
    i = next(k for k, g in enumerate(row["gaps"]) if g)
    start = (sum(row["frames"][: i + 1]) + sum(row["gaps"][:i])) * 256
    pause = wav[start: start + 3 * 256]
    speech = wav[: row["frames"][0] * 256]
    assert np.sqrt(np.mean(pause ** 2)) < 0.05 * np.sqrt(np.mean(speech ** 2))
    with pytest.raises(ValueError):
        generate_synthetic_corpus(tmp_path / "bad", word_gap=-1)


def test_tongue_separates_phonemes_sharing_a_viseme(small_corpus):
    """Phonemes with the same lip shape differ only inside the tract (tongue blob)."""
    from mri2speech.synthetic import phoneme_styles
    styles = phoneme_styles(DEFAULT_INVENTORY, np.random.default_rng(0), 0.05)
    by_viseme = {}
    for p, s in styles.items():
        by_viseme.setdefault(s.viseme, []).append(s)
    for group in by_viseme.values():
        lips = {(s.aperture, s.protrusion) for s in group}
        tongues = {(s.tongue_row, s.tongue_col) for s in group}
        assert len(lips) == 1 and len(tongues) == len(group)


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(inventory=("A", "B"))
    with pytest.raises(ValueError):
        SyntheticConfig(min_tokens=5, max_tokens=4)
