"""Inference chain: silent clip -> text -> source-speaker durations -> speech.

Duration transplantation: the multi-speaker model's frozen duration predictor
supplies per-phoneme frame counts for the *source* speaker; the *target* model
expands its own prior latents by those counts, inverts its flow and decodes.
The output therefore keeps the source timing in the target voice, and its
length is always ``hop * sum(durations)`` samples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ArticulatoryClip
from .errors import CompatibilityError, EmptyTranscriptionError
from .media import write_wav
from .recognizer import Recognizer
from .text import PhonemeSequence
from .tts import TTS


@dataclass
class SynthesisResult:
    text: str
    phonemes: PhonemeSequence
    durations: np.ndarray
    waveform: np.ndarray
    sample_rate: int

    @property
    def num_samples(self) -> int:
        return int(self.waveform.size)

    def save(self, out_dir: str | Path) -> Path:
        """Write ``out.wav``, ``transcript.txt`` and ``durations.csv`` (phoneme, frames)."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_wav(out_dir / "out.wav", self.waveform, self.sample_rate)
        (out_dir / "transcript.txt").write_text(self.text + "\n", encoding="utf-8")
        with open(out_dir / "durations.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["phoneme", "frames"])
            for p, d in zip(self.phonemes.tokens, self.durations):
                w.writerow([p, int(d)])
        return out_dir


def _load(model) -> TTS:
    return model if isinstance(model, TTS) else TTS.load(model)


def check_compatible(source: TTS, target: TTS) -> None:
    if source.config.alphabet != target.config.alphabet:
        raise CompatibilityError(
            f"phoneme alphabets differ: {list(source.config.alphabet)} vs {list(target.config.alphabet)}")
    if source.hop != target.hop:
        raise CompatibilityError(f"hop lengths differ: {source.hop} vs {target.hop}")


def extract_source_durations(text: str | PhonemeSequence, source_speaker: str, multi_speaker,
                             temperature: float = 0.0, seed: int | None = None) -> np.ndarray:
    """Per-phoneme frame counts predicted by the multi-speaker duration model for ``source_speaker``."""
    model = _load(multi_speaker)
    model.speaker_index(source_speaker)
    phon = text if isinstance(text, PhonemeSequence) else model.phonemize(text)
    return model.predict_durations(phon, source_speaker, temperature, seed)


def synthesize_same_speaker(text: str, speaker: str, model, temperature: float = 0.0,
                            seed: int | None = None) -> SynthesisResult:
    model = _load(model)
    phon = model.phonemize(text)
    wav, dur = model.synthesize(phon, speaker, temperature=temperature, seed=seed)
    return SynthesisResult(" ".join(phon.words), phon, dur, wav, model.config.sample_rate)


def default_target_speaker(target: TTS, target_speaker: str | None) -> str:
    if target_speaker is not None:
        target.speaker_index(target_speaker)
        return target_speaker
    return target.config.speakers[0]


def transplant_synthesize(text: str, source_speaker: str, multi_speaker, target,
                          target_speaker: str | None = None, temperature: float = 0.0,
                          seed: int | None = None, durations: Sequence[int] | None = None) -> SynthesisResult:
    """Speak ``text`` in the target voice with the source speaker's predicted timing.

    ``durations`` overrides the source profile (used by control experiments).
    """
    source = _load(multi_speaker)
    target = _load(target)
    check_compatible(source, target)
    phon = source.phonemize(text)
    if durations is None:
        durations = extract_source_durations(phon, source_speaker, source, temperature, seed)
    durations = np.asarray(durations, dtype=np.int64)
    if durations.size != len(phon.tokens):
        raise ValueError(f"{durations.size} durations for {len(phon.tokens)} phonemes")
    spk = default_target_speaker(target, target_speaker)
    wav, _ = target.synthesize(phon, spk, durations=durations, temperature=temperature, seed=seed)
    return SynthesisResult(" ".join(phon.words), phon, durations, wav, target.config.sample_rate)


def end_to_end_mri2speech(clip: ArticulatoryClip, recognizer, multi_speaker, target, source_speaker: str,
                          target_speaker: str | None = None, decoder: str = "greedy",
                          temperature: float = 0.0, seed: int | None = None) -> SynthesisResult:
    """transcribe -> extract source durations -> transplant synthesis."""
    rec = recognizer if isinstance(recognizer, Recognizer) else Recognizer.load(recognizer)
    text = rec.transcribe(clip, decoder)
    if not text.strip():
        raise EmptyTranscriptionError("recognizer produced an empty transcript")
    return transplant_synthesize(text, source_speaker, multi_speaker, target, target_speaker,
                                 temperature, seed)
