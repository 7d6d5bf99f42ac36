"""Deterministic synthetic articulatory corpus.

Each phoneme is drawn as a static articulator configuration held for a fixed
number of video frames:

* lips (inside the default lip rectangle) encode only the phoneme's viseme
  class, so several phonemes look identical from the lips alone;
* the tongue blob (upper-back area, outside the lip rectangle) sits at a
  position unique to each phoneme.

Audio is a harmonic tone (voiced) or band-limited noise (unvoiced) shaped by
per-phoneme formants at a per-speaker pitch and speaking rate.  Audio frame
counts are whole multiples of ``hop`` so ground-truth mel durations are exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Manifest, ManifestEntry
from .media import write_clip, write_wav
from .text import Lexicon

DEFAULT_INVENTORY = ("B", "P", "M", "D", "T", "N", "G", "K", "AA", "IY", "UW", "EH")
_DEFAULT_VISEMES = {"B": 0, "P": 0, "M": 0, "D": 1, "T": 1, "N": 1, "G": 2, "K": 2,
                    "AA": 3, "EH": 3, "IY": 4, "UW": 5}
_UNVOICED = {"P", "T", "K", "S", "F", "SH", "TH", "HH", "CH"}


@dataclass
class SyntheticConfig:
    seed: int = 0
    num_speakers: int = 3
    utterances_per_speaker: int = 10
    inventory: tuple[str, ...] = DEFAULT_INVENTORY
    span: int = 6
    frame_size: int = 68
    fps: float = 25.0
    sample_rate: int = 16000
    hop: int = 256
    min_tokens: int = 3
    max_tokens: int = 12
    num_words: int = 16
    test_fraction: float = 0.1
    noise_std: float = 0.02
    rate_jitter: float = 0.1
    duration_jitter: float = 0.05
    word_gap: int = 4  # hops of near-silence between words in the audio (one analysis window)

    def __post_init__(self):
        self.inventory = tuple(self.inventory)
        if len(self.inventory) < 4:
            raise ValueError(f"phoneme inventory needs at least 4 entries, got {len(self.inventory)}")
        if len(set(self.inventory)) != len(self.inventory):
            raise ValueError("phoneme inventory has duplicates")
        if not 3 <= self.min_tokens <= self.max_tokens <= 12:
            raise ValueError("utterance length must satisfy 3 <= min_tokens <= max_tokens <= 12")
        if self.word_gap < 0:
            raise ValueError(f"word_gap must be >= 0, got {self.word_gap}")
        if self.num_speakers < 1 or self.utterances_per_speaker < 1:
            raise ValueError("need at least one speaker and one utterance per speaker")
        if self.span < 1:
            raise ValueError("span must be >= 1")


@dataclass(frozen=True)
class PhonemeStyle:
    viseme: int
    aperture: float      # lip opening, fraction of frame height
    protrusion: float    # horizontal lip shift, fraction of frame width
    tongue_row: float    # blob center, fractions of frame size
    tongue_col: float
    f1: float
    f2: float
    voiced: bool
    duration_factor: float


@dataclass(frozen=True)
class SpeakerStyle:
    speaker_id: str
    f0: float
    rate: float
    gain: float
    background: float
    shift_row: int
    shift_col: int
    tract_radius: float


@dataclass
class SyntheticCorpus:
    manifest: Manifest
    lexicon: Lexicon
    config: SyntheticConfig
    phonemes: dict[str, PhonemeStyle]
    speakers: dict[str, SpeakerStyle]
    durations: dict[str, list[int]] = field(default_factory=dict)  # audio frames (hops) per phoneme
    phoneme_seqs: dict[str, list[str]] = field(default_factory=dict)


def _viseme_table(inventory: Sequence[str]) -> dict[str, int]:
    if set(inventory) <= set(_DEFAULT_VISEMES):
        return {p: _DEFAULT_VISEMES[p] for p in inventory}
    return {p: i // 3 for i, p in enumerate(inventory)}


def phoneme_styles(inventory: Sequence[str], rng: np.random.Generator, duration_jitter: float) -> dict[str, PhonemeStyle]:
    visemes = _viseme_table(inventory)
    n_vis = max(visemes.values()) + 1
    n = len(inventory)
    grid_rows = math.ceil(math.sqrt(n))
    grid_cols = math.ceil(n / grid_rows)
    # formants sit on their own (f1, f2) grid, visited in a scrambled order so
    # acoustic neighbours are not tongue-grid neighbours
    f1_steps = max(1, math.floor(math.sqrt(n)))
    f2_steps = math.ceil(n / f1_steps)
    styles = {}
    for i, p in enumerate(inventory):
        v = visemes[p]
        gr, gc = divmod(i, grid_cols)
        fr, fc = divmod((i * 7) % n if math.gcd(7, n) == 1 else i, f1_steps)
        styles[p] = PhonemeStyle(
            viseme=v,
            aperture=0.02 + 0.14 * v / max(n_vis - 1, 1),
            protrusion=0.05 * math.cos(math.pi * v / max(n_vis - 1, 1)),
            tongue_row=0.18 + 0.28 * (gr + 0.5) / grid_rows,
            tongue_col=0.54 + 0.38 * (gc + 0.5) / grid_cols,
            f1=300.0 + 600.0 * (fc + 0.5) / f1_steps,
            f2=900.0 + 2000.0 * (fr + 0.5) / f2_steps,
            voiced=p not in _UNVOICED,
            duration_factor=float(1.0 + rng.uniform(-duration_jitter, duration_jitter)),
        )
    return styles


def speaker_styles(num_speakers: int, rng: np.random.Generator, rate_jitter: float, frame_size: int) -> dict[str, SpeakerStyle]:
    px = max(1, round(frame_size / 68))
    out = {}
    for i in range(num_speakers):
        spk = f"spk{i}"
        out[spk] = SpeakerStyle(
            speaker_id=spk,
            f0=float(100.0 + 120.0 * i / max(num_speakers - 1, 1) + rng.uniform(-5, 5)),
            rate=float(1.0 + rng.uniform(-rate_jitter, rate_jitter)),
            gain=float(rng.uniform(0.8, 1.0)),
            background=float(rng.uniform(0.05, 0.12)),
            shift_row=int(rng.integers(-1, 2)) * px,
            shift_col=int(rng.integers(-1, 2)) * px,
            tract_radius=float(rng.uniform(0.40, 0.46)),
        )
    return out


def build_lexicon(inventory: Sequence[str], num_words: int, rng: np.random.Generator) -> Lexicon:
    """Random prefix-free lexicon of 2-3 phoneme words with no doubled phonemes."""
    vowels = [p for p in inventory if p[0] in "AEIOU"]
    consonants = [p for p in inventory if p[0] not in "AEIOU"]
    shapes = ("CV", "CVC", "VC") if vowels and consonants else ("XX", "XXX")
    pools = {"C": consonants, "V": vowels, "X": list(inventory)}
    prons: list[tuple[str, ...]] = []
    spellings: set[str] = set()
    attempts = 0
    while len(prons) < num_words and attempts < 20000:
        attempts += 1
        shape = shapes[int(rng.integers(len(shapes)))]
        pron = []
        for slot in shape:
            pool = [p for p in pools[slot] if not pron or p != pron[-1]]
            pron.append(pool[int(rng.integers(len(pool)))])
        pron = tuple(pron)
        spelled = "".join(p.lower() for p in pron)
        if spelled in spellings:
            continue
        if any(pron[:len(q)] == q or q[:len(pron)] == pron for q in prons):
            continue
        prons.append(pron)
        spellings.add(spelled)
    if len(prons) < 2:
        raise ValueError("could not build a lexicon from this inventory")
    return Lexicon({"".join(p.lower() for p in pron): pron for pron in prons}, source="synthetic")


def sample_sentence(lexicon: Lexicon, rng: np.random.Generator, min_tokens: int, max_tokens: int) -> list[str]:
    words = sorted(lexicon)
    for _ in range(1000):
        target = int(rng.integers(min_tokens, max_tokens + 1))
        out: list[str] = []
        n = 0
        for _ in range(50):
            w = words[int(rng.integers(len(words)))]
            pron = lexicon[w]
            if n + len(pron) > target:
                continue
            if out and lexicon[out[-1]][-1] == pron[0]:
                continue
            out.append(w)
            n += len(pron)
            if n == target:
                break
        if min_tokens <= n <= max_tokens and out:
            return out
    raise RuntimeError("could not sample a sentence of the requested length")


def _blob(rr, cc, r0, c0, sr, sc):
    return np.exp(-0.5 * (((rr - r0) / sr) ** 2 + ((cc - c0) / sc) ** 2))


def render_phoneme_frame(style: PhonemeStyle, spk: SpeakerStyle, size: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    rr = rr - spk.shift_row
    cc = cc - spk.shift_col
    H = W = float(size)
    # static vocal-tract outline
    dist = np.sqrt(((rr - 0.5 * H) / H) ** 2 + ((cc - 0.5 * W) / W) ** 2)
    img = spk.background * np.exp(-0.5 * ((dist - spk.tract_radius) / 0.02) ** 2)
    # lips
    lip_r, lip_c = 0.75 * H, (0.27 + style.protrusion) * W
    half_gap = 0.5 * style.aperture * H
    lh, lw = 0.035 * H, 0.10 * W
    img = img + _blob(rr, cc, lip_r - half_gap - lh, lip_c, lh, lw)
    img = img + _blob(rr, cc, lip_r + half_gap + lh, lip_c, lh, lw)
    # tongue
    img = img + _blob(rr, cc, style.tongue_row * H, style.tongue_col * W, 0.03 * H, 0.05 * W)
    return np.clip(spk.gain * img, 0.0, 1.0)


def render_clip(phonemes: Sequence[str], styles, spk: SpeakerStyle, cfg: SyntheticConfig,
                rng: np.random.Generator) -> np.ndarray:
    cache: dict[str, np.ndarray] = {}
    frames = []
    for p in phonemes:
        if p not in cache:
            cache[p] = render_phoneme_frame(styles[p], spk, cfg.frame_size)
        frames.extend([cache[p]] * cfg.span)
    frames = np.stack(frames)
    frames = frames + rng.normal(0.0, cfg.noise_std, frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def phoneme_hops(style: PhonemeStyle, spk: SpeakerStyle, cfg: SyntheticConfig) -> int:
    base = cfg.span * cfg.sample_rate / cfg.fps / cfg.hop
    return max(2, int(round(base * spk.rate * style.duration_factor)))


def render_audio(phonemes: Sequence[str], styles, spk: SpeakerStyle, cfg: SyntheticConfig,
                 rng: np.random.Generator, gaps: Sequence[int] | None = None) -> tuple[np.ndarray, list[int]]:
    """Waveform plus hops per phoneme.  ``gaps[i]`` hops of near-silence follow phoneme ``i``."""
    sr = cfg.sample_rate
    hops = [phoneme_hops(styles[p], spk, cfg) for p in phonemes]
    gaps = list(gaps) if gaps is not None else [0] * len(phonemes)
    if len(gaps) != len(phonemes):
        raise ValueError(f"{len(gaps)} gaps for {len(phonemes)} phonemes")
    total = (sum(hops) + sum(gaps)) * cfg.hop
    t = np.arange(total) / sr
    out = np.zeros(total)
    ramp = max(1, int(0.004 * sr))
    start = 0
    for p, n_hop, gap in zip(phonemes, hops, gaps):
        st = styles[p]
        n = n_hop * cfg.hop
        seg_t = t[start:start + n]
        if st.voiced:
            harmonics = np.arange(1, int(0.45 * sr / spk.f0) + 1) * spk.f0
            amps = (np.exp(-0.5 * ((harmonics - st.f1) / 120.0) ** 2)
                    + 0.6 * np.exp(-0.5 * ((harmonics - st.f2) / 180.0) ** 2) + 0.02)
            seg = (amps[:, None] * np.sin(2 * np.pi * harmonics[:, None] * seg_t[None, :])).sum(axis=0)
            seg /= amps.sum()
        else:
            noise = rng.normal(0.0, 1.0, n)
            spec = np.fft.rfft(noise)
            freqs = np.fft.rfftfreq(n, 1.0 / sr)
            # frication band above the vowel formants, placed by (f1, f2) so
            # each unvoiced phoneme gets its own band
            centre = 2400.0 + (st.f1 - 300.0) + 1.2 * (st.f2 - 900.0)
            spec *= np.exp(-0.5 * ((freqs - centre) / 250.0) ** 2)
            seg = np.fft.irfft(spec, n)
            seg /= np.abs(seg).max() + 1e-9
            seg *= 0.5
        env = np.ones(n)
        env[:ramp] = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        env[-ramp:] = env[:ramp][::-1]
        out[start:start + n] = seg * env
        start += n + gap * cfg.hop
    out += rng.normal(0.0, 0.003, total)
    out *= 0.6 / (np.abs(out).max() + 1e-9)
    return out, hops


def generate_synthetic_corpus(out_dir: str | Path, seed: int = 0, num_speakers: int = 3,
                              utterances_per_speaker: int = 10,
                              phoneme_inventory: Sequence[str] = DEFAULT_INVENTORY,
                              **overrides) -> SyntheticCorpus:
    """Materialize a corpus under ``out_dir`` and return its manifest and metadata.

    Files written: ``manifest.jsonl``, ``speakers.json``, ``lexicon.txt``,
    ``corpus.json`` (generation settings), ``durations.jsonl`` (per-phoneme
    audio frame counts and the inter-word pause after each phoneme), ``clips/*.clip`` and ``audio/*.wav``.
    """
    cfg = SyntheticConfig(seed=seed, num_speakers=num_speakers, utterances_per_speaker=utterances_per_speaker,
                          inventory=tuple(phoneme_inventory), **overrides)
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)

    root_rng = np.random.default_rng(seed)
    lex_rng, style_rng, spk_rng, sent_rng, split_rng, media_seed = (
        np.random.default_rng(s) for s in root_rng.integers(0, 2**32, size=6))
    lexicon = build_lexicon(cfg.inventory, cfg.num_words, lex_rng)
    styles = phoneme_styles(cfg.inventory, style_rng, cfg.duration_jitter)
    speakers = speaker_styles(cfg.num_speakers, spk_rng, cfg.rate_jitter, cfg.frame_size)

    entries: list[ManifestEntry] = []
    durations: dict[str, list[int]] = {}
    word_gaps: dict[str, list[int]] = {}
    seqs: dict[str, list[str]] = {}
    for spk_id, spk in speakers.items():
        n = cfg.utterances_per_speaker
        n_test = int(round(cfg.test_fraction * n)) if n > 1 else 0
        if cfg.test_fraction > 0 and n > 1:
            n_test = max(1, n_test)
        test_idx = set(split_rng.permutation(n)[:n_test].tolist())
        for k in range(n):
            utt_id = f"{spk_id}_{k:03d}"
            words = sample_sentence(lexicon, sent_rng, cfg.min_tokens, cfg.max_tokens)
            phonemes = [p for w in words for p in lexicon[w]]
            # a short pause after the last phoneme of every word but the final one
            gaps = [0 if (i < len(lexicon[w]) - 1 or j == len(words) - 1) else cfg.word_gap
                    for j, w in enumerate(words) for i in range(len(lexicon[w]))]
            media_rng = np.random.default_rng([int(media_seed.integers(2**32)), k])
            frames = render_clip(phonemes, styles, spk, cfg, media_rng)
            wav, hops = render_audio(phonemes, styles, spk, cfg, media_rng, gaps)
            clip_rel = f"clips/{utt_id}.clip"
            wav_rel = f"audio/{utt_id}.wav"
            write_clip(out_dir / clip_rel, frames, cfg.fps)
            write_wav(out_dir / wav_rel, wav, cfg.sample_rate)
            entries.append(ManifestEntry(clip_rel, " ".join(words), wav_rel, spk_id,
                                         "test" if k in test_idx else "train"))
            durations[utt_id] = hops
            word_gaps[utt_id] = gaps
            seqs[utt_id] = phonemes

    manifest = Manifest(entries, out_dir, tuple(speakers))
    manifest.save(out_dir / "manifest.jsonl")
    lexicon.save(out_dir / "lexicon.txt")
    meta = {"config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
            "phonemes": {p: asdict(s) for p, s in styles.items()},
            "speakers": {s: asdict(v) for s, v in speakers.items()}}
    (out_dir / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out_dir / "durations.jsonl", "w", encoding="utf-8") as fh:
        for utt_id in durations:
            fh.write(json.dumps({"utt_id": utt_id, "phonemes": seqs[utt_id], "frames": durations[utt_id],
                                 "gaps": word_gaps[utt_id]}) + "\n")
    return SyntheticCorpus(manifest, lexicon, cfg, styles, speakers, durations, seqs)
