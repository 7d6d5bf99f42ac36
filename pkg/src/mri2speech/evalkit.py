"""Corpus-level evaluation, the articulator-masking ablation, intelligibility
scoring of synthesized audio, and spectrogram figures.

Every report pools errors over the corpus: CER = sum of character edit
distances / sum of reference characters (likewise WER over words).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .align.metrics import char_errors, word_errors
from .audio import mel_spectrogram
from .corpus import Manifest, MaskSpec
from .recognizer import Recognizer, RecognizerConfig, train_recognizer
from .text import normalize_text

log = logging.getLogger(__name__)

# Published numbers shown beside our own for context (they come from real rtMRI
# corpora and a pretrained model; they are not targets for the synthetic runs).
REFERENCE_RECOGNITION = ({"setting": "USC-TIMIT", "cer": 10.95, "wer": 14.38},)
REFERENCE_ABLATION = (
    {"setting": "Lip only", "cer": 19.48, "wer": 25.50},
    {"setting": "Masked Lip", "cer": 14.38, "wer": 19.04},
    {"setting": "Full rtMRI", "cer": 10.95, "wer": 14.38},
)
REFERENCE_SYNTHESIS = ({"setting": "M4 (LJSpeech voice)", "cer": 9.27, "wer": 15.18},)

ABLATION_MODES = ("full", "masked_lip", "lip_only")
ABLATION_LABELS = {"full": "Full rtMRI", "masked_lip": "Masked Lip", "lip_only": "Lip only"}


@dataclass
class UtteranceScore:
    utt_id: str
    ref: str
    hyp: str
    char_dist: int
    char_len: int
    word_dist: int
    word_len: int

    @property
    def cer(self) -> float:
        return self.char_dist / self.char_len

    @property
    def wer(self) -> float:
        return self.word_dist / self.word_len

    @classmethod
    def score(cls, utt_id: str, ref: str, hyp: str) -> "UtteranceScore":
        cd, cn = char_errors(ref, hyp)
        wd, wn = word_errors(ref, hyp)
        if cn == 0 or wn == 0:
            raise ValueError(f"{utt_id}: empty reference")
        return cls(utt_id, ref, hyp, cd, cn, wd, wn)


@dataclass
class EvalReport:
    title: str
    rows: list[UtteranceScore]
    fingerprints: dict[str, str] = field(default_factory=dict)
    references: tuple[dict, ...] = ()

    @property
    def cer(self) -> float:
        return sum(r.char_dist for r in self.rows) / sum(r.char_len for r in self.rows)

    @property
    def wer(self) -> float:
        return sum(r.word_dist for r in self.rows) / sum(r.word_len for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "cer": self.cer,
            "wer": self.wer,
            "num_utterances": len(self.rows),
            "fingerprints": dict(sorted(self.fingerprints.items())),
            "references": list(self.references),
            "utterances": [
                {"utt_id": r.utt_id, "ref": r.ref, "hyp": r.hyp, "cer": r.cer, "wer": r.wer}
                for r in self.rows
            ],
        }

    def summary(self) -> str:
        lines = [self.title, f"  ours: CER {100 * self.cer:.2f} / WER {100 * self.wer:.2f}  ({len(self.rows)} utterances)"]
        for ref in self.references:
            lines.append(f"  paper reference: {ref['setting']} CER {ref['cer']:.2f} / WER {ref['wer']:.2f}")
        for name, fp in sorted(self.fingerprints.items()):
            lines.append(f"  checkpoint {name}: {fp}")
        return "\n".join(lines)

    def save(self, out_dir: str | Path, stem: str = "eval") -> dict[str, Path]:
        """Write ``<stem>.csv`` (per utterance), ``<stem>.json`` and ``<stem>.txt``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out_dir / f"{stem}.csv", "json": out_dir / f"{stem}.json", "txt": out_dir / f"{stem}.txt"}
        with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["utt_id", "ref", "hyp", "cer", "wer"])
            for r in self.rows:
                w.writerow([r.utt_id, r.ref, r.hyp, f"{r.cer:.6f}", f"{r.wer:.6f}"])
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths["txt"].write_text(self.summary() + "\n", encoding="utf-8")
        return paths


def score_pairs(pairs: Sequence[tuple[str, str, str]], title: str, fingerprints: dict | None = None,
                references: Sequence[dict] = ()) -> EvalReport:
    """``pairs`` = (utt_id, reference, hypothesis) triples."""
    if not pairs:
        raise ValueError("nothing to evaluate")
    rows = [UtteranceScore.score(u, normalize_text(ref), hyp) for u, ref, hyp in pairs]
    return EvalReport(title, rows, dict(fingerprints or {}), tuple(references))


def _as_recognizer(model) -> Recognizer:
    return model if isinstance(model, Recognizer) else Recognizer.load(model)


def evaluate_recognizer(manifest: Manifest, model, decoder: str = "greedy", split: str = "test",
                        speakers: Sequence[str] | None = None) -> EvalReport:
    model = _as_recognizer(model)
    entries = [e for e in manifest.split(split) if speakers is None or e.speaker_id in speakers]
    if not entries:
        raise ValueError(f"manifest has no {split!r} utterances")
    pairs = []
    for e in entries:
        if model.config.input_kind == "video":
            hyp = model.transcribe(manifest.load_clip(e), decoder)
        else:
            utt = manifest.load_utterance(e)
            hyp = model.transcribe_audio(utt.waveform, utt.sample_rate, decoder)
        pairs.append((e.utt_id, e.transcript, hyp))
    fp = {"recognizer": model.to_checkpoint().fingerprint}
    return score_pairs(pairs, f"Recognition ({split} split, {decoder} decoding)", fp, REFERENCE_RECOGNITION)


def ablation_run(manifest: Manifest, config: RecognizerConfig, modes: Sequence[str] = ABLATION_MODES,
                 out_dir: str | Path | None = None, decoder: str = "greedy",
                 split: str = "test") -> dict[str, EvalReport]:
    """Train one recognizer per masking mode (same seed and config) and evaluate each."""
    reports = {}
    for mode in modes:
        sub = Path(out_dir) / mode if out_dir is not None else None
        result = train_recognizer(manifest, RecognizerConfig(**config.to_dict()), mask=MaskSpec(mode), out_dir=sub)
        rep = evaluate_recognizer(manifest, result.model, decoder, split)
        rep.title = f"Ablation: {ABLATION_LABELS.get(mode, mode)}"
        rep.references = REFERENCE_ABLATION
        log.info("ablation %s: CER %.4f WER %.4f", mode, rep.cer, rep.wer)
        reports[mode] = rep
        if sub is not None:
            rep.save(sub, "eval")
    if out_dir is not None:
        Path(out_dir, "ablation.txt").write_text(ablation_table(reports) + "\n", encoding="utf-8")
        summary = {m: {"cer": r.cer, "wer": r.wer} for m, r in reports.items()}
        Path(out_dir, "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return reports


def ablation_table(reports: dict[str, EvalReport]) -> str:
    """Rows in the order lip-only, masked-lip, full, with the published numbers alongside."""
    paper = {r["setting"]: r for r in REFERENCE_ABLATION}
    lines = [f"{'input':<12} {'CER':>7} {'WER':>7}   {'paper CER':>9} {'paper WER':>9}"]
    for mode in ("lip_only", "masked_lip", "full"):
        if mode not in reports:
            continue
        r = reports[mode]
        label = ABLATION_LABELS[mode]
        p = paper[label]
        lines.append(f"{label:<12} {100 * r.cer:7.2f} {100 * r.wer:7.2f}   {p['cer']:9.2f} {p['wer']:9.2f}")
    return "\n".join(lines)


def random_duration_profile(n: int, mean: float, rng: np.random.Generator) -> np.ndarray:
    """Control profile: independent uniform integers in ``[1, 2 * mean - 1]``."""
    hi = max(2, int(round(2 * mean)))
    return rng.integers(1, hi, size=n)


def evaluate_synthesis(sentences: Sequence[str], source_speaker: str, multi_speaker, target, scoring,
                       target_speaker: str | None = None, scramble: bool = False, seed: int = 0,
                       decoder: str = "greedy", durations_fn: Callable | None = None) -> EvalReport:
    """Synthesize every sentence, then transcribe the audio with a mel-input recognizer.

    With ``scramble=True`` the source duration profile is replaced by a random
    one of the same length and mean (the control condition).
    """
    from .synthesis import _load, extract_source_durations, transplant_synthesize

    if not sentences:
        raise ValueError("no sentences to synthesize")
    scorer = _as_recognizer(scoring)
    if scorer.config.input_kind != "mel":
        raise ValueError("the scoring recognizer must take mel input")
    source = _load(multi_speaker)
    target = _load(target)
    rng = np.random.default_rng(seed)
    pairs = []
    for i, text in enumerate(sentences):
        phon = source.phonemize(text)
        dur = extract_source_durations(phon, source_speaker, source)
        if durations_fn is not None:
            dur = durations_fn(phon, dur)
        if scramble:
            dur = random_duration_profile(dur.size, float(dur.mean()), rng)
        res = transplant_synthesize(text, source_speaker, source, target, target_speaker, durations=dur)
        hyp = scorer.transcribe_audio(res.waveform, res.sample_rate, decoder)
        pairs.append((f"s{i:03d}", text, hyp))
    fps = {"duration_model": source.to_checkpoint().fingerprint, "target_voice": target.to_checkpoint().fingerprint,
           "scorer": scorer.to_checkpoint().fingerprint}
    title = "Synthesis intelligibility" + (" (scrambled durations)" if scramble else "")
    return score_pairs(pairs, title, fps, REFERENCE_SYNTHESIS)


def train_scoring_recognizer(manifest: Manifest, speaker: str, config: RecognizerConfig | None = None,
                             out_dir: str | Path | None = None, split: str = "train", **kw) -> Recognizer:
    """Mel-input recognizer trained on one speaker's audio, used to score synthesized speech."""
    cfg = config or RecognizerConfig(input_kind="mel")
    if cfg.input_kind != "mel":
        raise ValueError("scoring recognizers take mel input")
    return train_recognizer(manifest, cfg, speakers=[speaker], out_dir=out_dir, **kw).model


# ---------------------------------------------------------------------------
# figures


def _log_mels(waveforms, sample_rate, n_fft, hop, n_mels):
    out = []
    for w in waveforms:
        w = np.asarray(w, dtype=np.float64)
        if w.size < n_fft:
            w = np.pad(w, (0, n_fft - w.size))
        out.append(mel_spectrogram(w, sample_rate, n_fft, hop, n_mels, pad=(n_fft - hop) // 2).T)
    return out


def render_spectrograms(waveforms: Sequence[np.ndarray], labels: Sequence[str] | None = None,
                        sample_rate: int = 16000, n_fft: int = 1024, hop: int = 256, n_mels: int = 80):
    """Side-by-side log-mel panels sharing one color scale.  Returns ``(figure, axes)``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if len(waveforms) == 0:
        raise ValueError("need at least one waveform")
    labels = list(labels) if labels is not None else [f"({chr(65 + i)})" for i in range(len(waveforms))]
    if len(labels) != len(waveforms):
        raise ValueError(f"{len(labels)} labels for {len(waveforms)} waveforms")
    mels = _log_mels(waveforms, sample_rate, n_fft, hop, n_mels)
    vmin = min(float(m.min()) for m in mels)
    vmax = max(float(m.max()) for m in mels)
    width = max(m.shape[1] for m in mels)
    # Panels sit on whole-pixel boundaries so equal inputs rasterize identically.
    dpi, pw, ph, gap, top, bottom = 80, 240, 200, 16, 24, 8
    W, H = gap + len(mels) * (pw + gap), top + ph + bottom
    fig = plt.figure(figsize=(W / dpi, H / dpi), dpi=dpi)
    axes = []
    for i, (m, lab) in enumerate(zip(mels, labels)):
        x0 = gap + i * (pw + gap)
        ax = fig.add_axes((x0 / W, bottom / H, pw / W, ph / H))
        ax.imshow(m, origin="lower", aspect="auto", vmin=vmin, vmax=vmax, cmap="magma",
                  interpolation="nearest", extent=(0, m.shape[1], 0, n_mels))
        ax.set_xlim(0, width)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(lab, fontsize=9)
        axes.append(ax)
    return fig, axes


def panel_pixels(fig, axes) -> list[np.ndarray]:
    """RGB pixels inside each axes' data area (equal-sized crops)."""
    fig.canvas.draw()
    img = np.asarray(fig.canvas.buffer_rgba())[..., :3]
    H = img.shape[0]
    boxes = [ax.get_window_extent() for ax in axes]
    w = int(min(b.width for b in boxes)) - 2
    h = int(min(b.height for b in boxes)) - 2
    crops = []
    for b in boxes:
        x0 = int(np.ceil(b.x0)) + 1
        y0 = H - int(np.floor(b.y1)) + 1
        crops.append(img[y0:y0 + h, x0:x0 + w].copy())
    return crops


def spectrogram_report(waveforms: Sequence[np.ndarray], labels: Sequence[str] | None, path: str | Path,
                       sample_rate: int = 16000, n_fft: int = 1024, hop: int = 256, n_mels: int = 80) -> Path:
    """Write a PNG with one log-mel panel per waveform."""
    import matplotlib.pyplot as plt

    fig, _ = render_spectrograms(waveforms, labels, sample_rate, n_fft, hop, n_mels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
