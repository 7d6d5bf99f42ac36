"""Dataset model: clips, utterances, manifests, preprocessing and masking."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import SchemaError
from .media import read_clip, read_wav
from .text import normalize_text

MANIFEST_FIELDS = ("clip_path", "transcript", "audio_path", "speaker_id", "split")
SPLITS = ("train", "test")
MASK_MODES = ("full", "lip_only", "masked_lip")


@dataclass(frozen=True)
class ArticulatoryClip:
    frames: np.ndarray
    fps: float
    speaker_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 3:
            raise ValueError(f"frames must be [num_frames, height, width], got {frames.shape}")
        n, h, w = frames.shape
        if n < 1 or h < 8 or w < 8:
            raise ValueError(f"clip too small: {frames.shape}")
        if not np.all(np.isfinite(frames)) or frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps


@dataclass(frozen=True)
class Utterance:
    clip: ArticulatoryClip
    transcript: str
    waveform: np.ndarray
    sample_rate: int
    speaker_id: str
    utt_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "transcript", normalize_text(self.transcript))
        wav = np.asarray(self.waveform, dtype=np.float64).reshape(-1)
        if wav.size and (wav.min() < -1.0 or wav.max() > 1.0):
            raise ValueError("waveform samples must lie in [-1, 1]")
        object.__setattr__(self, "waveform", wav)
        audio_dur = wav.size / self.sample_rate
        if abs(audio_dur - self.clip.duration) > 0.2 * self.clip.duration:
            raise ValueError(
                f"{self.utt_id}: audio {audio_dur:.3f}s differs from video {self.clip.duration:.3f}s by more than 20%")


@dataclass(frozen=True)
class MaskSpec:
    mode: str = "full"
    lip_region: tuple[int, int, int, int] | None = None  # row0, row1, col0, col1 (end-exclusive)

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ValueError(f"mask mode must be one of {MASK_MODES}, got {self.mode!r}")

    def region_for(self, height: int, width: int) -> tuple[int, int, int, int]:
        rect = self.lip_region or default_lip_region(height, width)
        r0, r1, c0, c1 = (int(v) for v in rect)
        if not (0 <= r0 < r1 <= height and 0 <= c0 < c1 <= width):
            raise ValueError(f"lip region {rect} is outside a {height}x{width} frame or has zero area")
        return r0, r1, c0, c1


def default_lip_region(height: int, width: int) -> tuple[int, int, int, int]:
    """Lower-front quadrant: rows [0.55H, 0.95H), cols [0.05W, 0.50W)."""
    return (int(round(0.55 * height)), int(round(0.95 * height)),
            int(round(0.05 * width)), int(round(0.50 * width)))


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    clip_path: str
    transcript: str
    audio_path: str
    speaker_id: str
    split: str

    @property
    def utt_id(self) -> str:
        return Path(self.clip_path).stem

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in MANIFEST_FIELDS}


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)
    speakers: tuple[str, ...] = ()

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.speakers:
            self.speakers = tuple(sorted({e.speaker_id for e in self.entries}))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def subset(self, split: str) -> "Manifest":
        return Manifest(self.split(split), self.root, self.speakers)

    def test_fraction(self) -> dict[str, float]:
        totals = Counter(e.speaker_id for e in self.entries)
        tests = Counter(e.speaker_id for e in self.entries if e.split == "test")
        return {spk: tests[spk] / totals[spk] for spk in sorted(totals)}

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_clip(self, entry: ManifestEntry) -> ArticulatoryClip:
        frames, fps = read_clip(self.resolve(entry.clip_path))
        return ArticulatoryClip(frames, fps, entry.speaker_id)

    def load_utterance(self, entry: ManifestEntry) -> Utterance:
        wav, sr = read_wav(self.resolve(entry.audio_path))
        return Utterance(self.load_clip(entry), entry.transcript, wav, sr, entry.speaker_id, entry.utt_id)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_record(), sort_keys=True, ensure_ascii=False) + "\n")
        (path.parent / "speakers.json").write_text(
            json.dumps({"speakers": list(self.speakers)}, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, check_paths: bool = True) -> Manifest:
    """Read and validate a JSON-lines manifest.

    Paths are resolved relative to the manifest's directory.  If a
    ``speakers.json`` sidecar exists, every speaker_id must appear in it.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    speaker_table = None
    sidecar = root / "speakers.json"
    if sidecar.is_file():
        try:
            speaker_table = tuple(json.loads(sidecar.read_text(encoding="utf-8"))["speakers"])
        except (json.JSONDecodeError, KeyError, TypeError):
            raise SchemaError(f"{sidecar}: expected an object with a 'speakers' list") from None

    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise SchemaError(f"{path}:{lineno}: record must be a JSON object")
        missing = [k for k in MANIFEST_FIELDS if k not in rec]
        if missing:
            raise SchemaError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        extra = sorted(set(rec) - set(MANIFEST_FIELDS))
        if extra:
            raise SchemaError(f"{path}:{lineno}: unexpected field(s) {', '.join(extra)}")
        if not all(isinstance(rec[k], str) for k in MANIFEST_FIELDS):
            raise SchemaError(f"{path}:{lineno}: all fields must be strings")
        if rec["split"] not in SPLITS:
            raise SchemaError(f"{path}:{lineno}: split must be one of {SPLITS}, got {rec['split']!r}")
        if speaker_table is not None and rec["speaker_id"] not in speaker_table:
            raise SchemaError(f"{path}:{lineno}: speaker {rec['speaker_id']!r} not in speaker table")
        entry = ManifestEntry(**{k: rec[k] for k in MANIFEST_FIELDS})
        if check_paths:
            for key in ("clip_path", "audio_path"):
                p = Path(getattr(entry, key))
                p = p if p.is_absolute() else root / p
                if not p.is_file():
                    raise FileNotFoundError(f"{path}:{lineno} ({entry.utt_id}): {key} not found: {p}")
        entries.append(entry)
    if not entries:
        raise SchemaError(f"{path}: empty manifest")
    return Manifest(entries, root, speaker_table or ())


# ---------------------------------------------------------------------------
# preprocessing


def resize_frames(frames: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of every frame (pixel-center aligned).  Identity at equal size."""
    frames = np.asarray(frames, dtype=np.float32)
    n, h, w = frames.shape
    if (h, w) == (height, width):
        return frames.copy()
    rows = (np.arange(height) + 0.5) * h / height - 0.5
    cols = (np.arange(width) + 0.5) * w / width - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = np.empty((n, height, width), dtype=np.float32)
    for i in range(n):
        out[i] = ndimage.map_coordinates(frames[i], [rr, cc], order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def resample_indices(num_frames: int, fps: float, target_fps: float) -> np.ndarray:
    """Nearest-frame source indices for a frame-rate change."""
    n_out = max(1, int(round(num_frames * target_fps / fps)))
    src = np.floor((np.arange(n_out) + 0.5) * fps / target_fps).astype(int)
    return np.clip(src, 0, num_frames - 1)


def preprocess_clip(clip: ArticulatoryClip, target_size: int = 96, target_fps: float = 25.0) -> ArticulatoryClip:
    if target_size < 8:
        raise ValueError(f"target_size must be >= 8, got {target_size}")
    if not target_fps > 0:
        raise ValueError(f"target_fps must be positive, got {target_fps}")
    frames = resize_frames(clip.frames, target_size, target_size)
    if target_fps != clip.fps:
        frames = frames[resample_indices(clip.num_frames, clip.fps, target_fps)]
    return ArticulatoryClip(frames, float(target_fps), clip.speaker_id)


def apply_mask(clip: ArticulatoryClip, spec: MaskSpec) -> ArticulatoryClip:
    if spec.mode == "full":
        return clip
    r0, r1, c0, c1 = spec.region_for(clip.height, clip.width)
    if spec.mode == "masked_lip":
        frames = clip.frames.copy()
        frames[:, r0:r1, c0:c1] = 0.0
    else:
        frames = resize_frames(clip.frames[:, r0:r1, c0:c1], clip.height, clip.width)
    return ArticulatoryClip(frames, clip.fps, clip.speaker_id)
