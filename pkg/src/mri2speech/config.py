"""Run configuration: defaults <- INI file <- ``section.key=value`` overrides.

Sections: ``[run]`` (global seed, output root), ``[corpus]``, ``[recognizer]``,
``[tts]``, ``[synthesis]`` and ``[eval]``.  Per-section seeds that are not set
explicitly are derived from the global seed, so each subsystem draws from its
own stream.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import SchemaError
from .recognizer import RecognizerConfig
from .synthetic import SyntheticConfig
from .tts import TTSConfig

OUTPUT_ROOT_ENV = "MRI2SPEECH_OUTPUT_ROOT"


@dataclass
class RunSection:
    seed: int = 0
    output_root: str = ""


@dataclass
class SynthesisSection:
    source_speaker: str = ""
    target_speaker: str = ""
    temperature: float = 0.0
    seed: int = 0


@dataclass
class EvalSection:
    decoder: str = "greedy"
    split: str = "test"
    ablation_modes: tuple[str, ...] = ("full", "masked_lip", "lip_only")

    def __post_init__(self):
        self.ablation_modes = tuple(self.ablation_modes)
        if self.decoder not in ("greedy", "beam"):
            raise ValueError(f"decoder must be 'greedy' or 'beam', got {self.decoder!r}")


SECTIONS = {
    "run": RunSection,
    "corpus": SyntheticConfig,
    "recognizer": RecognizerConfig,
    "tts": TTSConfig,
    "synthesis": SynthesisSection,
    "eval": EvalSection,
}
SEEDED = ("corpus", "recognizer", "tts", "synthesis")


def derive_seed(global_seed: int, section: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{section}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: SyntheticConfig = field(default_factory=SyntheticConfig)
    recognizer: RecognizerConfig = field(default_factory=RecognizerConfig)
    tts: TTSConfig = field(default_factory=TTSConfig)
    synthesis: SynthesisSection = field(default_factory=SynthesisSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def output_root(self) -> Path:
        return Path(self.run.output_root or os.environ.get(OUTPUT_ROOT_ENV, "runs"))

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name, values in self.to_dict().items():
            cp[name] = {k: format_value(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def _field_types(cls) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse_value(key: str, raw: str, typ):
    origin = typing.get_origin(typ)
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if origin is tuple:
            (inner, *_rest) = typing.get_args(typ)
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(parse_value(key, t, inner) for t in items)
    except ValueError:
        name = getattr(typ, "__name__", str(typ))
        raise SchemaError(f"{key}: expected {name}, got {raw!r}") from None
    raise SchemaError(f"{key}: unsupported field type {typ}")


def resolve_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Merge defaults, an optional INI file and ``section.key=value`` overrides."""
    raw: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise SchemaError(f"{path}: {exc}") from None
        for section in cp.sections():
            if section not in SECTIONS:
                raise SchemaError(f"unknown config section {section!r}")
            raw[section].update(cp[section])
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise SchemaError(f"override must look like section.key=value, got {item!r}")
        section, name = key.strip().split(".", 1)
        if section not in SECTIONS:
            raise SchemaError(f"unknown config key {key.strip()!r}")
        raw[section][name] = value

    values = {}
    for section, cls in SECTIONS.items():
        types = _field_types(cls)
        kwargs = {}
        for name, text in raw[section].items():
            if name not in types:
                raise SchemaError(f"unknown config key '{section}.{name}'")
            kwargs[name] = parse_value(f"{section}.{name}", text, types[name])
        values[section] = kwargs
    global_seed = values["run"].get("seed", 0)
    for section in SEEDED:
        values[section].setdefault("seed", derive_seed(global_seed, section))
    try:
        return RunConfig(**{s: SECTIONS[s](**kw) for s, kw in values.items()})
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc)) from None
