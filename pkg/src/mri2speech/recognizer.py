"""Video-to-text recognizer trained with CTC.

Architecture: a 3-D/2-D convolutional video front end, a zero-filled audio
slot concatenated in front of the video features, a transformer encoder and a
linear projection head onto the phoneme alphabet (plus blank).  The same
network can take log-mel input instead of video; that variant is used to score
the intelligibility of synthesized audio.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .align.ctc import FramePosterior, ctc_beam_decode, ctc_greedy_decode, ctc_nll_and_grad, min_frames
from .align.metrics import char_errors
from .audio import mel_spectrogram
from .checkpoint import Checkpoint, encode_rng_state
from .corpus import ArticulatoryClip, Manifest, MaskSpec, apply_mask, preprocess_clip
from .errors import TrainingAbort
from .text import Lexicon, NGramLM, OOVError, TokenAlphabet, normalize_text

log = logging.getLogger(__name__)


@dataclass
class RecognizerConfig:
    input_kind: str = "video"  # "video" or "mel"
    frontend_channels: tuple[int, ...] = (8, 16, 32)
    layers: int = 4
    width: int = 144
    heads: int = 4
    ff_mult: int = 2
    dropout: float = 0.1
    audio_feature_dim: int = 64
    temporal_stride: int = 1
    image_size: int = 96
    fps: float = 25.0
    n_mels: int = 80
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    alphabet: tuple[str, ...] = ()
    lr_peak: float = 1e-3
    warmup_fraction: float = 0.30
    decay: str = "linear"
    total_steps: int = 2000
    batch_size: int = 20
    grad_clip: float = 5.0
    checkpoint_every: int = 0
    lm_order: int = 4
    lm_weight: float = 0.5
    beam: int = 16
    spec_freq_masks: int = 0  # SpecAugment on mel input during training (0 = off)
    spec_freq_width: int = 10
    spec_time_masks: int = 0
    spec_time_width: int = 6
    seed: int = 0

    def __post_init__(self):
        self.frontend_channels = tuple(self.frontend_channels)
        self.alphabet = tuple(self.alphabet)
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if not self.lr_peak > 0:
            raise ValueError("lr_peak must be positive")
        if self.input_kind not in ("video", "mel"):
            raise ValueError(f"input_kind must be 'video' or 'mel', got {self.input_kind!r}")
        if self.decay not in ("linear", "cosine"):
            raise ValueError(f"unknown decay shape {self.decay!r}")
        if min(self.spec_freq_masks, self.spec_freq_width, self.spec_time_masks, self.spec_time_width) < 0:
            raise ValueError("SpecAugment counts and widths must be non-negative")
        if self.input_kind == "video" and (self.spec_freq_masks or self.spec_time_masks):
            raise ValueError("SpecAugment applies to mel input only")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frontend_channels"] = list(self.frontend_channels)
        d["alphabet"] = list(self.alphabet)
        return d


def lr_schedule(step: int, config: RecognizerConfig) -> float:
    """Linear warm-up to ``lr_peak`` over ``warmup_fraction`` of training, then decay to 0."""
    total = config.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = config.warmup_fraction * total
    if step <= warm:
        return config.lr_peak * step / warm
    frac = (total - step) / (total - warm)
    if config.decay == "cosine":
        return config.lr_peak * 0.5 * (1.0 - math.cos(math.pi * frac))
    return config.lr_peak * frac


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe


class VideoFrontend(nn.Module):
    def __init__(self, channels: Sequence[int], out_dim: int, temporal_stride: int):
        super().__init__()
        c0, *rest = channels
        self.stem = nn.Conv3d(1, c0, (3, 5, 5), stride=(temporal_stride, 3, 3), padding=(1, 2, 2))
        convs = []
        prev = c0
        for c in rest:
            convs += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.ReLU()]
            prev = c
        self.trunk = nn.Sequential(*convs, nn.AdaptiveAvgPool2d(4), nn.Flatten())
        self.proj = nn.Linear(prev * 16, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, T, H, W] -> [B, T', out_dim]
        h = F.relu(self.stem(x.unsqueeze(1)))
        B, C, T, H, W = h.shape
        h = h.transpose(1, 2).reshape(B * T, C, H, W)
        return self.proj(self.trunk(h)).reshape(B, T, -1)


class MelFrontend(nn.Module):
    def __init__(self, n_mels: int, out_dim: int, temporal_stride: int):
        super().__init__()
        self.conv1 = nn.Conv1d(n_mels, out_dim, 5, padding=2)
        self.conv2 = nn.Conv1d(out_dim, out_dim, 5, stride=temporal_stride, padding=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, T, n_mels] log-mel
        h = F.relu(self.conv1((x / 10.0 + 0.5).transpose(1, 2)))
        return F.relu(self.conv2(h)).transpose(1, 2)


def fuse_modalities(video_feats, audio_feature_dim: int):
    """Prepend an all-zero audio block: ``[T', d_v] -> [T', d_a + d_v]`` (batched leading dims allowed)."""
    if isinstance(video_feats, torch.Tensor):
        zeros = video_feats.new_zeros(*video_feats.shape[:-1], audio_feature_dim)
        return torch.cat([zeros, video_feats], dim=-1)
    v = np.asarray(video_feats)
    zeros = np.zeros((*v.shape[:-1], audio_feature_dim), dtype=v.dtype)
    return np.concatenate([zeros, v], axis=-1)


class RecognizerNet(nn.Module):
    def __init__(self, cfg: RecognizerConfig):
        super().__init__()
        self.cfg = cfg
        d_v = cfg.width
        if cfg.input_kind == "video":
            self.frontend = VideoFrontend(cfg.frontend_channels, d_v, cfg.temporal_stride)
        else:
            self.frontend = MelFrontend(cfg.n_mels, d_v, cfg.temporal_stride)
        self.fuse_proj = nn.Linear(cfg.audio_feature_dim + d_v, cfg.width)
        layer = nn.TransformerEncoderLayer(cfg.width, cfg.heads, cfg.ff_mult * cfg.width, cfg.dropout,
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, len(cfg.alphabet))

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        s = self.cfg.temporal_stride
        return (lengths + s - 1) // s

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.frontend(x)

    def posteriors(self, fused: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.fuse_proj(fused)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2]).to(h)
        h = self.norm(self.encoder(h, src_key_padding_mask=pad_mask))
        return F.log_softmax(self.head(h), dim=-1)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor):
        feats = self.encode(x)
        out_len = self.output_lengths(lengths)
        T = feats.shape[1]
        pad_mask = torch.arange(T)[None, :] >= out_len[:, None]
        feats = feats.masked_fill(pad_mask[..., None], 0.0)
        fused = fuse_modalities(feats, self.cfg.audio_feature_dim)
        return self.posteriors(fused, pad_mask), out_len, fused


class _CTCLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, labels):
        nll, grad = ctc_nll_and_grad(log_probs.detach().double().numpy(), labels, blank=0)
        ctx.save_for_backward(torch.from_numpy(grad).to(log_probs.dtype))
        return log_probs.new_tensor(nll)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None


def ctc_loss(log_probs: torch.Tensor, lengths: torch.Tensor, labels: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean per-utterance CTC negative log-likelihood over the true (unpadded) lengths."""
    losses = [_CTCLoss.apply(log_probs[b, : int(lengths[b])], tuple(labels[b])) for b in range(len(labels))]
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------


@dataclass
class Recognizer:
    """A trained (or freshly initialized) network plus its decoding resources."""

    config: RecognizerConfig
    net: RecognizerNet
    lexicon: Lexicon
    lm: NGramLM | None = None
    step: int = 0
    mask: MaskSpec = field(default_factory=MaskSpec)

    @property
    def alphabet(self) -> TokenAlphabet:
        return TokenAlphabet(self.config.alphabet, 0)

    @classmethod
    def initialize(cls, config: RecognizerConfig, lexicon: Lexicon, lm: NGramLM | None = None,
                   mask: MaskSpec | None = None) -> "Recognizer":
        if not config.alphabet:
            config.alphabet = TokenAlphabet.for_ctc(lexicon.phoneme_set).tokens
        lexicon.check_alphabet(TokenAlphabet(config.alphabet, 0))
        torch.manual_seed(config.seed)
        return cls(config, RecognizerNet(config), lexicon, lm, 0, mask or MaskSpec())

    # -- inputs -------------------------------------------------------------

    def prepare_clip(self, clip: ArticulatoryClip) -> np.ndarray:
        clip = preprocess_clip(clip, self.config.image_size, self.config.fps)
        return apply_mask(clip, self.mask).frames

    def prepare_audio(self, waveform: np.ndarray, sample_rate: int) -> np.ndarray:
        if sample_rate != self.config.sample_rate:
            raise ValueError(f"expected {self.config.sample_rate} Hz audio, got {sample_rate}")
        c = self.config
        return mel_spectrogram(waveform, sample_rate, c.n_fft, c.hop, c.n_mels,
                               pad=(c.n_fft - c.hop) // 2).astype(np.float32)

    def check_input(self, x: np.ndarray) -> None:
        c = self.config
        if c.input_kind == "video" and x.shape[1:] != (c.image_size, c.image_size):
            raise ValueError(f"expected {c.image_size}x{c.image_size} frames, got {x.shape[1:]}")
        if c.input_kind == "mel" and x.shape[1] != c.n_mels:
            raise ValueError(f"expected {c.n_mels} mel bins, got {x.shape[1]}")

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def encode_video(self, frames: np.ndarray) -> np.ndarray:
        self.check_input(frames)
        self.net.eval()
        x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))[None]
        return self.net.encode(x)[0].numpy()

    @torch.no_grad()
    def forward_posteriors(self, fused: np.ndarray) -> FramePosterior:
        self.net.eval()
        x = torch.from_numpy(np.asarray(fused, dtype=np.float32))[None]
        lp = self.net.posteriors(x)[0].double()
        lp = lp - torch.logsumexp(lp, dim=-1, keepdim=True)
        return FramePosterior(lp.numpy(), self.alphabet)

    def posterior(self, x: np.ndarray) -> FramePosterior:
        feats = self.encode_video(x)
        return self.forward_posteriors(fuse_modalities(feats, self.config.audio_feature_dim))

    def decode(self, post: FramePosterior, decoder: str = "greedy") -> list[int]:
        if decoder == "greedy":
            return ctc_greedy_decode(post)
        if decoder == "beam":
            return ctc_beam_decode(post, self.lm, self.config.beam, self.config.lm_weight if self.lm else 0.0)
        raise ValueError(f"unknown decoder {decoder!r}")

    def ids_to_text(self, ids: Sequence[int]) -> str:
        return " ".join(self.lexicon.words_for(self.alphabet.decode(ids)))

    def transcribe_array(self, x: np.ndarray, decoder: str = "greedy") -> str:
        return self.ids_to_text(self.decode(self.posterior(x), decoder))

    def transcribe(self, clip: ArticulatoryClip, decoder: str = "greedy") -> str:
        return self.transcribe_array(self.prepare_clip(clip), decoder)

    def transcribe_audio(self, waveform: np.ndarray, sample_rate: int, decoder: str = "greedy") -> str:
        return self.transcribe_array(self.prepare_audio(waveform, sample_rate), decoder)

    # -- persistence --------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        extras = {
            "lexicon": self.lexicon.to_lines(),
            "lexicon_source": self.lexicon.source,
            "mask": {"mode": self.mask.mode, "lip_region": list(self.mask.lip_region) if self.mask.lip_region else None},
            "lm": self.lm.to_bytes().hex() if self.lm is not None else None,
        }
        return Checkpoint("recognizer", self.config.to_dict(), dict(self.net.state_dict()), self.step,
                          encode_rng_state(), extras)

    def save(self, path: str | Path) -> Path:
        return self.to_checkpoint().save(path)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Recognizer":
        if ckpt.kind != "recognizer":
            raise ValueError(f"expected a recognizer checkpoint, got {ckpt.kind!r}")
        cfg = RecognizerConfig(**ckpt.config)
        lex = Lexicon(source=ckpt.extras.get("lexicon_source", "checkpoint"))
        for line in ckpt.extras["lexicon"]:
            word, *prons = line.split()
            lex.add(word, prons)
        lm_hex = ckpt.extras.get("lm")
        lm = NGramLM.from_bytes(bytes.fromhex(lm_hex)) if lm_hex else None
        m = ckpt.extras.get("mask") or {}
        mask = MaskSpec(m.get("mode", "full"), tuple(m["lip_region"]) if m.get("lip_region") else None)
        net = RecognizerNet(cfg)
        net.load_state_dict(ckpt.state_dict)
        net.eval()
        return cls(cfg, net, lex, lm, ckpt.step, mask)

    @classmethod
    def load(cls, path: str | Path) -> "Recognizer":
        return cls.from_checkpoint(Checkpoint.load(path))


def encode_video(clip: ArticulatoryClip, model: Recognizer) -> np.ndarray:
    return model.encode_video(clip.frames)


def forward_posteriors(fused: np.ndarray, model: Recognizer) -> FramePosterior:
    return model.forward_posteriors(fused)


def transcribe(clip: ArticulatoryClip, checkpoint, decoder: str = "greedy") -> str:
    model = checkpoint if isinstance(checkpoint, Recognizer) else Recognizer.load(checkpoint)
    return model.transcribe(clip, decoder)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingExample:
    utt_id: str
    features: np.ndarray  # [T, H, W] video or [T, n_mels] mel
    labels: list[int]
    transcript: str


@dataclass
class TrainResult:
    model: Recognizer
    losses: list[dict]
    checkpoint_path: Path | None = None


def build_examples(manifest: Manifest, model: Recognizer, split: str = "train",
                   speakers: Sequence[str] | None = None) -> list[TrainingExample]:
    alphabet = model.alphabet
    out = []
    for entry in manifest.split(split):
        if speakers is not None and entry.speaker_id not in speakers:
            continue
        text = normalize_text(entry.transcript)
        try:
            phonemes = [p for w in text.split() for p in model.lexicon[w]]
        except KeyError as exc:
            raise TrainingAbort(entry.utt_id, str(OOVError(exc.args[0]))) from None
        labels = alphabet.encode(phonemes)
        if model.config.input_kind == "video":
            feats = model.prepare_clip(manifest.load_clip(entry))
        else:
            utt = manifest.load_utterance(entry)
            feats = model.prepare_audio(utt.waveform, utt.sample_rate)
        t_out = -(-feats.shape[0] // model.config.temporal_stride)
        if min_frames(labels) > t_out:
            raise TrainingAbort(entry.utt_id, f"{len(labels)} labels cannot fit in {t_out} output frames")
        out.append(TrainingExample(entry.utt_id, feats, labels, text))
    return out


def collate(examples: Sequence[TrainingExample]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([ex.features.shape[0] for ex in examples])
    T = int(lengths.max())
    shape = (len(examples), T, *examples[0].features.shape[1:])
    x = np.zeros(shape, dtype=np.float32)
    for b, ex in enumerate(examples):
        x[b, : ex.features.shape[0]] = ex.features
    return torch.from_numpy(x), lengths


def spec_augment(x: torch.Tensor, lengths: torch.Tensor, config: RecognizerConfig,
                 rng: np.random.Generator) -> torch.Tensor:
    """Frequency and time masking of a mel batch ``[B, T, n_mels]``; masked cells take the utterance mean."""
    x = x.clone()
    for b, n in enumerate(lengths.tolist()):
        fill = float(x[b, :n].mean())
        for _ in range(config.spec_freq_masks):
            w = int(rng.integers(0, config.spec_freq_width + 1))
            f0 = int(rng.integers(0, max(x.shape[2] - w, 0) + 1))
            x[b, :n, f0:f0 + w] = fill
        for _ in range(config.spec_time_masks):
            w = int(rng.integers(0, min(config.spec_time_width, n) + 1))
            t0 = int(rng.integers(0, n - w + 1))
            x[b, t0:t0 + w] = fill
    return x


def train_lm(examples: Sequence[TrainingExample], alphabet: TokenAlphabet, order: int) -> NGramLM:
    vocab = [alphabet.index(t) for t in alphabet.symbols]
    return NGramLM.train([ex.labels for ex in examples], vocab, order=order)


def train_recognizer(manifest: Manifest, config: RecognizerConfig, mask: MaskSpec | None = None,
                     lexicon: Lexicon | None = None, speakers: Sequence[str] | None = None,
                     out_dir: str | Path | None = None, eval_every: int = 0,
                     stop_at_zero_cer: bool = False) -> TrainResult:
    """Fit a recognizer with Adam on the train split.

    ``eval_every`` > 0 decodes the training set greedily at that interval; with
    ``stop_at_zero_cer`` training stops at the first evaluation that reaches 0%
    train CER.  Checkpoints go to ``out_dir`` every ``checkpoint_every`` steps
    and at the end, and the per-step log is written to ``out_dir/loss.csv``.
    """
    if lexicon is None:
        lexicon = Lexicon.load(manifest.root / "lexicon.txt")
    model = Recognizer.initialize(config, lexicon, mask=mask)
    examples = build_examples(manifest, model, "train", speakers)
    if not examples:
        raise ValueError("manifest has no training utterances")
    model.lm = train_lm(examples, model.alphabet, config.lm_order)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    net = model.net
    opt = torch.optim.Adam(net.parameters(), lr=0.0)
    order_rng = np.random.default_rng(config.seed)
    augment = config.input_kind == "mel" and (config.spec_freq_masks > 0 or config.spec_time_masks > 0)
    aug_rng = np.random.default_rng([config.seed, 1])
    bs = min(config.batch_size, len(examples))
    queue: list[int] = []
    losses = []
    for step in range(1, config.total_steps + 1):
        if len(queue) < bs:
            queue.extend(order_rng.permutation(len(examples)).tolist())
        batch = [examples[i] for i in queue[:bs]]
        del queue[:bs]
        x, lengths = collate(batch)
        if augment:
            x = spec_augment(x, lengths, config, aug_rng)
        net.train()
        log_probs, out_len, fused = net(x, lengths)
        if float(fused.detach()[..., : config.audio_feature_dim].abs().sum()) != 0.0:
            raise RuntimeError("audio block of the fused features is not all zero")
        loss = ctc_loss(log_probs, out_len, [ex.labels for ex in batch])
        lr = lr_schedule(step, config)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        loss.backward()
        gnorm = torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
        if not (torch.isfinite(loss) and torch.isfinite(gnorm)):
            raise FloatingPointError(f"non-finite loss/gradient at step {step}")
        opt.step()
        model.step = step
        per_frame = float(loss.detach()) * len(batch) / float(out_len.sum())
        rec = {"step": step, "lr": lr, "loss": float(loss.detach()), "loss_per_frame": per_frame}
        if eval_every and (step % eval_every == 0 or step == config.total_steps):
            rec["train_cer"] = corpus_cer(model, examples)
            log.info("step %d loss %.4f train CER %.4f", step, float(loss.detach()), rec["train_cer"])
        losses.append(rec)
        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            model.save(out_dir / f"recognizer_step{step:06d}.ckpt")
        if stop_at_zero_cer and rec.get("train_cer") == 0.0:
            break
    net.eval()
    ckpt_path = None
    if out_dir is not None:
        ckpt_path = model.save(out_dir / "recognizer.ckpt")
        write_loss_log(out_dir / "loss.csv", losses)
    return TrainResult(model, losses, ckpt_path)


def corpus_cer(model: Recognizer, examples: Sequence[TrainingExample], decoder: str = "greedy") -> float:
    dist = total = 0
    for ex in examples:
        hyp = model.transcribe_array(ex.features, decoder)
        d, n = char_errors(ex.transcript, hyp)
        dist += d
        total += n
    return dist / total


def write_loss_log(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for r in rows:
            writer.writerow([r["step"], f"{r['lr']:.8g}", f"{r['loss']:.8g}"])
