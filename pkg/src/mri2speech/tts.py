"""Conditional-VAE text-to-speech with a normalizing flow and a stochastic
duration predictor, trained with monotonic alignment search.

Tensor layout inside the networks is channels-first: ``[batch, channels, time]``.
The numpy-facing helpers on :class:`TTS` take and return ``[time, channels]``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import betabinom
from torch import nn
from torch.nn import functional as F

from .align.mas import AlignmentPath, alignment_to_durations, monotonic_alignment_search
from .audio import DEFAULT_LOG_FLOOR, mel_filterbank, mel_spectrogram
from .checkpoint import Checkpoint, encode_rng_state
from .corpus import Manifest
from .errors import TrainingAbort
from .recognizer import sinusoidal_positions
from .text import Lexicon, OOVError, PhonemeSequence, TokenAlphabet, normalize_text, phonemize

log = logging.getLogger(__name__)

LOGS_MIN, LOGS_MAX = -7.0, 5.0
LOG_2PI = math.log(2 * math.pi)


@dataclass
class TTSConfig:
    alphabet: tuple[str, ...] = ()
    speakers: tuple[str, ...] = ()
    hidden: int = 96
    d_z: int = 32
    speaker_dim: int = 16
    prior_layers: int = 2
    prior_heads: int = 2
    posterior_layers: int = 4
    posterior_kernel: int = 5
    flow_couplings: int = 4
    flow_hidden: int = 64
    sdp_hidden: int = 64
    decoder_channels: int = 64
    segment_frames: int = 32
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 80
    dropout: float = 0.0
    recon_weight: float = 1.0
    kl_weight: float = 1.0
    dur_weight: float = 1.0
    adversarial_weight: float = 0.0
    align_prior_fraction: float = 1.0  # share of training over which the MAS prior fades to 0
    align_prior_scale: float = 1.0
    lr: float = 2e-3
    total_steps: int = 1000
    batch_size: int = 32
    grad_clip: float = 10.0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.alphabet = tuple(self.alphabet)
        self.speakers = tuple(self.speakers)
        if not 0.0 <= self.align_prior_fraction <= 1.0:
            raise ValueError(f"align_prior_fraction must lie in [0, 1], got {self.align_prior_fraction}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alphabet"] = list(self.alphabet)
        d["speakers"] = list(self.speakers)
        return d


def upsample_factors(hop: int) -> list[int]:
    factors, rest = [], hop
    for f in (4, 2, 3, 5, 7):
        while rest % f == 0 and rest > 1:
            factors.append(f)
            rest //= f
    if rest != 1:
        factors.append(rest)
    return factors


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return (torch.arange(max_len)[None, :] < lengths[:, None]).float()


class TorchMel(nn.Module):
    """Differentiable twin of :func:`mri2speech.audio.mel_spectrogram` (reflect-padded, magnitude)."""

    def __init__(self, sample_rate: int, n_fft: int, hop: int, n_mels: int, log_floor: float = DEFAULT_LOG_FLOOR):
        super().__init__()
        self.n_fft, self.hop, self.log_floor = n_fft, hop, log_floor
        self.register_buffer("window", torch.hann_window(n_fft, periodic=True, dtype=torch.float64).float())
        fb = mel_filterbank(sample_rate, n_fft, n_mels)
        self.register_buffer("fb", torch.from_numpy(fb).float())

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        # wav [B, L] -> [B, n_mels, L // hop]
        pad = (self.n_fft - self.hop) // 2
        x = F.pad(wav[:, None, :], (pad, pad), mode="reflect")[:, 0]
        frames = x.unfold(-1, self.n_fft, self.hop) * self.window
        spec = torch.fft.rfft(frames, dim=-1)
        mag = torch.sqrt(spec.real ** 2 + spec.imag ** 2 + 1e-12)
        mel = mag @ self.fb.T
        return torch.log(torch.clamp(mel, min=self.log_floor)).transpose(1, 2)


class TextEncoder(nn.Module):
    def __init__(self, cfg: TTSConfig):
        super().__init__()
        H = cfg.hidden
        self.emb = nn.Embedding(len(cfg.alphabet), H)
        nn.init.normal_(self.emb.weight, 0.0, H ** -0.5)
        self.spk = nn.Linear(cfg.speaker_dim, H)
        layer = nn.TransformerEncoderLayer(H, cfg.prior_heads, 2 * H, cfg.dropout, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.prior_layers, enable_nested_tensor=False)
        self.conv = nn.Conv1d(H, H, 3, padding=1)
        self.proj = nn.Conv1d(H, 2 * cfg.d_z, 1)

    def forward(self, tokens, x_mask, g):
        h = self.emb(tokens) * math.sqrt(self.emb.embedding_dim) + self.spk(g)[:, None, :]
        h = h + sinusoidal_positions(h.shape[1], h.shape[2]).to(h)
        h = self.encoder(h, src_key_padding_mask=x_mask == 0)
        h = h.transpose(1, 2) * x_mask[:, None]
        h = (h + F.gelu(self.conv(h))) * x_mask[:, None]
        m, logs = self.proj(h).chunk(2, dim=1)
        return h, m * x_mask[:, None], torch.clamp(logs, LOGS_MIN, LOGS_MAX) * x_mask[:, None]


class WaveNetStack(nn.Module):
    """Gated dilated residual convolutions with a global conditioning vector."""

    def __init__(self, channels: int, kernel: int, layers: int, cond_dim: int):
        super().__init__()
        self.in_layers = nn.ModuleList()
        self.res_skip = nn.ModuleList()
        self.cond = nn.Linear(cond_dim, 2 * channels * layers)
        for i in range(layers):
            d = 2 ** i
            self.in_layers.append(nn.Conv1d(channels, 2 * channels, kernel, dilation=d, padding=d * (kernel - 1) // 2))
            self.res_skip.append(nn.Conv1d(channels, 2 * channels if i < layers - 1 else channels, 1))
        self.channels = channels

    def forward(self, x, mask, g):
        out = torch.zeros_like(x)
        cond = self.cond(g)[:, :, None]
        C = self.channels
        for i, (conv, rs) in enumerate(zip(self.in_layers, self.res_skip)):
            a = conv(x) + cond[:, 2 * C * i: 2 * C * (i + 1)]
            acts = torch.tanh(a[:, :C]) * torch.sigmoid(a[:, C:])
            r = rs(acts)
            if i < len(self.in_layers) - 1:
                x = (x + r[:, :C]) * mask
                out = out + r[:, C:]
            else:
                out = out + r
        return out * mask


class PosteriorEncoder(nn.Module):
    def __init__(self, cfg: TTSConfig):
        super().__init__()
        self.pre = nn.Conv1d(cfg.n_mels, cfg.hidden, 1)
        self.wn = WaveNetStack(cfg.hidden, cfg.posterior_kernel, cfg.posterior_layers, cfg.speaker_dim)
        self.proj = nn.Conv1d(cfg.hidden, 2 * cfg.d_z, 1)

    def forward(self, mel, y_mask, g):
        # mel [B, n_mels, Ty]
        m_ = y_mask[:, None]
        h = self.pre(mel / 10.0 + 0.5) * m_
        h = self.wn(h, m_, g)
        m, logs = self.proj(h).chunk(2, dim=1)
        return m * m_, torch.clamp(logs, LOGS_MIN, LOGS_MAX) * m_


class AffineCoupling(nn.Module):
    """Transforms the second half of the channels given the first half.

    ``y_b = x_b * exp(s) + t`` with ``s = 2 tanh(raw / 2)``; the last layer is
    zero-initialized so a fresh coupling is the identity.
    """

    def __init__(self, channels: int, hidden: int, cond_dim: int, kernel: int = 5):
        super().__init__()
        self.half = channels // 2
        self.pre = nn.Conv1d(self.half, hidden, kernel, padding=kernel // 2)
        self.cond = nn.Linear(cond_dim, hidden)
        self.mid = nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2)
        self.post = nn.Conv1d(hidden, 2 * (channels - self.half), 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def _params(self, xa, mask, g):
        h = F.relu(self.pre(xa * mask) + self.cond(g)[:, :, None]) * mask
        h = F.relu(self.mid(h)) * mask
        raw_s, t = self.post(h).chunk(2, dim=1)
        s = 2.0 * torch.tanh(raw_s / 2.0)
        return s * mask, t * mask

    def forward(self, x, mask, g, reverse=False):
        xa, xb = x[:, : self.half], x[:, self.half:]
        s, t = self._params(xa, mask, g)
        if not reverse:
            yb = (xb * torch.exp(s) + t) * mask
            return torch.cat([xa, yb], 1), s.sum(1)  # per-frame log-det [B, T]
        xb = (xb - t) * torch.exp(-s) * mask
        return torch.cat([xa, xb], 1)


class FlowStack(nn.Module):
    def __init__(self, channels: int, hidden: int, cond_dim: int, couplings: int):
        super().__init__()
        self.couplings = nn.ModuleList(AffineCoupling(channels, hidden, cond_dim) for _ in range(couplings))

    def forward(self, z, mask, g):
        """Returns ``(f(z), log_det)`` with ``log_det`` per frame ``[B, T]``."""
        m_ = mask[:, None]
        logdet = torch.zeros(z.shape[0], z.shape[2], dtype=z.dtype)
        for c in self.couplings:
            z, ld = c(z, m_, g)
            logdet = logdet + ld
            z = torch.flip(z, [1])
        return z, logdet * mask

    def inverse(self, u, mask, g):
        m_ = mask[:, None]
        for c in reversed(self.couplings):
            u = torch.flip(u, [1])
            u = c(u, m_, g, reverse=True)
        return u


class ScalarCoupling(nn.Module):
    """Affine update of one of two channels from the other channel plus a condition."""

    def __init__(self, target: int, hidden: int):
        super().__init__()
        self.target = target
        self.net = nn.Sequential(nn.Conv1d(1 + hidden, hidden, 3, padding=1), nn.ReLU(),
                                 nn.Conv1d(hidden, hidden, 1), nn.ReLU())
        self.out = nn.Conv1d(hidden, 2, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, y, mask, cond, reverse=False):
        other = y[:, 1 - self.target: 2 - self.target]
        h = self.net(torch.cat([other, cond], 1) * mask) * mask
        raw_s, t = self.out(h).chunk(2, dim=1)
        s = 3.0 * torch.tanh(raw_s / 3.0) * mask
        t = t * mask
        yt = y[:, self.target: self.target + 1]
        yt = (yt - t) * torch.exp(-s) if reverse else yt * torch.exp(s) + t
        parts = [yt, y[:, 1:]] if self.target == 0 else [y[:, :1], yt]
        out = torch.cat(parts, 1) * mask
        return out if reverse else (out, s[:, 0])


class StochasticDurationPredictor(nn.Module):
    """Conditional flow over ``[log duration, auxiliary noise]`` per phoneme.

    Flow: conditional elementwise affine, then two couplings (duration channel
    given auxiliary, auxiliary given duration).  Conditioning = detached text
    hiddens plus the speaker embedding.  Targets are dequantized with
    ``d - u``, ``u ~ U[0, 1)``; sampling inverts the flow and rounds up.
    """

    def __init__(self, cfg: TTSConfig):
        super().__init__()
        Hs = cfg.sdp_hidden
        self.pre = nn.Conv1d(cfg.hidden, Hs, 1)
        self.spk = nn.Linear(cfg.speaker_dim, Hs)
        self.ctx = nn.Sequential(nn.Conv1d(Hs, Hs, 3, padding=1), nn.ReLU(), nn.Conv1d(Hs, Hs, 3, padding=1), nn.ReLU())
        self.affine = nn.Conv1d(Hs, 4, 1)
        nn.init.zeros_(self.affine.weight)
        nn.init.zeros_(self.affine.bias)
        self.couplings = nn.ModuleList([ScalarCoupling(0, Hs), ScalarCoupling(1, Hs)])

    def condition(self, h, x_mask, g):
        m_ = x_mask[:, None]
        c = self.pre(h.detach()) + self.spk(g.detach())[:, :, None]
        return self.ctx(c * m_) * m_

    def _forward_flow(self, y, m_, cond):
        mu, logs = self.affine(cond).split(2, dim=1)
        y = (y - mu) * torch.exp(-logs) * m_
        logdet = (-logs * m_).sum(1)
        for c in self.couplings:
            y, ld = c(y, m_, cond)
            logdet = logdet + ld
        return y, logdet

    def nll(self, h, x_mask, g, durations, noise=None, u=None):
        """Per-utterance negative log-likelihood of integer durations (dequantized bound), ``[B]``."""
        m_ = x_mask[:, None]
        cond = self.condition(h, x_mask, g)
        if u is None:
            u = torch.rand_like(durations, dtype=h.dtype)
        if noise is None:
            noise = torch.randn_like(durations, dtype=h.dtype)
        d_cont = (durations.to(h.dtype) - u).clamp_min(1e-4)
        logd = torch.log(d_cont)
        y = torch.stack([logd, noise], 1) * m_
        z, logdet = self._forward_flow(y, m_, cond)
        log_pz = (-0.5 * (LOG_2PI + z ** 2) * m_).sum([1, 2])
        log_p_aux = (-0.5 * (LOG_2PI + noise ** 2) * x_mask).sum(1)
        # density over d rather than log d: subtract the log-Jacobian of exp
        return -(log_pz + (logdet * x_mask).sum(1) - log_p_aux - (logd * x_mask).sum(1))

    def sample_log(self, h, x_mask, g, temperature: float = 1.0):
        m_ = x_mask[:, None]
        cond = self.condition(h, x_mask, g)
        z = torch.randn(h.shape[0], 2, h.shape[2], dtype=h.dtype) * temperature * m_
        for c in reversed(self.couplings):
            z = c(z, m_, cond, reverse=True)
        mu, logs = self.affine(cond).split(2, dim=1)
        y = (z * torch.exp(logs) + mu) * m_
        return y[:, 0]


class Decoder(nn.Module):
    """Transposed-convolution upsampler: ``[B, d_z, Ty] -> [B, Ty * hop]``, tanh-bounded."""

    def __init__(self, cfg: TTSConfig):
        super().__init__()
        C = cfg.decoder_channels
        self.pre = nn.Conv1d(cfg.d_z, C, 7, padding=3)
        self.cond = nn.Linear(cfg.speaker_dim, C)
        self.ups = nn.ModuleList()
        self.res = nn.ModuleList()
        ch = C
        for f in upsample_factors(cfg.hop):
            out = max(ch // 2, 8)
            p = (f + 1) // 2
            self.ups.append(nn.ConvTranspose1d(ch, out, 2 * f, stride=f, padding=p, output_padding=2 * p - f))
            self.res.append(nn.Conv1d(out, out, 3, padding=1))
            ch = out
        self.post = nn.Conv1d(ch, 1, 7, padding=3)

    def forward(self, z, g):
        x = self.pre(z) + self.cond(g)[:, :, None]
        for up, res in zip(self.ups, self.res):
            x = up(F.leaky_relu(x, 0.1))
            x = x + res(F.leaky_relu(x, 0.1))
        return torch.tanh(self.post(F.leaky_relu(x, 0.1)))[:, 0]


class WaveDiscriminator(nn.Module):
    """Small strided-conv critic on raw waveform windows (least-squares GAN).

    Training-only: it is not part of the saved model.
    """

    def __init__(self, channels: int = 16):
        super().__init__()
        layers, c_in = [], 1
        for c_out, stride in ((channels, 4), (2 * channels, 4), (4 * channels, 4), (4 * channels, 1)):
            layers += [nn.Conv1d(c_in, c_out, 15, stride, padding=7), nn.LeakyReLU(0.1)]
            c_in = c_out
        layers.append(nn.Conv1d(c_in, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, wav):
        return self.net(wav[:, None])


class TTSNet(nn.Module):
    def __init__(self, cfg: TTSConfig):
        super().__init__()
        self.cfg = cfg
        self.speaker_emb = nn.Embedding(max(len(cfg.speakers), 1), cfg.speaker_dim)
        self.text_encoder = TextEncoder(cfg)
        self.posterior = PosteriorEncoder(cfg)
        self.flow = FlowStack(cfg.d_z, cfg.flow_hidden, cfg.speaker_dim, cfg.flow_couplings)
        self.sdp = StochasticDurationPredictor(cfg)
        self.decoder = Decoder(cfg)
        self.mel = TorchMel(cfg.sample_rate, cfg.n_fft, cfg.hop, cfg.n_mels)


# ---------------------------------------------------------------------------
# closed-form pieces shared by training and the public helpers


def mas_loglike(prior_m, prior_logs, flowed):
    """Diagonal-Gaussian log-density of every flowed frame under every prior row.

    Shapes ``[Tx, d]``, ``[Tx, d]``, ``[Ty, d]`` -> ``[Tx, Ty]``; a leading batch
    dimension is allowed on all three.  Works on numpy arrays or tensors.
    """
    if not isinstance(flowed, torch.Tensor):
        out = mas_loglike(torch.as_tensor(np.asarray(prior_m, dtype=np.float64)),
                          torch.as_tensor(np.asarray(prior_logs, dtype=np.float64)),
                          torch.as_tensor(np.asarray(flowed, dtype=np.float64)))
        return out.numpy()
    inv_var = torch.exp(-2.0 * prior_logs)  # [..., Tx, d]
    const = (-0.5 * LOG_2PI - prior_logs).sum(-1)  # [..., Tx]
    z = flowed
    # expand the quadratic so the whole matrix comes from three matmuls
    quad = (-0.5 * (z ** 2)) @ inv_var.transpose(-1, -2) + z @ (prior_m * inv_var).transpose(-1, -2) \
        - 0.5 * (prior_m ** 2 * inv_var).sum(-1)[..., None, :]
    return const[..., :, None] + quad.transpose(-1, -2)


def alignment_log_prior(num_text: int, num_frames: int, scale: float = 1.0) -> np.ndarray:
    """Beta-binomial log prior ``[Tx, Ty]`` favouring near-diagonal alignments.

    Column ``j`` is a beta-binomial pmf over text positions with
    ``a = scale * (j + 1)``, ``b = scale * (Ty - j)``, whose mean moves
    linearly from the first to the last position.
    """
    k = np.arange(num_text)[:, None]
    j = np.arange(num_frames)[None, :]
    return betabinom.logpmf(k, num_text - 1, scale * (j + 1), scale * (num_frames - j))


def expand_by_durations(rows, durations):
    """Repeat row ``i`` ``durations[i]`` times (numpy arrays or tensors, ``[Tx, d] -> [sum d, d]``)."""
    d = np.asarray(durations.cpu() if isinstance(durations, torch.Tensor) else durations).astype(np.int64).reshape(-1)
    n_rows = rows.shape[0]
    if d.size != n_rows:
        raise ValueError(f"{d.size} durations for {n_rows} rows")
    if np.any(d < 1):
        raise ValueError("durations must all be >= 1")
    if isinstance(rows, torch.Tensor):
        return torch.repeat_interleave(rows, torch.from_numpy(d), dim=0)
    return np.repeat(np.asarray(rows), d, axis=0)


def kl_term(prior_m, prior_logs, post_m, post_logs, alignment: AlignmentPath | Sequence[int] | None = None):
    """Mean per-frame ``KL(N(post) || N(prior[aligned row]))`` for diagonal Gaussians.

    Prior arrays are ``[Tx, d]``; posterior arrays ``[Ty, d]``.  The prior is
    expanded along ``alignment`` (an :class:`AlignmentPath` or per-row
    durations); with ``alignment=None`` rows are paired one-to-one.
    """
    as_np = not isinstance(prior_m, torch.Tensor)
    t = (lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))) if as_np else (lambda a: a)
    pm, pl, qm, ql = t(prior_m), t(prior_logs), t(post_m), t(post_logs)
    if alignment is not None:
        if isinstance(alignment, AlignmentPath):
            idx = torch.from_numpy(alignment.assignment - 1)
        else:
            idx = torch.from_numpy(np.repeat(np.arange(pm.shape[0]), np.asarray(alignment, dtype=np.int64)))
        pm, pl = pm[idx], pl[idx]
    kl = pl - ql - 0.5 + 0.5 * (torch.exp(2.0 * ql) + (qm - pm) ** 2) * torch.exp(-2.0 * pl)
    out = kl.sum(-1).mean()
    return float(out) if as_np else out


# ---------------------------------------------------------------------------


@dataclass
class TTSExample:
    utt_id: str
    tokens: list[int]
    mel: np.ndarray  # [Ty, n_mels]
    waveform: np.ndarray  # Ty * hop samples
    speaker: int


@dataclass
class TTS:
    config: TTSConfig
    net: TTSNet
    lexicon: Lexicon
    step: int = 0

    @classmethod
    def initialize(cls, config: TTSConfig, lexicon: Lexicon) -> "TTS":
        if not config.alphabet:
            config.alphabet = TokenAlphabet.for_tts(lexicon.phoneme_set).tokens
        if not config.speakers:
            raise ValueError("a TTS model needs at least one speaker")
        lexicon.check_alphabet(TokenAlphabet(config.alphabet, 0))
        torch.manual_seed(config.seed)
        return cls(config, TTSNet(config), lexicon)

    @property
    def alphabet(self) -> TokenAlphabet:
        return TokenAlphabet(self.config.alphabet, 0)

    @property
    def hop(self) -> int:
        return self.config.hop

    def speaker_index(self, speaker: str) -> int:
        try:
            return self.config.speakers.index(speaker)
        except ValueError:
            raise ValueError(f"unknown speaker {speaker!r}; known: {list(self.config.speakers)}") from None

    def speaker_table(self) -> dict[str, np.ndarray]:
        w = self.net.speaker_emb.weight.detach().numpy()
        return {s: w[i].copy() for i, s in enumerate(self.config.speakers)}

    def _g(self, speaker: str) -> torch.Tensor:
        return self.net.speaker_emb(torch.tensor([self.speaker_index(speaker)]))

    def phonemize(self, text: str) -> PhonemeSequence:
        return phonemize(normalize_text(text), self.lexicon)

    def token_ids(self, phonemes: PhonemeSequence | Sequence[str]) -> list[int]:
        tokens = phonemes.tokens if isinstance(phonemes, PhonemeSequence) else tuple(phonemes)
        if not tokens:
            raise ValueError("empty phoneme sequence")
        return self.alphabet.encode(tokens)

    # -- component helpers (eval mode, numpy in/out) -------------------------

    @torch.no_grad()
    def prior_encode(self, phonemes, speaker: str):
        """Returns ``(m, logs, hiddens)`` each ``[Tx, *]``."""
        self.net.eval()
        ids = torch.tensor([self.token_ids(phonemes)])
        mask = torch.ones(1, ids.shape[1])
        h, m, logs = self.net.text_encoder(ids, mask, self._g(speaker))
        return m[0].T.numpy(), logs[0].T.numpy(), h[0].T.numpy()

    @torch.no_grad()
    def posterior_encode(self, mel: np.ndarray, speaker: str):
        self.net.eval()
        x = torch.from_numpy(np.asarray(mel, dtype=np.float32).T[None])
        m, logs = self.net.posterior(x, torch.ones(1, x.shape[2]), self._g(speaker))
        return m[0].T.numpy(), logs[0].T.numpy()

    @torch.no_grad()
    def flow_forward(self, z: np.ndarray, speaker: str):
        """``[Ty, d_z] -> (f(z), total log|det J|)``."""
        self.net.eval()
        x = torch.as_tensor(np.asarray(z)).T[None].float()
        u, ld = self.net.flow(x, torch.ones(1, x.shape[2]), self._g(speaker))
        return u[0].T.numpy(), float(ld.sum())

    @torch.no_grad()
    def flow_inverse(self, u: np.ndarray, speaker: str) -> np.ndarray:
        self.net.eval()
        x = torch.as_tensor(np.asarray(u)).T[None].float()
        return self.net.flow.inverse(x, torch.ones(1, x.shape[2]), self._g(speaker))[0].T.numpy()

    @torch.no_grad()
    def sdp_sample(self, hiddens: np.ndarray, speaker: str, temperature: float = 0.0, seed: int | None = None) -> np.ndarray:
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        self.net.eval()
        h = torch.from_numpy(np.asarray(hiddens, dtype=np.float32).T[None])
        if seed is not None:
            torch.manual_seed(seed)
        logd = self.net.sdp.sample_log(h, torch.ones(1, h.shape[2]), self._g(speaker), temperature)
        d = torch.ceil(torch.exp(logd[0]).clamp(max=1e4)).clamp_min(1)
        return d.numpy().astype(np.int64)

    @torch.no_grad()
    def sdp_loss(self, hiddens: np.ndarray, durations: Sequence[int], speaker: str, seed: int = 0) -> float:
        self.net.eval()
        torch.manual_seed(seed)
        h = torch.from_numpy(np.asarray(hiddens, dtype=np.float32).T[None])
        d = torch.as_tensor(np.asarray(durations, dtype=np.float32))[None]
        nll = self.net.sdp.nll(h, torch.ones(1, h.shape[2]), self._g(speaker), d)
        return float(nll[0]) / h.shape[2]

    @torch.no_grad()
    def decode_waveform(self, latents: np.ndarray, speaker: str) -> np.ndarray:
        self.net.eval()
        z = torch.as_tensor(np.asarray(latents)).T[None].float()
        return self.net.decoder(z, self._g(speaker))[0].double().numpy()

    # -- end-to-end ----------------------------------------------------------

    def predict_durations(self, phonemes, speaker: str, temperature: float = 0.0, seed: int | None = None) -> np.ndarray:
        _, _, h = self.prior_encode(phonemes, speaker)
        return self.sdp_sample(h, speaker, temperature, seed)

    def synthesize(self, phonemes, speaker: str, durations: Sequence[int] | None = None,
                   temperature: float = 0.0, noise_scale: float | None = None, seed: int | None = None):
        """prior -> (durations) -> expand -> inverse flow -> decoder.  Returns ``(waveform, durations)``."""
        m, logs, h = self.prior_encode(phonemes, speaker)
        if durations is None:
            durations = self.sdp_sample(h, speaker, temperature, seed)
        durations = np.asarray(durations, dtype=np.int64)
        m_e = expand_by_durations(m, durations)
        logs_e = expand_by_durations(logs, durations)
        scale = temperature if noise_scale is None else noise_scale
        rng = np.random.default_rng(seed)
        z_p = m_e + (rng.standard_normal(m_e.shape) * np.exp(logs_e) * scale if scale > 0 else 0.0)
        z = self.flow_inverse(z_p.astype(np.float32), speaker)
        wav = self.decode_waveform(z, speaker)
        return wav, durations

    def mel(self, waveform: np.ndarray) -> np.ndarray:
        c = self.config
        return mel_spectrogram(waveform, c.sample_rate, c.n_fft, c.hop, c.n_mels, pad=(c.n_fft - c.hop) // 2)

    # -- persistence ---------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        extras = {"lexicon": self.lexicon.to_lines(), "lexicon_source": self.lexicon.source}
        return Checkpoint("tts", self.config.to_dict(), dict(self.net.state_dict()), self.step,
                          encode_rng_state(), extras)

    def save(self, path: str | Path) -> Path:
        return self.to_checkpoint().save(path)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TTS":
        if ckpt.kind != "tts":
            raise ValueError(f"expected a tts checkpoint, got {ckpt.kind!r}")
        cfg = TTSConfig(**ckpt.config)
        lex = Lexicon(source=ckpt.extras.get("lexicon_source", "checkpoint"))
        for line in ckpt.extras["lexicon"]:
            word, *prons = line.split()
            lex.add(word, prons)
        net = TTSNet(cfg)
        net.load_state_dict(ckpt.state_dict)
        net.eval()
        return cls(cfg, net, lex, ckpt.step)

    @classmethod
    def load(cls, path: str | Path) -> "TTS":
        return cls.from_checkpoint(Checkpoint.load(path))


# ---------------------------------------------------------------------------
# training


def build_tts_examples(manifest: Manifest, model: TTS, split: str = "train",
                       speakers: Sequence[str] | None = None) -> list[TTSExample]:
    c = model.config
    out = []
    for entry in manifest.split(split):
        if speakers is not None and entry.speaker_id not in speakers:
            continue
        if entry.speaker_id not in c.speakers:
            continue
        try:
            phon = model.phonemize(entry.transcript)
        except OOVError as exc:
            raise TrainingAbort(entry.utt_id, str(exc)) from None
        utt = manifest.load_utterance(entry)
        if utt.sample_rate != c.sample_rate:
            raise TrainingAbort(entry.utt_id, f"sample rate {utt.sample_rate} != {c.sample_rate}")
        n = (utt.waveform.size // c.hop) * c.hop
        wav = utt.waveform[:n]
        mel = model.mel(wav).astype(np.float32)
        tokens = model.token_ids(phon)
        if mel.shape[0] < len(tokens):
            raise TrainingAbort(entry.utt_id, f"{len(tokens)} tokens but only {mel.shape[0]} mel frames")
        out.append(TTSExample(entry.utt_id, tokens, mel, wav.astype(np.float32), model.speaker_index(entry.speaker_id)))
    return out


def _pad_batch(examples: Sequence[TTSExample]):
    B = len(examples)
    x_len = torch.tensor([len(e.tokens) for e in examples])
    y_len = torch.tensor([e.mel.shape[0] for e in examples])
    Tx, Ty = int(x_len.max()), int(y_len.max())
    n_mels = examples[0].mel.shape[1]
    hop = examples[0].waveform.size // examples[0].mel.shape[0]
    tokens = torch.zeros(B, Tx, dtype=torch.long)
    mel = torch.zeros(B, n_mels, Ty)
    wav = torch.zeros(B, Ty * hop)
    for b, e in enumerate(examples):
        tokens[b, : len(e.tokens)] = torch.tensor(e.tokens)
        mel[b, :, : e.mel.shape[0]] = torch.from_numpy(e.mel.T)
        wav[b, : e.waveform.size] = torch.from_numpy(e.waveform)
    spk = torch.tensor([e.speaker for e in examples])
    return tokens, x_len, mel, y_len, wav, spk


@dataclass
class TTSStepOutput:
    recon: torch.Tensor
    kl: torch.Tensor
    dur: torch.Tensor
    total: torch.Tensor
    durations: list[np.ndarray]
    wav_hat: torch.Tensor | None = None  # decoded training window
    wav_real: torch.Tensor | None = None  # matching ground-truth samples


def tts_step(net: TTSNet, batch, cfg: TTSConfig, prior_weight: float = 0.0) -> TTSStepOutput:
    """One ELBO evaluation.  ``prior_weight`` > 0 adds the beta-binomial
    alignment prior to the MAS scores (path choice only; no gradient)."""
    tokens, x_len, mel, y_len, wav, spk = batch
    x_mask = sequence_mask(x_len)
    y_mask = sequence_mask(y_len)
    g = net.speaker_emb(spk)
    h, m_p, logs_p = net.text_encoder(tokens, x_mask, g)
    m_q, logs_q = net.posterior(mel, y_mask, g)
    z = (m_q + torch.randn_like(m_q) * torch.exp(logs_q)) * y_mask[:, None]
    z_p, logdet = net.flow(z, y_mask, g)

    durations = []
    with torch.no_grad():
        ll = mas_loglike(m_p.transpose(1, 2), logs_p.transpose(1, 2), z_p.transpose(1, 2)).double().numpy()
        idx = torch.zeros(len(x_len), int(y_len.max()), dtype=torch.long)
        for b in range(len(x_len)):
            tx, ty = int(x_len[b]), int(y_len[b])
            scores = ll[b, :tx, :ty]
            if prior_weight > 0:
                scores = scores + prior_weight * alignment_log_prior(tx, ty, cfg.align_prior_scale)
            path = monotonic_alignment_search(scores)
            durations.append(alignment_to_durations(path, tx))
            idx[b, :ty] = torch.from_numpy(path.assignment - 1)
    m_e = torch.gather(m_p, 2, idx[:, None, :].expand(-1, m_p.shape[1], -1))
    logs_e = torch.gather(logs_p, 2, idx[:, None, :].expand(-1, logs_p.shape[1], -1))

    # single-sample estimate of KL(q(z|x) || p(z|c)) through the flow
    kl_elem = logs_e - logs_q - 0.5 + 0.5 * (z_p - m_e) ** 2 * torch.exp(-2.0 * logs_e)
    kl_frame = (kl_elem * y_mask[:, None]).sum(1) - logdet
    n_frames = y_mask.sum()
    kl = kl_frame.sum() / n_frames

    # decode a random window per utterance (full utterance if shorter) and
    # compare its mel against the mel of the matching ground-truth samples
    seg = min(cfg.segment_frames, int(y_len.min())) if cfg.segment_frames > 0 else int(y_len.min())
    starts = [int(torch.randint(0, int(y_len[b]) - seg + 1, (1,))) for b in range(len(y_len))]
    z_seg = torch.stack([z[b, :, s: s + seg] for b, s in enumerate(starts)])
    wav_seg = torch.stack([wav[b, s * cfg.hop: (s + seg) * cfg.hop] for b, s in enumerate(starts)])
    wav_hat = net.decoder(z_seg, g)
    recon = (net.mel(wav_hat) - net.mel(wav_seg)).abs().sum() / (seg * len(y_len))

    d = torch.zeros(len(x_len), int(x_len.max()))
    for b, dur in enumerate(durations):
        d[b, : len(dur)] = torch.from_numpy(dur.astype(np.float32))
    dur_nll = net.sdp.nll(h, x_mask, g, d)
    dur = dur_nll.sum() / x_mask.sum()

    total = cfg.recon_weight * recon + cfg.kl_weight * kl + cfg.dur_weight * dur
    return TTSStepOutput(recon, kl, dur, total, durations, wav_hat, wav_seg)


def train_tts(manifest: Manifest, config: TTSConfig, lexicon: Lexicon | None = None,
              speakers: Sequence[str] | None = None, out_dir: str | Path | None = None,
              on_step=None) -> tuple[TTS, list[dict]]:
    """Fit the multi-speaker (or single-speaker) model on the train split.

    ``speakers`` restricts training to a subset; a single entry yields a
    single-speaker model.  ``on_step(step, output)`` is called after every
    update (used by tests to audit MAS durations).
    """
    if lexicon is None:
        lexicon = Lexicon.load(manifest.root / "lexicon.txt")
    if not config.speakers:
        config.speakers = tuple(speakers) if speakers else tuple(manifest.speakers)
    model = TTS.initialize(config, lexicon)
    examples = build_tts_examples(manifest, model, "train", speakers)
    if not examples:
        raise ValueError("manifest has no usable training utterances")
    net = model.net
    opt = torch.optim.AdamW(net.parameters(), lr=config.lr, betas=(0.8, 0.99), weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, config.total_steps) / config.total_steps)) * 0.9 + 0.1)
    order_rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, len(examples))
    queue: list[int] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    prior_steps = config.align_prior_fraction * config.total_steps
    disc = opt_d = None
    if config.adversarial_weight > 0:
        with torch.random.fork_rng():  # keep the model's random stream independent of the flag
            torch.manual_seed(config.seed + 1)
            disc = WaveDiscriminator()
        opt_d = torch.optim.AdamW(disc.parameters(), lr=config.lr, betas=(0.8, 0.99), weight_decay=0.0)
    rows = []
    for step in range(1, config.total_steps + 1):
        if len(queue) < bs:
            queue.extend(order_rng.permutation(len(examples)).tolist())
        batch = [examples[i] for i in queue[:bs]]
        del queue[:bs]
        net.train()
        prior_weight = max(0.0, 1.0 - (step - 1) / prior_steps) if prior_steps > 0 else 0.0
        out = tts_step(net, _pad_batch(batch), config, prior_weight)
        if disc is not None:
            d_loss = ((disc(out.wav_real) - 1) ** 2).mean() + (disc(out.wav_hat.detach()) ** 2).mean()
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            out.total = out.total + config.adversarial_weight * ((disc(out.wav_hat) - 1) ** 2).mean()
        opt.zero_grad()
        out.total.backward()
        gnorm = torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
        vals = [float(v.detach()) for v in (out.recon, out.kl, out.dur, out.total)]
        if not (all(math.isfinite(v) for v in vals) and math.isfinite(float(gnorm))):
            raise FloatingPointError(f"non-finite TTS loss at step {step}: {vals}")
        opt.step()
        sched.step()
        model.step = step
        rows.append({"step": step, "recon": vals[0], "kl": vals[1], "dur": vals[2], "total": vals[3]})
        if on_step is not None:
            on_step(step, out, batch)
        if step % 50 == 0:
            log.info("tts step %d recon %.3f kl %.3f dur %.3f", step, *vals[:3])
        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            model.save(out_dir / f"tts_step{step:06d}.ckpt")
    net.eval()
    if out_dir is not None:
        model.save(out_dir / "tts.ckpt")
        write_tts_log(out_dir / "tts_loss.csv", rows)
    return model, rows


def write_tts_log(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "recon", "kl", "dur", "total"])
        for r in rows:
            w.writerow([r["step"]] + [f"{r[k]:.8g}" for k in ("recon", "kl", "dur", "total")])
