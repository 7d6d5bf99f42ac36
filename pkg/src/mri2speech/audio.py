"""Log-mel analysis (numpy reference; a torch twin lives in :mod:`mri2speech.tts`)."""

from __future__ import annotations

import numpy as np

DEFAULT_LOG_FLOOR = 1e-5


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(sample_rate: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """``n_mels + 2`` equally mel-spaced frequencies; band k peaks at ``edges[k + 1]``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_centers(sample_rate: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    return mel_band_edges(sample_rate, n_mels, fmin, fmax)[1:-1]


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular (HTK-scale, unit-peak) filters, shape ``[n_mels, n_fft // 2 + 1]``."""
    edges = mel_band_edges(sample_rate, n_mels, fmin, fmax)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(length: int, n_fft: int, hop: int, pad: int = 0) -> int:
    return 1 + (length + 2 * pad - n_fft) // hop


def mel_spectrogram(waveform, sample_rate: int, n_fft: int = 1024, hop: int = 256, n_mels: int = 80,
                    fmin: float = 0.0, fmax: float | None = None, log_floor: float = DEFAULT_LOG_FLOOR,
                    power: float = 1.0, pad: int = 0) -> np.ndarray:
    """Natural-log mel spectrogram, shape ``[frames, n_mels]``.

    Frames are taken without centering, so ``frames = 1 + (len + 2*pad - n_fft) // hop``.
    ``pad`` reflect-pads both ends; ``pad = (n_fft - hop) // 2`` yields exactly
    ``len / hop`` frames for hop-aligned signals.  ``power=1`` gives magnitudes,
    ``power=2`` energies.  Values are clamped below at ``log(log_floor)``.
    """
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if n_mels < 8:
        raise ValueError(f"n_mels must be >= 8, got {n_mels}")
    if pad:
        if x.size <= pad:
            raise ValueError(f"waveform of {x.size} samples too short to pad by {pad}")
        x = np.pad(x, pad, mode="reflect")
    if x.size < n_fft:
        raise ValueError(f"waveform of {x.size} samples is shorter than n_fft={n_fft}")
    n = 1 + (x.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n)[:, None]
    window = np.hanning(n_fft + 1)[:-1]
    spec = np.abs(np.fft.rfft(x[idx] * window, axis=1)) ** power
    mel = spec @ mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax).T
    return np.log(np.maximum(mel, log_floor))
