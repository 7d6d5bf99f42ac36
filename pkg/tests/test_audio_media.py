import numpy as np
import pytest

from mri2speech.audio import hz_to_mel, mel_centers, mel_filterbank, mel_spectrogram, mel_to_hz, num_frames
from mri2speech.media import read_clip, read_wav, write_clip, write_wav


def test_mel_scale_round_trip():
    f = np.array([0.0, 100.0, 1000.0, 8000.0])
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f)
    assert hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.1)


def test_filterbank_shape_and_peaks():
    fb = mel_filterbank(16000, 1024, 80)
    assert fb.shape == (80, 513)
    assert fb.max() <= 1.0 and fb.min() >= 0.0
    assert np.all(fb.sum(axis=1) > 0)


def test_frame_count_contract():
    wav = np.zeros(16000)
    assert mel_spectrogram(wav, 16000).shape == (num_frames(16000, 1024, 256), 80)
    assert mel_spectrogram(wav, 16000).shape[0] == 59
    # hop-aligned signal with (n_fft - hop) // 2 reflect padding: exactly len / hop frames
    assert mel_spectrogram(np.zeros(256 * 40), 16000, pad=384).shape == (40, 80)


def test_silence_hits_the_floor():
    m = mel_spectrogram(np.zeros(4096), 16000)
    assert np.allclose(m, np.log(1e-5))


def test_tone_peaks_in_the_right_band():
    sr = 16000
    t = np.arange(sr) / sr
    m = mel_spectrogram(0.5 * np.sin(2 * np.pi * 1000 * t), sr)
    band = int(np.argmax(m.mean(axis=0)))
    centers = mel_centers(sr, 80)
    assert abs(centers[band] - 1000) < 60


def test_mel_errors():
    with pytest.raises(ValueError):
        mel_spectrogram(np.zeros(100), 16000)
    with pytest.raises(ValueError):
        mel_spectrogram(np.zeros(4096), 16000, n_mels=4)


def test_clip_round_trip(tmp_path, rng):
    frames = rng.random((5, 12, 10)).astype(np.float32)
    write_clip(tmp_path / "a.clip", frames, 23.5)
    back, fps = read_clip(tmp_path / "a.clip")
    assert fps == 23.5 and back.dtype == np.float32
    assert np.array_equal(back, frames)


def test_clip_corruption(tmp_path, rng):
    write_clip(tmp_path / "a.clip", rng.random((2, 8, 8)), 25)
    data = (tmp_path / "a.clip").read_bytes()
    (tmp_path / "b.clip").write_bytes(data[:-4])
    with pytest.raises(OSError):
        read_clip(tmp_path / "b.clip")
    (tmp_path / "c.clip").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(OSError):
        read_clip(tmp_path / "c.clip")


def test_wav_round_trip(tmp_path, rng):
    x = rng.uniform(-0.9, 0.9, 1000)
    write_wav(tmp_path / "a.wav", x, 16000)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 16000 and y.size == 1000
    assert np.max(np.abs(x - y)) < 1.0 / 32767 + 1e-12
