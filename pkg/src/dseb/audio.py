"""Waveform handling and log-mel feature extraction."""
from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    target_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 64
    clip_seconds: float = 6.0
    log_floor: float = 1e-10
    per_band_mvn: bool = False

    def __post_init__(self):
        if not (self.window_ms >= self.hop_ms > 0):
            raise ValueError("need window_ms >= hop_ms > 0")
        if self.n_mels < 1 or self.clip_seconds <= 0 or self.log_floor <= 0:
            raise ValueError("invalid frontend configuration")

    @property
    def window_len(self) -> int:
        return int(round(self.window_ms * self.target_rate / 1000.0))

    @property
    def hop_len(self) -> int:
        return int(round(self.hop_ms * self.target_rate / 1000.0))

    @property
    def n_fft(self) -> int:
        return 1 << (self.window_len - 1).bit_length()


@dataclass(frozen=True)
class LogMelSpectrogram:
    frames: np.ndarray  # (num_frames, n_mels)
    frame_rate: float

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def num_frames(num_samples: int, window_len: int, hop_len: int) -> int:
    if num_samples < window_len:
        return 0
    return 1 + (num_samples - window_len) // hop_len


def resample(wav: Waveform, target_rate: int) -> Waveform:
    """Linear-interpolation resampling onto a ``target_rate`` grid."""
    n = len(wav)
    if n == 0:
        raise ValueError("empty waveform")
    if wav.sample_rate == target_rate:
        return Waveform(wav.samples.copy(), target_rate)
    n_out = max(1, int(round(n * target_rate / wav.sample_rate)))
    t_out = np.arange(n_out) * (wav.sample_rate / target_rate)
    out = np.interp(t_out, np.arange(n), wav.samples)
    return Waveform(out, target_rate)


def crop_or_pad(wav: Waveform, clip_seconds: float, rng: np.random.Generator) -> Waveform:
    """Random crop to, or end-pad with zeros up to, ``clip_seconds``."""
    target = int(round(clip_seconds * wav.sample_rate))
    n = len(wav)
    if n == target:
        return Waveform(wav.samples.copy(), wav.sample_rate)
    if n > target:
        start = int(rng.integers(0, n - target + 1))
        return Waveform(wav.samples[start:start + target].copy(), wav.sample_rate)
    out = np.zeros(target)
    out[:n] = wav.samples
    return Waveform(out, wav.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, sample_rate: int) -> np.ndarray:
    """The ``n_mels + 2`` HTK-mel-spaced edge frequencies from 0 Hz to Nyquist."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))


def mel_band_centers(n_mels: int, sample_rate: int) -> np.ndarray:
    return mel_band_edges(n_mels, sample_rate)[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters with unit peak, shape ``(n_fft // 2 + 1, n_mels)``."""
    edges = mel_band_edges(n_mels, sample_rate)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    f = freqs[:, None]
    rising = (f - lo) / (mid - lo)
    falling = (hi - f) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def hann_window(n: int) -> np.ndarray:
    # periodic form, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def power_spectrogram(samples: np.ndarray, window_len: int, hop_len: int, n_fft: int) -> np.ndarray:
    n = num_frames(samples.size, window_len, hop_len)
    idx = np.arange(window_len)[None, :] + hop_len * np.arange(n)[:, None]
    frames = samples[idx] * hann_window(window_len)
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(wav: Waveform, cfg: FrontendConfig = FrontendConfig()) -> LogMelSpectrogram:
    if wav.sample_rate != cfg.target_rate:
        raise ValueError(f"expected {cfg.target_rate} Hz audio, got {wav.sample_rate} Hz")
    if len(wav) < cfg.window_len:
        raise ValueError("utterance too short")
    power = power_spectrogram(wav.samples, cfg.window_len, cfg.hop_len, cfg.n_fft)
    mel = power @ mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.target_rate)
    return LogMelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg.target_rate / cfg.hop_len)


def mvn_normalize(spec: LogMelSpectrogram, per_band: bool = False, var_floor: float = 1e-8) -> LogMelSpectrogram:
    """Standardize to zero mean, unit population std over the whole utterance.

    With ``per_band`` each mel band is standardized separately. Any scope
    whose std falls below ``var_floor`` maps to zeros.
    """
    x = spec.frames
    axis = 0 if per_band else None
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    safe = np.where(sd < var_floor, 1.0, sd)
    out = np.where(sd < var_floor, 0.0, (x - mu) / safe)
    return LogMelSpectrogram(out, spec.frame_rate)


def extract_features(wav: Waveform, cfg: FrontendConfig, rng: np.random.Generator) -> np.ndarray:
    """Resample, crop/pad and return the normalized log-mel matrix."""
    wav = resample(wav, cfg.target_rate)
    wav = crop_or_pad(wav, cfg.clip_seconds, rng)
    return mvn_normalize(log_mel(wav, cfg), per_band=cfg.per_band_mvn).frames


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM WAV file; multi-channel input is averaged to mono."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        rate = fh.getframerate()
        channels = fh.getnchannels()
        raw = fh.readframes(fh.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return Waveform(data, rate)


def write_wav(path, wav: Waveform) -> None:
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(pcm.tobytes())
