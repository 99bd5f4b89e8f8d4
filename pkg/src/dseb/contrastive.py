"""SimCLR-style view generation and the NT-Xent objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .audio import Waveform, crop_or_pad


@dataclass(frozen=True)
class AugmentationConfig:
    noise_std: float = 0.01
    gain_range: tuple[float, float] = (0.7, 1.3)
    clip_seconds: float = 6.0
    crop_frames: int = 16  # only used for precomputed-feature datasets

    def __post_init__(self):
        low, high = self.gain_range
        if self.noise_std < 0 or not (0 < low <= high):
            raise ValueError("invalid augmentation configuration")


def _augment_one(wav: Waveform, cfg: AugmentationConfig, rng: np.random.Generator) -> Waveform:
    view = crop_or_pad(wav, cfg.clip_seconds, rng)
    # crop -> gain -> noise, always in this order
    gain = rng.uniform(*cfg.gain_range) if cfg.gain_range[0] != cfg.gain_range[1] else cfg.gain_range[0]
    samples = view.samples * gain
    if cfg.noise_std > 0:
        samples = samples + rng.normal(0.0, cfg.noise_std, size=samples.size)
    return Waveform(samples, view.sample_rate)


def augment_pair(wav: Waveform, cfg: AugmentationConfig, rng: np.random.Generator) -> tuple[Waveform, Waveform]:
    return _augment_one(wav, cfg, rng), _augment_one(wav, cfg, rng)


def augment_frames(frames: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Feature-domain analogue of one augmented view for precomputed frame matrices.

    A random contiguous run of ``crop_frames`` frames (zero-padded at the end
    when the input is shorter), scaled by a random gain, plus Gaussian noise.
    """
    t = frames.shape[0]
    n = cfg.crop_frames
    if t >= n:
        start = int(rng.integers(0, t - n + 1))
        view = frames[start:start + n].copy()
    else:
        view = np.zeros((n, frames.shape[1]))
        view[:t] = frames
    gain = rng.uniform(*cfg.gain_range) if cfg.gain_range[0] != cfg.gain_range[1] else cfg.gain_range[0]
    view = view * gain
    if cfg.noise_std > 0:
        view = view + rng.normal(0.0, cfg.noise_std, size=view.shape)
    return view


def _offdiag_index(m: int) -> np.ndarray:
    rows = np.arange(m)[:, None]
    cols = np.arange(m - 1)[None, :]
    cols = cols + (cols >= rows)
    return rows * m + cols


def nt_xent(projections: ad.Tensor, temperature: float = 0.5, unit_tol: float = 1e-6) -> ad.Tensor:
    """NT-Xent over interleaved positive pairs: rows 2i and 2i+1 are partners."""
    m, _ = projections.shape
    if m < 4 or m % 2:
        raise ValueError(f"need an even number of rows >= 4, got {m}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    norms = np.linalg.norm(projections.data, axis=1)
    if np.any(np.abs(norms - 1.0) > unit_tol):
        raise ValueError("nt_xent expects unit-norm rows")
    sim = ad.matmul(projections, projections.T) * (1.0 / temperature)
    logits = ad.take(sim, _offdiag_index(m))
    partner = np.arange(m) ^ 1
    # column of the partner once the self column is dropped
    target = partner - (partner > np.arange(m))
    return ad.softmax_cross_entropy(logits, target)
