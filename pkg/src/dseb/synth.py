"""Synthetic speaker datasets with planted demographic structure.

Gender is planted along one fixed direction (linearly recoverable). Age is
either a signed offset along a second direction or, with ``nonlinear_age``,
the radius of concentric shells in a 2-D plane, which no hyperplane can
separate. Accent is a weak offset towards one of five cluster directions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Waveform
from .data import UtteranceSet


@dataclass(frozen=True)
class SynthConfig:
    n_speakers: int = 200
    utterances_per_speaker: int = 4
    feature_dim: int = 64
    gender_direction_strength: float = 3.0
    age_structure_strength: float = 3.0
    accent_structure_strength: float = 1.0
    nonlinear_age: bool = True
    seed: int = 0
    speaker_std: float = 1.0
    noise_std: float = 1.0
    n_frames: int = 20
    frame_noise_std: float = 0.5
    gender_prior: tuple[float, ...] = (0.5, 0.5)
    age_prior: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    accent_prior: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    mode: str = "features"  # or "waveform"
    sample_rate: int = 16000
    clip_seconds: float = 1.0

    def __post_init__(self):
        if self.n_speakers < 4:
            raise ValueError("n_speakers must be at least 4")
        if min(self.gender_direction_strength, self.age_structure_strength,
               self.accent_structure_strength) < 0:
            raise ValueError("structure strengths must be nonnegative")
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be at least 8 to host the planted directions")
        if self.mode not in ("features", "waveform"):
            raise ValueError(f"unknown synth mode '{self.mode}'")


def _structure_basis(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q.T  # rows 0-7: gender, age plane (2), accent (5); the rest span the remainder


def synth_generate(cfg: SynthConfig) -> UtteranceSet:
    root = np.random.SeedSequence(cfg.seed)
    basis_rng, label_rng, speaker_rng, utt_rng, frame_rng = (np.random.default_rng(s) for s in root.spawn(5))
    basis = _structure_basis(basis_rng, cfg.feature_dim)
    u_gender, age_plane, accent_dirs = basis[0], basis[1:3], basis[3:8]

    n = cfg.n_speakers
    gender = label_rng.choice(2, size=n, p=np.asarray(cfg.gender_prior) / sum(cfg.gender_prior))
    age = label_rng.choice(3, size=n, p=np.asarray(cfg.age_prior) / sum(cfg.age_prior))
    accent = label_rng.choice(5, size=n, p=np.asarray(cfg.accent_prior) / sum(cfg.accent_prior))

    centroids = speaker_rng.normal(0.0, cfg.speaker_std, size=(n, cfg.feature_dim))
    centroids += cfg.gender_direction_strength * np.where(gender == 0, -1.0, 1.0)[:, None] * u_gender
    if cfg.nonlinear_age:
        theta = speaker_rng.uniform(0.0, 2 * np.pi, size=n)
        radius = cfg.age_structure_strength * (age + 1.0)
        centroids += (radius * np.cos(theta))[:, None] * age_plane[0] + (radius * np.sin(theta))[:, None] * age_plane[1]
    else:
        centroids += (cfg.age_structure_strength * (age - 1.0))[:, None] * age_plane[0]
    centroids += cfg.accent_structure_strength * accent_dirs[accent]

    u = cfg.utterances_per_speaker
    spk_index = np.repeat(np.arange(n), u)
    vectors = centroids[spk_index] + utt_rng.normal(0.0, cfg.noise_std, size=(n * u, cfg.feature_dim))
    width = len(str(n - 1))
    speaker_ids = [f"spk{i:0{width}d}" for i in spk_index]
    utterance_ids = [f"spk{i:0{width}d}_utt{j}" for i in range(n) for j in range(u)]
    labels = {"gender": gender[spk_index], "age": age[spk_index], "accent": accent[spk_index]}

    if cfg.mode == "features":
        frames = vectors[:, None, :] + frame_rng.normal(0.0, cfg.frame_noise_std,
                                                        size=(n * u, cfg.n_frames, cfg.feature_dim))
        return UtteranceSet(utterance_ids, speaker_ids, labels, frames=frames, vectors=vectors)
    waves = [tone_waveform(basis @ v, cfg, frame_rng) for v in vectors]
    return UtteranceSet(utterance_ids, speaker_ids, labels, waveforms=waves, vectors=vectors)


def tone_waveform(coords: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> Waveform:
    """Harmonic tone complex driven by an utterance's structure coordinates.

    The fundamental tracks the gender coordinate and harmonic amplitudes
    follow the following coordinates; every partial stays below Nyquist.
    """
    sr = cfg.sample_rate
    t = np.arange(int(round(cfg.clip_seconds * sr))) / sr
    f0 = 160.0 + 25.0 * np.tanh(coords[0] / 3.0) + 5.0 * rng.normal()
    n_harm = 12
    env = 1.0 / (1.0 + np.exp(-coords[1:1 + n_harm]))
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    out = np.zeros_like(t)
    for h in range(n_harm):
        f = f0 * (h + 1)
        if f < sr / 2:
            out += env[h] / (h + 1) * np.sin(2 * np.pi * f * t + phases[h])
    out += 0.01 * rng.normal(size=t.size)
    return Waveform(0.5 * out / max(np.abs(out).max(), 1e-9), sr)
