"""Experiment configuration: flat ``key = value`` lines with dotted section prefixes.

Example::

    seed = 0
    out = runs/synth
    dataset.source = synth
    synth.n_speakers = 200
    train.epochs = 40
    sweep.lambdas = 0.2, 1.0, 5.0
    sweep.triples = 0.5/0.05/0.05
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .audio import FrontendConfig
from .contrastive import AugmentationConfig
from .probes import ProbeConfig
from .synth import SynthConfig
from .training import K_SWEEP, LAMBDA_SWEEP, LAMBDA_TRIPLES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synth"  # or "manifest"
    manifest: str = ""
    audio_dir: str = ""
    age_schema: str = "decade_labels"
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class SweepConfig:
    lambdas: tuple[float, ...] = LAMBDA_SWEEP
    ks: tuple[int, ...] = K_SWEEP
    triples: tuple[tuple[float, float, float], ...] = LAMBDA_TRIPLES


@dataclass(frozen=True)
class VerifyConfig:
    impostor_ratio: float = 1.0
    max_pairs_per_speaker: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "dseb_out"
    dataset: DatasetConfig = DatasetConfig()
    synth: SynthConfig = SynthConfig()
    frontend: FrontendConfig = FrontendConfig()
    train: TrainConfig = TrainConfig()
    augment: AugmentationConfig = AugmentationConfig()
    sweep: SweepConfig = SweepConfig()
    probe: ProbeConfig = ProbeConfig()
    verify: VerifyConfig = VerifyConfig()
    source_text: str = field(default="", compare=False)

    def train_config(self, **overrides) -> TrainConfig:
        return dataclasses.replace(self.train, augmentation=self.augment, seed=self.seed, **overrides)


_SECTIONS = {f.name for f in dataclasses.fields(ExperimentConfig)
             if dataclasses.is_dataclass(f.default)}


def _coerce(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    text = text.strip()
    try:
        if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
            if text.lower() in ("", "none"):
                return None
            return _coerce(text, next(a for a in args if a is not type(None)), key)
        if hint is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if hint in (int, float, str):
            return hint(text)
        if origin is tuple:
            if len(args) == 2 and args[1] is Ellipsis:
                inner = args[0]
                if typing.get_origin(inner) is tuple:
                    parts = [p for p in text.split(";") if p.strip()]
                    return tuple(_coerce(p.replace("/", ","), inner, key) for p in parts)
                return tuple(_coerce(p, inner, key) for p in text.split(",") if p.strip())
            parts = [p for p in text.split(",")]
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_coerce(p, a, key) for p, a in zip(parts, args))
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"bad value for '{key}': {text!r} ({exc})") from None
    raise ConfigError(f"unsupported type for '{key}'")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse config text; unknown keys and malformed lines are errors with line numbers."""
    top: dict = {}
    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    exp_hints = _hints(ExperimentConfig)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section '{section}'")
            cls = type(getattr(ExperimentConfig, section))
            hints = _hints(cls)
            if name not in hints:
                raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
            sections[section][name] = _coerce(value, hints[name], key)
        else:
            if key not in ("seed", "out"):
                raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
            top[key] = _coerce(value, exp_hints[key], key)
    built = {}
    try:
        for section, values in sections.items():
            built[section] = dataclasses.replace(getattr(ExperimentConfig, section), **values)
        cfg = ExperimentConfig(**top, **built, source_text=text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cfg.dataset.source not in ("synth", "manifest"):
        raise ConfigError(f"{source}: dataset.source must be 'synth' or 'manifest'")
    if cfg.dataset.source == "manifest" and not cfg.dataset.manifest:
        raise ConfigError(f"{source}: dataset.manifest is required for manifest datasets")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text, str(path))
    if cfg.dataset.source == "manifest":
        ds = cfg.dataset
        base = path.parent
        fix = lambda p: str(p if not p or Path(p).is_absolute() else base / p)  # noqa: E731
        cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(ds, manifest=fix(ds.manifest),
                                                                   audio_dir=fix(ds.audio_dir)))
    return cfg


def _format(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join("/".join(_format(v) for v in t) for t in value)
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(dump_config(c)) == c``."""
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}"]
    for section in sorted(_SECTIONS):
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                continue
            lines.append(f"{section}.{f.name} = {_format(value)}")
    return "\n".join(lines) + "\n"
