"""Post-hoc demographic probes on frozen embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import MLP, class_weights


@dataclass(frozen=True)
class ProbeConfig:
    kind: str = "linear"  # "linear" or "mlp"
    hidden: int = 128
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 64
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    bootstrap_resamples: int = 1000
    standardize: bool = True

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown probe kind '{self.kind}'")


@dataclass
class Probe:
    net: MLP
    n_classes: int
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        x = (np.asarray(embeddings, dtype=np.float64) - self.mean) / self.scale
        return self.net(ad.Tensor(x)).data

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.logits(embeddings), axis=1)


@dataclass
class ProbeReport:
    attribute: str
    split: str
    point_accuracy: float
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    mean: float = float("nan")
    std: float = float("nan")
    n_eval: int = 0
    extra: dict = field(default_factory=dict)


def train_probe(embeddings: np.ndarray, labels, cfg: ProbeConfig = ProbeConfig(), seed: int = 0,
                n_classes: int | None = None) -> Probe:
    """Class-weighted cross-entropy probe trained by plain mini-batch SGD."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 0
    counts = np.bincount(y, minlength=n_classes)
    missing = [c for c in range(n_classes) if counts[c] == 0]
    if missing or n_classes < 2:
        raise ValueError(f"probe training split lacks classes {missing or list(range(n_classes))}")
    rng = np.random.default_rng(seed)
    if cfg.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        mean, scale = np.zeros(x.shape[1]), np.ones(x.shape[1])
    xs = (x - mean) / scale
    sizes = [x.shape[1], n_classes] if cfg.kind == "linear" else [x.shape[1], cfg.hidden, n_classes]
    net = MLP(rng, sizes, "probe")
    weights = class_weights(y, n_classes)
    params = net.named_parameters()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with ad.Tape() as tape:
                loss = ad.softmax_cross_entropy(net(ad.Tensor(xs[idx])), y[idx], weights)
            grads = ad.backward(tape, loss)
            for p in params.values():
                p.data = p.data - cfg.learning_rate * grads[p]
    return Probe(net, n_classes, mean, scale)


def evaluate_probe(probe: Probe, embeddings: np.ndarray, labels) -> float:
    y = np.asarray(labels)
    return float(np.mean(probe.predict(embeddings) == y)) if y.size else float("nan")


def bootstrap_ci(predictions, labels, resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of accuracy."""
    correct = (np.asarray(predictions) == np.asarray(labels)).astype(np.float64)
    n = correct.size
    if n < 10:
        raise ValueError("too few samples for bootstrap")
    rng = np.random.default_rng(seed)
    accs = np.empty(resamples)
    for start in range(0, resamples, 100):
        stop = min(start + 100, resamples)
        accs[start:stop] = correct[rng.integers(0, n, size=(stop - start, n))].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(accs, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)


def mlp_probe_sweep(train_x, train_y, eval_x, eval_y, cfg: ProbeConfig, seeds=None,
                    n_classes: int | None = None) -> tuple[float, float, list[float]]:
    """Mean and population std of held-out accuracy over one MLP probe per seed."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    mlp_cfg = ProbeConfig(**{**cfg.__dict__, "kind": "mlp"})
    accs = [evaluate_probe(train_probe(train_x, train_y, mlp_cfg, s, n_classes), eval_x, eval_y) for s in seeds]
    return float(np.mean(accs)), float(np.std(accs)), accs


def probe_attribute(attribute: str, train_x, train_y, evals: dict[str, tuple[np.ndarray, np.ndarray]],
                    cfg: ProbeConfig, n_classes: int, seed: int = 0) -> list[ProbeReport]:
    """Linear probe with bootstrap CI plus the MLP seed sweep, one report per eval split."""
    lin_cfg = ProbeConfig(**{**cfg.__dict__, "kind": "linear"})
    linear = train_probe(train_x, train_y, lin_cfg, seed, n_classes)
    mlp_cfg = ProbeConfig(**{**cfg.__dict__, "kind": "mlp"})
    mlps = [train_probe(train_x, train_y, mlp_cfg, s, n_classes) for s in cfg.seeds]
    reports = []
    for split, (x, y) in evals.items():
        pred = linear.predict(x)
        acc = float(np.mean(pred == y))
        low, high = bootstrap_ci(pred, y, cfg.bootstrap_resamples, seed=seed) if len(y) >= 10 else (acc, acc)
        mlp_accs = [evaluate_probe(p, x, y) for p in mlps]
        reports.append(ProbeReport(attribute, split, acc, low, high,
                                   float(np.mean(mlp_accs)), float(np.std(mlp_accs)), len(y)))
    return reports
