"""Baseline contrastive, adversarial and causal-bottleneck training loops.

Random streams are spawned from ``SeedSequence(cfg.seed)`` in a fixed order:
encoder init, projection-head init, adversary init, bottleneck init, batch
order, augmentation. Each consumer owns its stream, so adding a component
(e.g. adversaries) never perturbs the draws of another.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .audio import FrontendConfig
from .contrastive import AugmentationConfig, nt_xent
from .data import UtteranceSet
from .models import (ATTRIBUTES, DEFAULT_CLASSES, Adversaries, CausalBottleneck, Encoder,
                     ProjectionHead, class_weights, covariance_penalty, encode_batch)

log = logging.getLogger(__name__)

MODES = ("baseline", "adversarial", "bottleneck")
LAMBDA_SWEEP = (0.2, 0.5, 1.0, 2.0, 5.0)
K_SWEEP = (32, 64, 76, 88, 100)
LAMBDA_TRIPLES = ((0.01, 0.01, 0.01), (0.1, 0.01, 0.01), (0.5, 0.05, 0.05))
DEFAULT_LR = {"baseline": 1e-4, "adversarial": 1e-4, "bottleneck": 1e-3}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    lambda_adv: float | None = None
    k: int | None = None
    lambda_triple: tuple[float, float, float] | None = None
    learning_rate: float | None = None
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    freeze_encoder: bool | None = None
    temperature: float = 0.5
    covariance_weight: float = 1.0
    hidden: int = 256
    dim: int = 128
    projection_hidden: tuple[int, int] = (128, 128)
    projection_dim: int = 64
    max_grad_norm: float | None = None
    adversary_lr: float | None = None
    unit_adversary_input: bool = True
    augmentation: AugmentationConfig = AugmentationConfig()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode '{self.mode}'")
        if (self.lambda_adv is not None) != (self.mode == "adversarial"):
            raise ValueError("lambda_adv is required for, and only for, adversarial mode")
        bn = self.mode == "bottleneck"
        if (self.k is not None) != bn or (self.lambda_triple is not None) != bn:
            raise ValueError("k and lambda_triple are required for, and only for, bottleneck mode")
        if self.lambda_adv is not None and self.lambda_adv < 0:
            raise ValueError("lambda_adv must be nonnegative")
        if bn and not 0 < self.k < self.dim:
            raise ValueError(f"bottleneck needs 0 < k < d, got k={self.k}, d={self.dim}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    @property
    def lr(self) -> float:
        return DEFAULT_LR[self.mode] if self.learning_rate is None else self.learning_rate

    @property
    def adv_lr(self) -> float:
        return self.lr if self.adversary_lr is None else self.adversary_lr

    @property
    def frozen(self) -> bool:
        return (self.mode == "bottleneck") if self.freeze_encoder is None else self.freeze_encoder

    def lambdas(self) -> dict[str, float]:
        return dict(zip(ATTRIBUTES, self.lambda_triple))


@dataclass
class TrainResult:
    encoder: Encoder
    head: ProjectionHead | None = None
    adversaries: Adversaries | None = None
    bottleneck: CausalBottleneck | None = None
    curves: list[dict[str, float]] = field(default_factory=list)

    def parameters(self) -> dict[str, np.ndarray]:
        out = self.encoder.state_dict()
        if self.bottleneck is not None:
            out.update(self.bottleneck.state_dict())
        return out


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("encoder", "head", "adversary", "bottleneck", "batches", "augment")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def _interleave(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack([a, b], axis=1).reshape(2 * a.shape[0], *a.shape[1:])


def _label_arrays(data: UtteranceSet, classes: dict[str, int]) -> dict[str, np.ndarray]:
    out = {}
    for a in classes:
        y = data.labels.get(a)
        if y is None:
            raise ValueError(f"dataset carries no '{a}' labels")
        bad = np.flatnonzero((y < 0) | (y >= classes[a]))
        if bad.size:
            raise ValueError(f"utterance {data.utterance_ids[bad[0]]} is missing a valid {a} label")
        out[a] = np.asarray(y, dtype=np.int64)
    return out


def new_encoder(cfg: TrainConfig, n_in: int, seed: int | None = None) -> Encoder:
    rng = _streams(cfg.seed if seed is None else seed)["encoder"]
    return Encoder(rng, n_in, cfg.hidden, cfg.dim)


def _step(tape, loss, groups, cfg):
    grads = ad.backward(tape, loss)
    for params, state in groups:
        ad.adam_step(params, {n: grads[p] for n, p in params.items() if p in grads}, state, cfg.max_grad_norm)


def _contrastive_loop(data: UtteranceSet, cfg: TrainConfig, frontend: FrontendConfig,
                      adversarial: bool, classes: dict[str, int]) -> TrainResult:
    rngs = _streams(cfg.seed)
    n_in = data.feature_dim(frontend)
    encoder = Encoder(rngs["encoder"], n_in, cfg.hidden, cfg.dim)
    head = ProjectionHead(rngs["head"], cfg.dim, cfg.projection_hidden, cfg.projection_dim)
    result = TrainResult(encoder, head)
    params = ad.parameters_of(encoder, head)
    groups = [] if adversarial and cfg.frozen else [(params, ad.AdamState(cfg.lr))]
    labels, weights = {}, {}
    if adversarial:
        labels = _label_arrays(data, classes)
        weights = {a: class_weights(labels[a], c) for a, c in classes.items()}
        result.adversaries = Adversaries(rngs["adversary"], cfg.dim, classes)
        groups.append((result.adversaries.named_parameters(), ad.AdamState(cfg.adv_lr)))
    unit = {a: 1.0 for a in classes}
    for epoch in range(cfg.epochs):
        sums = {"loss": 0.0, "ntxent": 0.0, "adversarial": 0.0}
        n_batches = 0
        for idx in _batches(len(data), cfg.batch_size, rngs["batches"]):
            view_a, view_b = data.views(idx, cfg.augmentation, frontend, rngs["augment"])
            try:
                with ad.Tape() as tape:
                    z = encoder(_interleave(view_a, view_b))
                    contrast = nt_xent(ad.l2_normalize(head(z)), cfg.temperature)
                    loss = contrast
                    if adversarial:
                        z_adv = ad.l2_normalize(z) if cfg.unit_adversary_input else z
                        logits = result.adversaries(z_adv, unit)
                        ce = {a: ad.softmax_cross_entropy(logits[a], np.repeat(labels[a][idx], 2), weights[a])
                              for a in classes}
                        adv = sum(ce.values())
                        loss = contrast + adv * cfg.lambda_adv
                        sums["adversarial"] += adv.item()
                        for a, v in ce.items():
                            sums[f"ce_{a}"] = sums.get(f"ce_{a}", 0.0) + v.item()
                _step(tape, loss, groups, cfg)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged("training diverged") from exc
            sums["loss"] += loss.item()
            sums["ntxent"] += contrast.item()
            n_batches += 1
        row = {"epoch": epoch + 1, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        result.curves.append(row)
        log.debug("epoch %d %s", epoch + 1, row)
    return result


def train_baseline(data: UtteranceSet, cfg: TrainConfig, frontend: FrontendConfig = FrontendConfig()) -> TrainResult:
    """Encoder + projection head trained on NT-Xent; keep ``result.encoder`` for evaluation."""
    if cfg.mode != "baseline":
        cfg = replace(cfg, mode="baseline", lambda_adv=None, k=None, lambda_triple=None)
    return _contrastive_loop(data, cfg, frontend, adversarial=False, classes={})


def train_adversarial(data: UtteranceSet, cfg: TrainConfig, frontend: FrontendConfig = FrontendConfig(),
                      classes: dict[str, int] | None = None) -> TrainResult:
    """NT-Xent plus ``lambda_adv`` times the summed adversary cross-entropies.

    Adversaries read ``z`` through a unit gradient-reversal layer; the sweep
    value scales the adversarial loss term.
    """
    if cfg.mode != "adversarial":
        raise ValueError("train_adversarial needs an adversarial TrainConfig")
    return _contrastive_loop(data, cfg, frontend, adversarial=True, classes=dict(classes or DEFAULT_CLASSES))


def train_bottleneck(data: UtteranceSet, encoder: Encoder, cfg: TrainConfig,
                     frontend: FrontendConfig = FrontendConfig(),
                     classes: dict[str, int] | None = None) -> TrainResult:
    """Fit the demo/residual split on top of a pretrained encoder.

    With a frozen encoder, embeddings of the un-augmented training features
    are computed once and the bottleneck is trained on them; otherwise each
    batch is re-encoded from augmented views and a contrastive term on the
    residual branch keeps the encoder speaker-discriminative.
    """
    if cfg.mode != "bottleneck":
        raise ValueError("train_bottleneck needs a bottleneck TrainConfig")
    if cfg.k >= encoder.dim:
        raise ValueError(f"k={cfg.k} must be smaller than the embedding dim {encoder.dim}")
    classes = dict(classes or DEFAULT_CLASSES)
    rngs = _streams(cfg.seed)
    enc = Encoder(np.random.default_rng(0), encoder.n_in, encoder.hidden, encoder.dim)
    enc.load_state_dict(encoder.state_dict())
    bn = CausalBottleneck(rngs["bottleneck"], encoder.dim, cfg.k, classes, cfg.lambdas())
    result = TrainResult(enc, bottleneck=bn)
    labels = _label_arrays(data, classes)
    weights = {a: class_weights(labels[a], c) for a, c in classes.items()}
    adv_params = bn.res_adversaries.named_parameters()
    params = {n: p for n, p in bn.named_parameters().items() if n not in adv_params}
    if not cfg.frozen:
        result.head = ProjectionHead(rngs["head"], encoder.dim - cfg.k, cfg.projection_hidden, cfg.projection_dim)
        params.update(ad.parameters_of(enc, result.head))
        z_all = None
    else:
        z_all = encode_batch(data.eval_frames(frontend, cfg.seed), enc)
    groups = [(params, ad.AdamState(cfg.lr)), (adv_params, ad.AdamState(cfg.adv_lr))]
    for epoch in range(cfg.epochs):
        sums = {"loss": 0.0, "demo": 0.0, "adversarial": 0.0, "covariance": 0.0, "ntxent": 0.0}
        n_batches = 0
        for idx in _batches(len(data), cfg.batch_size, rngs["batches"]):
            if z_all is None:
                view_a, view_b = data.views(idx, cfg.augmentation, frontend, rngs["augment"])
                rows = np.repeat(idx, 2)
            else:
                rows = idx
            try:
                with ad.Tape() as tape:
                    z = ad.Tensor(z_all[idx]) if z_all is not None else enc(_interleave(view_a, view_b))
                    z_demo, z_res, demo_logits, res_logits = bn(z)
                    demo = sum(ad.softmax_cross_entropy(demo_logits[a], labels[a][rows], weights[a]) for a in classes)
                    adv = sum(ad.softmax_cross_entropy(res_logits[a], labels[a][rows], weights[a]) for a in classes)
                    cov = covariance_penalty(z_demo, z_res)
                    loss = demo + adv + cov * cfg.covariance_weight
                    if z_all is None:
                        contrast = nt_xent(ad.l2_normalize(result.head(z_res)), cfg.temperature)
                        loss = loss + contrast
                        sums["ntxent"] += contrast.item()
                _step(tape, loss, groups, cfg)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged("training diverged") from exc
            sums["loss"] += loss.item()
            sums["demo"] += demo.item()
            sums["adversarial"] += adv.item()
            sums["covariance"] += cov.item()
            n_batches += 1
        result.curves.append({"epoch": epoch + 1, **{k: v / max(n_batches, 1) for k, v in sums.items()}})
    return result


def embed(result_or_encoder, frames: np.ndarray, branch: str = "full",
          bottleneck: CausalBottleneck | None = None) -> np.ndarray:
    """Embeddings of ``(N, T, F)`` frames for the full encoder or one bottleneck branch."""
    if isinstance(result_or_encoder, TrainResult):
        encoder, bottleneck = result_or_encoder.encoder, bottleneck or result_or_encoder.bottleneck
    else:
        encoder = result_or_encoder
    z = encode_batch(frames, encoder)
    if branch == "full":
        return z
    if bottleneck is None:
        raise ValueError(f"branch '{branch}' needs a bottleneck")
    z_demo, z_res = bottleneck.branches(z)
    if branch == "demo":
        return z_demo.data
    if branch == "residual":
        return z_res.data
    raise ValueError(f"unknown branch '{branch}'")
