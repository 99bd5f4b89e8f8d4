"""Trainable parameter collections and their forward passes."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ATTRIBUTES = ("gender", "age", "accent")
DEFAULT_CLASSES = {"gender": 2, "age": 3, "accent": 5}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


def zeros(n: int) -> Tensor:
    return ad.parameter(np.zeros(n))


class Module:
    """Named-parameter bookkeeping shared by every model part."""

    prefix = ""

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)


class Encoder(Module):
    """Per-frame MLP, mean+std pooling over time, linear map to the embedding."""

    def __init__(self, rng: np.random.Generator, n_in: int = 64, hidden: int = 256, dim: int = 128):
        self.n_in, self.hidden, self.dim = n_in, hidden, dim
        self.w1, self.b1 = glorot(rng, n_in, hidden), zeros(hidden)
        self.w2, self.b2 = glorot(rng, hidden, hidden), zeros(hidden)
        self.wp, self.bp = glorot(rng, 2 * hidden, dim), zeros(dim)

    def named_parameters(self):
        return {"encoder.w1": self.w1, "encoder.b1": self.b1, "encoder.w2": self.w2,
                "encoder.b2": self.b2, "encoder.wp": self.wp, "encoder.bp": self.bp}

    def frame_transform(self, flat: Tensor) -> Tensor:
        h = ad.relu(ad.linear(flat, self.w1, self.b1))
        return ad.linear(h, self.w2, self.b2)

    def pooled(self, frames) -> Tensor:
        """Pooled statistics (B, 2h) for a batch of frame matrices (B, T, F)."""
        x = ad.as_tensor(frames)
        if x.data.ndim == 2:
            x = x.reshape(1, *x.shape)
        b, t, f = x.shape
        if t < 1:
            raise ValueError("encoder needs at least one frame")
        h = self.frame_transform(x.reshape(b * t, f)).reshape(b, t, self.hidden)
        return ad.concat([h.mean(axis=1), ad.pool_std(h, axis=1)], axis=1)

    def __call__(self, frames) -> Tensor:
        return ad.linear(self.pooled(frames), self.wp, self.bp)


def encode(frames: np.ndarray, enc: Encoder) -> np.ndarray:
    """Embedding vector ``z`` for one (T, F) frame matrix."""
    return enc(np.asarray(frames, dtype=np.float64)[None]).data[0]


def encode_batch(frames: np.ndarray, enc: Encoder, chunk: int = 256) -> np.ndarray:
    out = [enc(frames[i:i + chunk]).data for i in range(0, len(frames), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, enc.dim))


class MLP(Module):
    """Dense layers with ReLU between them (none after the last)."""

    def __init__(self, rng: np.random.Generator, sizes: list[int], name: str):
        self.name = name
        self.weights = [glorot(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        self.biases = [zeros(b) for b in sizes[1:]]

    def named_parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.w{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.linear(x, w, b)
            if i < len(self.weights) - 1:
                x = ad.relu(x)
        return x


class ProjectionHead(MLP):
    def __init__(self, rng, dim: int = 128, hidden: tuple[int, int] = (128, 128), out_dim: int = 64):
        super().__init__(rng, [dim, *hidden, out_dim], "projection")


class Adversaries(Module):
    """One small classifier per attribute, each reading its input through a GRL."""

    def __init__(self, rng, in_dim: int, classes: dict[str, int] | None = None,
                 hidden: int = 64, name: str = "adversary"):
        self.classes = dict(classes or DEFAULT_CLASSES)
        self.heads = {a: MLP(rng, [in_dim, hidden, c], f"{name}.{a}") for a, c in self.classes.items()}

    def named_parameters(self):
        out = {}
        for head in self.heads.values():
            out.update(head.named_parameters())
        return out

    def __call__(self, z: Tensor, lambdas: dict[str, float]) -> dict[str, Tensor]:
        return {a: head(ad.grl(z, lambdas[a])) for a, head in self.heads.items()}


class CausalBottleneck(Module):
    """Split z into a supervised demographic branch and a scrubbed residual branch."""

    def __init__(self, rng, dim: int, k: int, classes: dict[str, int] | None = None,
                 lambdas: dict[str, float] | None = None, adversary_hidden: int = 64):
        if not 0 < k < dim:
            raise ValueError(f"bottleneck needs 0 < k < d, got k={k}, d={dim}")
        self.dim, self.k = dim, k
        self.classes = dict(classes or DEFAULT_CLASSES)
        self.lambdas = dict(lambdas or {a: 0.0 for a in self.classes})
        self.w_demo = glorot(rng, dim, k)
        self.w_res = glorot(rng, dim, dim - k)
        self.demo_heads = {a: MLP(rng, [k, c], f"bottleneck.demo_head.{a}") for a, c in self.classes.items()}
        self.res_adversaries = Adversaries(rng, dim - k, self.classes, adversary_hidden,
                                           name="bottleneck.res_adversary")

    def named_parameters(self):
        out = {"bottleneck.w_demo": self.w_demo, "bottleneck.w_res": self.w_res}
        for head in self.demo_heads.values():
            out.update(head.named_parameters())
        out.update(self.res_adversaries.named_parameters())
        return out

    def branches(self, z) -> tuple[Tensor, Tensor]:
        z = ad.as_tensor(z)
        return ad.matmul(z, self.w_demo), ad.matmul(z, self.w_res)

    def __call__(self, z):
        z_demo, z_res = self.branches(z)
        demo_logits = {a: head(z_demo) for a, head in self.demo_heads.items()}
        res_logits = self.res_adversaries(z_res, self.lambdas)
        return z_demo, z_res, demo_logits, res_logits


def bottleneck_forward(z, bn: CausalBottleneck):
    return bn(z)


def covariance_penalty(z_demo, z_res) -> Tensor:
    """Mean squared entry of the batch cross-covariance between two branches."""
    z_demo, z_res = ad.as_tensor(z_demo), ad.as_tensor(z_res)
    n = z_demo.shape[0]
    if n < 2:
        raise ValueError("covariance penalty needs a batch of at least 2")
    if z_res.shape[0] != n:
        raise ValueError("branch batch sizes differ")
    dc = z_demo - z_demo.mean(axis=0, keepdims=True)
    rc = z_res - z_res.mean(axis=0, keepdims=True)
    cov = ad.matmul(dc.T, rc) * (1.0 / n)
    return ad.square(cov).mean()


def class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse class frequency, rescaled to mean 1 over the classes present."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    w = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    present = counts > 0
    w[present] *= present.sum() / w[present].sum()
    # absent classes never occur as targets; keep them positive for the loss contract
    w[~present] = 1.0
    return w
