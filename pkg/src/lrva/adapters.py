"""Host transfer-learning parameters: bottleneck adapters, low-rank deltas
and a linear classification head."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .backbone import ParameterStore
from .optim import Adam
from .tensor import Tensor


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


class BottleneckAdapter:
    """Parallel residual branch next to a block's MLP:
    ``x + scale * gelu(x @ down) @ up``.  ``up`` starts at zero, so the
    adapter is an exact identity until trained."""

    def __init__(self, block: int, d_model: int, d_bottleneck: Optional[int], rng: np.random.Generator,
                 store: ParameterStore, init_scale: float = 1.0):
        d_b = d_bottleneck or max(1, d_model // 4)
        prefix = f"host.bottleneck.{block}."
        self.block = block
        self.down = store.add(prefix + "down", _f32(rng.standard_normal((d_model, d_b)) * d_model**-0.5), frozen=False)
        self.up = store.add(prefix + "up", np.zeros((d_b, d_model)), frozen=False)
        self.scale = store.add(prefix + "scale", np.asarray(init_scale, dtype=np.float64), frozen=False)

    @staticmethod
    def n_params(d_model: int, d_bottleneck: int) -> int:
        return 2 * d_model * d_bottleneck + 1

    def adapt(self, x: Tensor) -> Tensor:
        # gelu as the smooth ramp; zero-preserving so up=0 gives exact identity
        branch = T.gelu(x @ self.down) @ self.up
        return x + branch * self.scale


class LowRankDelta:
    """LoRA-style additive update on a block's fused qkv projection."""

    def __init__(self, block: int, d_model: int, rank: int, rng: np.random.Generator, store: ParameterStore,
                 scale: float = 1.0):
        prefix = f"host.lowrank.{block}."
        self.block = block
        self.scale = scale
        self.a = store.add(prefix + "a", _f32(rng.standard_normal((d_model, rank)) * d_model**-0.5), frozen=False)
        self.b = store.add(prefix + "b", np.zeros((rank, 3 * d_model)), frozen=False)

    @staticmethod
    def n_params(d_model: int, rank: int) -> int:
        return d_model * rank + rank * 3 * d_model

    def delta(self, x: Tensor, base: Tensor) -> Tensor:
        return base + ((x @ self.a) @ self.b) * self.scale


class ClassifierHead:
    """Single affine layer over embeddings; zero-initialised."""

    def __init__(self, d_model: int, n_classes: int, store: ParameterStore, prefix: str = "head."):
        self.n_classes = n_classes
        self.weight = store.add(prefix + "weight", np.zeros((d_model, n_classes)), frozen=False)
        self.bias = store.add(prefix + "bias", np.zeros(n_classes), frozen=False)

    @staticmethod
    def n_params(d_model: int, n_classes: int) -> int:
        return d_model * n_classes + n_classes

    def __call__(self, features: Tensor) -> Tensor:
        return features @ self.weight + self.bias


def linear_probe(features, labels, n_classes: int, steps: int = 300, lr: float = 1e-2,
                 store: Optional[ParameterStore] = None) -> ClassifierHead:
    """Fit a classifier head on fixed features with softmax cross-entropy."""
    feats = Tensor(np.asarray(features.data if isinstance(features, Tensor) else features))
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    store = store if store is not None else ParameterStore()
    head = ClassifierHead(feats.shape[1], n_classes, store, prefix="probe.")
    opt = Adam([("probe.weight", head.weight), ("probe.bias", head.bias)], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        T.backward(T.cross_entropy(head(feats), labels))
        opt.step()
    return head


class AdapterSet:
    """Everything trainable that hooks into the backbone forward pass."""

    def __init__(self):
        self.bottleneck: dict = {}
        self.lowrank: dict = {}
        self.domattn = None

    def validate(self, n_blocks: int) -> None:
        blocks = list(self.bottleneck) + list(self.lowrank)
        if self.domattn is not None:
            blocks.append(self.domattn.block)
        bad = [b for b in blocks if not 0 <= b < n_blocks]
        if bad:
            raise IndexError(f"adapter block index {bad[0]} out of range [0, {n_blocks})")

    def bottleneck_for(self, block: int):
        return self.bottleneck.get(block)

    def lowrank_for(self, block: int):
        return self.lowrank.get(block)

    def domattn_for(self, block: int):
        if self.domattn is not None and self.domattn.block == block:
            return self.domattn
        return None
