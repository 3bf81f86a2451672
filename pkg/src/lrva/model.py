"""Frozen backbone plus whichever trainable pieces a config switches on."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .adapters import AdapterSet, BottleneckAdapter, ClassifierHead, LowRankDelta
from .backbone import BackboneConfig, ParameterStore, ViTBackbone
from .config import ExperimentConfig
from .domattn import AttentionMapBank
from .errors import ConfigError
from .subkernel import carve, tokenize_finegrained
from .tasks import to_float
from .tensor import Tensor


def backbone_config(cfg: ExperimentConfig) -> BackboneConfig:
    try:
        return BackboneConfig(
            image_size=cfg["backbone.image_size"],
            patch_size=cfg["backbone.patch_size"],
            d_model=cfg["backbone.d_model"],
            n_heads=cfg["backbone.n_heads"],
            n_blocks=cfg["backbone.n_blocks"],
            mlp_ratio=cfg["backbone.mlp_ratio"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


class RetrievalProjection:
    """Trainable d x d map on embeddings, initialised to the identity."""

    def __init__(self, d_model: int, store: ParameterStore):
        self.weight = store.add("head.proj", np.eye(d_model), frozen=False)

    def __call__(self, z: Tensor) -> Tensor:
        return z @ self.weight


class AdaptedModel:
    def __init__(self, cfg: ExperimentConfig, n_classes: Optional[int] = None):
        self.cfg = cfg
        self.kind = cfg["task.kind"]
        bcfg = backbone_config(cfg)
        self.backbone = ViTBackbone(bcfg, seed=cfg["backbone.seed"])
        self.store = ParameterStore()
        self.store.merge(self.backbone.params)
        rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 101]))
        d, L = bcfg.d_model, bcfg.n_blocks

        self.adapters = AdapterSet()
        method = cfg["host.method"]
        if method == "bottleneck":
            for b in range(L):
                self.adapters.bottleneck[b] = BottleneckAdapter(b, d, cfg["host.bottleneck_dim"] or None, rng, self.store)
        elif method == "lowrank":
            for b in range(L):
                self.adapters.lowrank[b] = LowRankDelta(b, d, cfg["host.rank"], rng, self.store)

        self.bank = None
        if cfg["subkernel.enabled"]:
            self.bank = carve(self.backbone.patch_kernel, cfg["subkernel.u"], cfg["subkernel.v"],
                              cfg["subkernel.stride1"], store=self.store)
            # reject sizes whose pooled grid misses the backbone grid up front
            p = bcfg.image_size // cfg["subkernel.u"]
            if bcfg.image_size % cfg["subkernel.u"] or p // 2 != bcfg.grid or p % 2:
                raise ConfigError(f"subkernel.u={cfg['subkernel.u']} gives a {p}x{p} map; 2x2 pooling "
                                  f"needs {2 * bcfg.grid}x{2 * bcfg.grid}")

        if cfg["domattn.enabled"]:
            block = cfg.domattn_block
            if not 0 <= block < L:
                raise ConfigError(f"domattn.block={block} outside [0, {L})")
            if cfg["domattn.C"] < 1:
                raise ConfigError("domattn.C must be >= 1")
            self.adapters.domattn = AttentionMapBank(cfg["domattn.C"], bcfg.grid, block, rng, self.store)

        self.head = None
        if self.kind == "classification":
            if not n_classes:
                raise ConfigError("classification model needs n_classes")
            self.head = ClassifierHead(d, n_classes, self.store)
        elif method == "probe":
            self.head = RetrievalProjection(d, self.store)

    # -- forward ----------------------------------------------------------
    def embed(self, images, normalize: bool = False) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(to_float(images) if images.dtype == np.uint8 else images)
        if self.bank is not None:
            grid = tokenize_finegrained(x, self.bank, self.backbone)
        else:
            grid = self.backbone.tokenize_original(x)
        return self.backbone.forward(grid, self.adapters, normalize=normalize)

    def logits(self, images) -> Tensor:
        if self.kind != "classification":
            raise ConfigError("logits are only defined for classification")
        return self.head(self.embed(images))

    def retrieval_embedding(self, images) -> Tensor:
        z = self.embed(images)
        if self.head is not None:
            z = self.head(z)
        return T.l2_normalize(z, -1)

    # -- bookkeeping ------------------------------------------------------
    def trainable_counts(self) -> dict:
        groups = {"subkernel": "subkernel.", "domattn": "domattn.", "host": "host.", "head": "head."}
        counts = {k: self.store.count(p) for k, p in groups.items()}
        counts["total"] = self.store.count("")
        return counts

    def frozen_count(self) -> int:
        return self.store.count("", frozen=True)
