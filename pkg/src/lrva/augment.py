"""Generated-data augmentation with label-preserving and label-breaking
samples, plus the memory-bank contrastive loss used for the latter.

A generator perturbs a sample at a diffusion-style strength ``t`` in
``[0, steps]``.  Low strength (``floor(gamma * steps)``) keeps the label;
high strength (``floor(tau * steps)``) breaks it.  Label-breaking images are
re-perturbed at the low strength to form positive pairs.

Real diffusion sampling is not done here.  ``SyntheticGenerator`` perturbs
the generating parameters of the synthetic tasks; ``ManifestGenerator``
reads externally generated images from disk.
"""

from __future__ import annotations

import math
import os
from collections import OrderedDict, deque
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Any, List, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, InvariantViolation
from .tasks import (
    ClassificationDataset,
    MOTIFS,
    RetrievalDataset,
    _decode,
    glyph_classes,
    jitter_glyph,
    jitter_map,
    random_glyph_latent,
    random_map_latent,
    render_glyph,
    render_map,
)
from .tensor import Tensor

PRESERVING, BREAKING, POSITIVE = 0, 1, 2


@dataclass(frozen=True)
class AugmentationConfig:
    gamma: float = 0.3
    tau: float = 0.6
    steps: int = 50
    m: int = 10
    generator_kind: str = "synthetic"
    lam: float = 0.1
    sigma: float = 0.07
    bank_size: int = 100
    preserving: bool = True
    breaking: bool = True
    key_momentum: float = 0.999

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0 and 0.0 < self.tau < 1.0):
            raise ConfigError(f"gamma and tau must lie in (0, 1), got {self.gamma}, {self.tau}")
        if self.gamma >= self.tau:
            raise ConfigError(f"gamma ({self.gamma}) must be below tau ({self.tau})")
        if self.steps < 1 or self.m < 0 or self.bank_size < 0 or self.sigma <= 0:
            raise ConfigError("steps >= 1, m >= 0, bank_size >= 0 and sigma > 0 required")
        if not 0.0 <= self.key_momentum < 1.0:
            raise ConfigError(f"key_momentum must lie in [0, 1), got {self.key_momentum}")
        t_p, t_b = timesteps(self)
        if t_p >= t_b:
            raise ConfigError(f"floor(gamma*steps)={t_p} must be below floor(tau*steps)={t_b}")


def timesteps(cfg: AugmentationConfig) -> tuple:
    """(label-preserving, label-breaking) timesteps."""
    if cfg.gamma >= cfg.tau:
        raise ConfigError(f"gamma ({cfg.gamma}) must be below tau ({cfg.tau})")
    # small epsilon guards against 0.3*50 = 14.999... style float error
    return math.floor(cfg.gamma * cfg.steps + 1e-9), math.floor(cfg.tau * cfg.steps + 1e-9)


@dataclass
class Sample:
    """One training item: an image (classification) or an image pair
    (retrieval), optionally with the latent parameters that generated it."""

    image: np.ndarray
    source_id: int
    latent: Any = None
    gallery: Optional[np.ndarray] = None
    stem: Optional[str] = None


@dataclass
class AugmentedPair:
    anchor: np.ndarray  # label-breaking augmentation
    positive: np.ndarray  # anchor re-augmented at the label-preserving strength
    source_id: int


def item_rng(seed: int, source_id: int, kind: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 303, int(source_id), kind, int(index)]))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


class GlyphRenderer:
    def __init__(self, size: int, motifs_per_image: int):
        self.size = size
        self.k = motifs_per_image

    def jitter(self, lat, severity, rng):
        return jitter_glyph(lat, severity, self.size, rng)

    def resample(self, lat, rng):
        motifs = tuple(int(m) for m in rng.integers(0, len(MOTIFS), size=len(lat.motifs)))
        return random_glyph_latent(motifs, self.size, rng)

    def render(self, lat):
        return render_glyph(lat, self.size), None


class MapRenderer:
    def __init__(self, size: int):
        self.size = size

    def jitter(self, lat, severity, rng):
        return jitter_map(lat, severity, self.size, rng)

    def resample(self, lat, rng):
        return random_map_latent(self.size, rng)

    def render(self, lat):
        return render_map(lat, self.size, "a", lat.texture), render_map(lat, self.size, "b")


class SyntheticGenerator:
    """Perturbs generating parameters with severity ``t / steps``.  From the
    label-breaking timestep upwards the class-defining parameters are
    redrawn before the geometric jitter is applied."""

    kind = "synthetic"

    def __init__(self, renderer, cfg: AugmentationConfig):
        self.renderer = renderer
        self.cfg = cfg
        self.t_break = timesteps(cfg)[1]

    def perturb(self, sample: Sample, strength_t: int, rng: np.random.Generator) -> Sample:
        if not 0 <= strength_t <= self.cfg.steps:
            raise ValueError(f"strength {strength_t} outside [0, {self.cfg.steps}]")
        if sample.latent is None:
            raise ConfigError("synthetic generator needs samples with generating parameters")
        if strength_t == 0:
            return replace(sample)
        lat = sample.latent
        if strength_t >= self.t_break:
            lat = self.renderer.resample(lat, rng)
        lat = self.renderer.jitter(lat, strength_t / self.cfg.steps, rng)
        image, gallery = self.renderer.render(lat)
        return Sample(image=image, gallery=gallery, latent=lat, source_id=sample.source_id, stem=sample.stem)

    def generate(self, sample: Sample, seed: int) -> tuple:
        t_p, t_b = timesteps(self.cfg)
        preserving = [self.perturb(sample, t_p, item_rng(seed, sample.source_id, PRESERVING, i))
                      for i in range(self.cfg.m)]
        pairs = []
        for i in range(self.cfg.m):
            anchor = self.perturb(sample, t_b, item_rng(seed, sample.source_id, BREAKING, i))
            positive = self.perturb(anchor, t_p, item_rng(seed, sample.source_id, POSITIVE, i))
            pairs.append(AugmentedPair(anchor=anchor.image, positive=positive.image, source_id=sample.source_id))
        return preserving, pairs


class ManifestGenerator:
    """Reads ``root/aug/{stem}.{preserving|breaking|positive}.{index}.png``."""

    kind = "manifest"

    def __init__(self, root: str, cfg: AugmentationConfig, image_size: int):
        self.dir = os.path.join(root, "aug")
        self.cfg = cfg
        self.image_size = image_size

    def _load(self, stem: str, kind: str, index: int) -> np.ndarray:
        path = os.path.join(self.dir, f"{stem}.{kind}.{index}.png")
        if not os.path.exists(path):
            raise FileNotFoundError(f"augmentation manifest is missing {path}")
        return _decode(path, self.image_size)

    def generate(self, sample: Sample, seed: int) -> tuple:
        if sample.stem is None:
            raise ConfigError("manifest generator needs samples with file stems")
        preserving = [replace(sample, image=self._load(sample.stem, "preserving", i), latent=None)
                      for i in range(self.cfg.m)]
        pairs = [AugmentedPair(anchor=self._load(sample.stem, "breaking", i),
                               positive=self._load(sample.stem, "positive", i), source_id=sample.source_id)
                 for i in range(self.cfg.m)]
        return preserving, pairs


def make_generator(cfg: AugmentationConfig, dataset, manifest_root: Optional[str] = None):
    if cfg.generator_kind == "synthetic":
        if isinstance(dataset, ClassificationDataset):
            k = len(dataset.latents[0].motifs) if dataset.latents else len(glyph_classes(dataset.n_classes)[0])
            return SyntheticGenerator(GlyphRenderer(dataset.images.shape[-1], k), cfg)
        return SyntheticGenerator(MapRenderer(dataset.queries.shape[-1]), cfg)
    if cfg.generator_kind == "manifest":
        if manifest_root is None:
            raise ConfigError("manifest generator needs a data root")
        size = (dataset.images if isinstance(dataset, ClassificationDataset) else dataset.queries).shape[-1]
        return ManifestGenerator(manifest_root, cfg, size)
    raise ConfigError(f"unknown generator kind {cfg.generator_kind!r}")


def generate(sample: Sample, cfg: AugmentationConfig, seed: int, generator) -> tuple:
    """m label-preserving samples and m label-breaking pairs for ``sample``."""
    if generator is None:
        raise ConfigError(f"no generator registered for {cfg.generator_kind!r}")
    return generator.generate(sample, seed)


def dataset_samples(dataset) -> List[Sample]:
    stems = dataset.stems or [None] * len(dataset)
    lats = dataset.latents or [None] * len(dataset)
    if isinstance(dataset, ClassificationDataset):
        return [Sample(image=img, source_id=i, latent=lats[i], stem=stems[i]) for i, img in enumerate(dataset.images)]
    return [Sample(image=dataset.queries[i], gallery=dataset.gallery[g], source_id=i, latent=lats[i], stem=stems[i])
            for i, g in enumerate(dataset.ground_truth)]


# ---------------------------------------------------------------------------
# training store and batch sampling
# ---------------------------------------------------------------------------


@dataclass
class AugmentationStore:
    kind: str
    task_images: np.ndarray  # originals followed by label-preserving images
    task_targets: np.ndarray  # labels, or gallery images for retrieval
    pair_anchors: np.ndarray
    pair_positives: np.ndarray
    pair_sources: np.ndarray
    n_originals: int

    @property
    def n_task(self) -> int:
        return len(self.task_images)

    @property
    def n_pairs(self) -> int:
        return len(self.pair_anchors)


def build_store(dataset, cfg: Optional[AugmentationConfig], seed: int, generator=None) -> AugmentationStore:
    """Originals plus (when ``cfg`` is given) their offline augmentations."""
    samples = dataset_samples(dataset)
    retrieval = isinstance(dataset, RetrievalDataset)
    imgs = [s.image for s in samples]
    targets = [s.gallery for s in samples] if retrieval else list(dataset.labels)
    anchors, positives, sources = [], [], []
    if cfg is not None and cfg.m > 0:
        generator = generator or make_generator(cfg, dataset)
        for s in samples:
            pres, pairs = generate(s, cfg, seed, generator)
            if cfg.preserving:
                for p in pres:
                    imgs.append(p.image)
                    targets.append(p.gallery if retrieval else dataset.labels[s.source_id])
            if cfg.breaking:
                for pr in pairs:
                    anchors.append(pr.anchor)
                    positives.append(pr.positive)
                    sources.append(pr.source_id)
    shape = imgs[0].shape
    empty = np.zeros((0,) + shape, dtype=np.uint8)
    return AugmentationStore(
        kind=dataset.kind,
        task_images=np.stack(imgs),
        task_targets=np.stack(targets) if retrieval else np.asarray(targets, dtype=np.int64),
        pair_anchors=np.stack(anchors) if anchors else empty,
        pair_positives=np.stack(positives) if positives else empty,
        pair_sources=np.asarray(sources, dtype=np.int64),
        n_originals=len(samples),
    )


def steps_per_epoch(store: AugmentationStore, batch: int) -> int:
    return math.ceil(store.n_task / batch)


def sample_training_batch(store: AugmentationStore, batch: int, seed: int, epoch: int, step: int) -> tuple:
    """Indices of B task items and B label-breaking pairs for one step.

    Task items follow a per-epoch permutation of originals ∪ preserving
    augmentations (the final short batch wraps around); pairs are drawn
    uniformly without replacement.  Both depend only on (seed, epoch, step).
    """
    if store.n_task == 0:
        raise ValueError("empty augmentation store")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 404, int(epoch)])).permutation(store.n_task)
    start = (step * batch) % store.n_task
    task_idx = np.take(perm, np.arange(start, start + min(batch, store.n_task)), mode="wrap")
    pair_idx = np.zeros(0, dtype=np.int64)
    if store.n_pairs:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 505, int(epoch), int(step)]))
        pair_idx = rng.choice(store.n_pairs, size=min(batch, store.n_pairs), replace=False)
    return task_idx, pair_idx


# ---------------------------------------------------------------------------
# memory bank and losses
# ---------------------------------------------------------------------------


class MemoryBank:
    """FIFO queue of detached, L2-normalised feature vectors."""

    def __init__(self, capacity: int = 100, norm_tol: float = 1e-10):
        self.capacity = capacity
        self.norm_tol = norm_tol
        self._queue: deque = deque(maxlen=capacity if capacity > 0 else None)

    def __len__(self) -> int:
        return len(self._queue)

    def enqueue(self, features: np.ndarray) -> None:
        if self.capacity == 0:
            return
        feats = np.array(features, dtype=np.float64, copy=True)
        norms = np.linalg.norm(feats, axis=1)
        if np.any(np.abs(norms - 1.0) > self.norm_tol):
            raise InvariantViolation(f"memory bank vectors must be unit norm, got norms {norms}")
        for row in feats:
            self._queue.append(row)

    def contents(self) -> np.ndarray:
        if not self._queue:
            return np.zeros((0, 0))
        return np.stack(self._queue)

    def restore(self, rows: np.ndarray) -> None:
        """Reload saved contents verbatim (norms may carry f32 rounding)."""
        self._queue.clear()
        for row in np.asarray(rows, dtype=np.float64):
            self._queue.append(row.copy())


class KeyEncoder:
    """Momentum copy of the trainable parameters, used to encode the
    positives that become keys and bank entries.

    The adapters move every step, so without a slowly moving key encoder the
    banked keys go stale and the shared-offset shortcut collapses all
    features onto one point.
    """

    def __init__(self, named_params, momentum: float = 0.999):
        self.momentum = momentum
        self.params = list(named_params)
        self.shadow = OrderedDict((n, t.data.copy()) for n, t in self.params)

    def update(self) -> None:
        m = self.momentum
        for n, t in self.params:
            s = self.shadow[n]
            s *= m
            s += (1.0 - m) * t.data

    @contextmanager
    def active(self):
        """Temporarily load the momentum weights into the live tensors."""
        saved = [t.data.copy() for _, t in self.params]
        try:
            for n, t in self.params:
                t.data[...] = self.shadow[n]
            yield
        finally:
            for (_, t), arr in zip(self.params, saved):
                t.data[...] = arr

    def state(self) -> dict:
        return {"key." + n: a.copy() for n, a in self.shadow.items()}

    def load_state(self, state: dict) -> None:
        for n in self.shadow:
            self.shadow[n][...] = state["key." + n]


def label_breaking_loss(anchors: Tensor, positives: Tensor, bank: MemoryBank, sigma: float = 0.07,
                        enqueue: bool = True) -> Tensor:
    """InfoNCE of each anchor against its positive, with the other in-batch
    positives and the banked features as negatives.  The positives are then
    enqueued (detached)."""
    if anchors.shape[0] == 0:
        raise ValueError("label-breaking loss needs a non-empty batch")
    keys = positives
    banked = bank.contents()
    if len(banked):
        keys = T.concat([positives, Tensor(banked)], axis=0)
    logits = (anchors @ T.swap_last(keys)) * (1.0 / sigma)
    n = anchors.shape[0]
    loss = -T.mean(T.pick(T.log_softmax(logits, -1), np.arange(n)))
    if enqueue:
        bank.enqueue(positives.data)
    return loss


def combined_loss(task: Tensor, label_breaking: Tensor, lam: float = 0.1) -> Tensor:
    return task + label_breaking * lam
