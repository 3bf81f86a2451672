"""Fine-grained tokenization from slices of the frozen patch kernel.

The q x q projection kernel is cut into T sub-kernels of side u.  Each one
encodes the image at stride u; the T feature maps are mixed with softmax
weights, max-pooled 2x2 back to the backbone grid, and fed through the
backbone's own class token and positional encodings.  Only the mixing
logits ``w`` are trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .backbone import ParameterStore, TokenGrid, ViTBackbone, _add_channel_bias, _batched
from .errors import ConfigError
from .tensor import Tensor


def grid_offsets(q: int, u: int, v: int) -> List[int]:
    """Top-left offsets along one axis: ``v`` points spread evenly over [0, q-u]."""
    if u > q:
        raise ConfigError(f"sub-kernel size u={u} exceeds kernel size q={q}")
    if v < 1:
        raise ConfigError(f"v must be >= 1, got {v}")
    if v == 1:
        return [0]
    offs = [math.floor(i * (q - u) / (v - 1) + 0.5) for i in range(v)]
    if len(set(offs)) != len(offs):
        raise ConfigError(f"v={v} places duplicate offsets {offs} within q-u={q - u}")
    return offs


@dataclass
class SubKernelBank:
    kernel: Tensor  # frozen (d, c, q, q) projection kernel, shared not copied
    u: int
    offsets: List[tuple]
    w: Tensor

    @property
    def n_sub(self) -> int:
        return len(self.offsets)

    def sub_kernel(self, t: int) -> Tensor:
        r, c = self.offsets[t]
        # a numpy view into K: no copy, and never requires grad
        return Tensor(self.kernel.data[:, :, r : r + self.u, c : c + self.u])

    @property
    def sub_kernels(self) -> List[Tensor]:
        return [self.sub_kernel(t) for t in range(self.n_sub)]

    def weights(self) -> Tensor:
        return T.softmax(self.w, -1)


def carve(kernel: Tensor, u: int, v: int = 1, stride1: bool = False,
          store: Optional[ParameterStore] = None) -> SubKernelBank:
    q = kernel.shape[-1]
    if u > q:
        raise ConfigError(f"sub-kernel size u={u} exceeds kernel size q={q}")
    axis = list(range(q - u + 1)) if stride1 else grid_offsets(q, u, v)
    offsets = [(r, c) for r in axis for c in axis]
    w = np.zeros(len(offsets))
    w = store.add("subkernel.w", w, frozen=False) if store is not None else Tensor(w, requires_grad=True)
    return SubKernelBank(kernel=kernel, u=u, offsets=offsets, w=w)


def encode(images, bank: SubKernelBank, stride: Optional[int] = None) -> List[Tensor]:
    """One feature map per sub-kernel, each (B, d, p, p) with p = H / u."""
    images = _batched(images)
    stride = bank.u if stride is None else stride
    if stride != bank.u:
        raise ConfigError(f"encode stride {stride} must equal sub-kernel size {bank.u}")
    H = images.shape[-1]
    if H % bank.u:
        raise ConfigError(f"image size {H} not divisible by sub-kernel size {bank.u}")
    return [T.conv2d(images, k, stride) for k in bank.sub_kernels]


def combine(features: List[Tensor], w: Tensor) -> Tensor:
    """Softmax(w)-weighted sum of equally shaped feature maps."""
    shape = features[0].shape
    for f in features:
        if f.shape != shape:
            raise T.ShapeError(f"combine: feature shapes differ {shape} vs {f.shape}")
    stacked = T.stack(features, 0).reshape(len(features), -1)
    mixed = T.softmax(w, -1).reshape(1, len(features)) @ stacked
    return mixed.reshape(shape)


def mixed_kernel(bank: SubKernelBank) -> Tensor:
    """Σ_t softmax(w)_t k_t as a single (d, c, u, u) kernel."""
    stacked = np.stack([k.data for k in bank.sub_kernels]).reshape(bank.n_sub, -1)
    d, c = bank.kernel.shape[:2]
    return (bank.weights().reshape(1, bank.n_sub) @ Tensor(stacked)).reshape(d, c, bank.u, bank.u)


def tokenize_finegrained(images, bank: SubKernelBank, backbone: ViTBackbone, pool: bool = True,
                         fast: bool = True) -> TokenGrid:
    """Encode with the sub-kernels, mix, pool to the backbone grid, embed.

    With ``fast`` the mixing happens in kernel space (one convolution with the
    mixed kernel), which equals mixing the T feature maps because convolution
    is linear in the kernel.
    """
    images = _batched(images)
    if fast:
        H = images.shape[-1]
        if H % bank.u:
            raise ConfigError(f"image size {H} not divisible by sub-kernel size {bank.u}")
        b = T.conv2d(images, mixed_kernel(bank), bank.u)
    else:
        b = combine(encode(images, bank), bank.w)
    b = _add_channel_bias(b, backbone.p("patch.bias"))
    if pool:
        b = T.max_pool2d(b, 2, 2)
    if b.shape[-1] != backbone.cfg.grid:
        raise ConfigError(
            f"fine-grained grid {b.shape[-1]} != backbone grid {backbone.cfg.grid} "
            f"(u={bank.u}, pool={'on' if pool else 'off'})"
        )
    return backbone.embed_patches(b)
