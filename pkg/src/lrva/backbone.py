"""Toy vision transformer used as the frozen foundation model.

Pre-norm blocks, learned absolute positional encodings, a class token, and a
final layer norm.  Weights are seeded random draws rounded to float32 so that
checkpoints (stored as f32) reproduce them exactly.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, asdict
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 8
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def grid(self) -> int:
        """Tokens per image side (h)."""
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid**2 + 1

    def as_dict(self) -> dict:
        return asdict(self)


class ParameterStore:
    """Named tensors, each either frozen (backbone) or trainable (adapters).

    ``requires_grad`` is derived from the frozen flag, so frozen tensors never
    receive gradients and the optimizer never sees them.
    """

    def __init__(self):
        self._entries: "OrderedDict[str, tuple[Tensor, bool]]" = OrderedDict()

    def add(self, name: str, value, frozen: bool) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = not frozen
        self._entries[name] = (t, bool(frozen))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor, bool]]:
        for name, (t, frozen) in self._entries.items():
            yield name, t, frozen

    def names(self, frozen: Optional[bool] = None) -> list:
        return [n for n, _, f in self.items() if frozen is None or f == frozen]

    def is_frozen(self, name: str) -> bool:
        return self._entries[name][1]

    def trainable(self) -> list:
        return [(n, t) for n, t, f in self.items() if not f]

    def frozen(self) -> list:
        return [(n, t) for n, t, f in self.items() if f]

    def count(self, prefix: str = "", frozen: bool = False) -> int:
        return sum(t.size for n, t, f in self.items() if f == frozen and n.startswith(prefix))

    def zero_grad(self) -> None:
        for _, t, _ in self.items():
            t.grad = None

    def frozen_bytes(self) -> dict:
        return {n: t.data.tobytes() for n, t in self.frozen()}

    def merge(self, other: "ParameterStore") -> None:
        for name, t, frozen in other.items():
            self.add(name, t, frozen)


@dataclass
class TokenGrid:
    tokens: Tensor  # (B, h*h + 1, d_model), class token first
    h: int


def _f32_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32).astype(np.float64)


class ViTBackbone:
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParameterStore()
        rng = np.random.default_rng(seed)
        d, q, c = cfg.d_model, cfg.patch_size, cfg.channels
        add = lambda name, arr: self.params.add(name, arr, frozen=True)
        add("backbone.patch.weight", _f32_normal(rng, (d, c, q, q), (c * q * q) ** -0.5))
        add("backbone.patch.bias", _f32_normal(rng, (d,), 0.02))
        add("backbone.cls", _f32_normal(rng, (d,), 0.02))
        add("backbone.pos", _f32_normal(rng, (cfg.n_tokens, d), 0.02))
        hidden = cfg.mlp_ratio * d
        for b in range(cfg.n_blocks):
            p = f"backbone.blocks.{b}."
            add(p + "ln1.gain", np.ones(d))
            add(p + "ln1.bias", np.zeros(d))
            add(p + "attn.qkv.weight", _f32_normal(rng, (d, 3 * d), d**-0.5))
            add(p + "attn.qkv.bias", np.zeros(3 * d))
            add(p + "attn.proj.weight", _f32_normal(rng, (d, d), d**-0.5))
            add(p + "attn.proj.bias", np.zeros(d))
            add(p + "ln2.gain", np.ones(d))
            add(p + "ln2.bias", np.zeros(d))
            add(p + "mlp.fc1.weight", _f32_normal(rng, (d, hidden), d**-0.5))
            add(p + "mlp.fc1.bias", np.zeros(hidden))
            add(p + "mlp.fc2.weight", _f32_normal(rng, (hidden, d), hidden**-0.5))
            add(p + "mlp.fc2.bias", np.zeros(d))
        add("backbone.ln_f.gain", np.ones(d))
        add("backbone.ln_f.bias", np.zeros(d))

    def p(self, name: str) -> Tensor:
        return self.params["backbone." + name]

    @property
    def patch_kernel(self) -> Tensor:
        return self.p("patch.weight")

    # -- tokenization ----------------------------------------------------
    def embed_patches(self, patch_features: Tensor) -> TokenGrid:
        """Flatten a (B, d, h, h) feature map row-major, prepend the class token
        and add positional encodings."""
        B, d, h, h2 = patch_features.shape
        if h != self.cfg.grid or h2 != h:
            raise ValueError(f"feature grid {h}x{h2} does not match backbone grid {self.cfg.grid}")
        seq = T.transpose(patch_features.reshape(B, d, h * h), (0, 2, 1))
        cls = T.reshape(self.p("cls"), (1, 1, d))
        cls = T.concat([cls] * B, axis=0) if B > 1 else cls
        tokens = T.concat([cls, seq], axis=1)
        tokens = _add_pos(tokens, self.p("pos"))
        return TokenGrid(tokens=tokens, h=h)

    def tokenize_original(self, images) -> TokenGrid:
        images = _batched(images)
        H, W = images.shape[-2:]
        if H != self.cfg.image_size or W != self.cfg.image_size:
            raise ValueError(f"image {H}x{W} does not match image_size {self.cfg.image_size}")
        feats = T.conv2d(images, self.patch_kernel, self.cfg.patch_size)
        feats = _add_channel_bias(feats, self.p("patch.bias"))
        return self.embed_patches(feats)

    # -- transformer -----------------------------------------------------
    def multi_head_attention(self, block: int, x: Tensor, lowrank=None, return_weights: bool = False):
        """Pre-norm MHSA of ``block`` applied to tokens ``x`` (B, n, d).

        Returns ``(output, V)`` where ``V`` is the head-fused value tensor
        (B, n, d), laid out like the output projection's input.
        """
        cfg = self.cfg
        B, n, d = x.shape
        H, dh = cfg.n_heads, d // cfg.n_heads
        pre = f"blocks.{block}."
        a = T.layer_norm(x, self.p(pre + "ln1.gain"), self.p(pre + "ln1.bias"))
        qkv = a @ self.p(pre + "attn.qkv.weight") + self.p(pre + "attn.qkv.bias")
        if lowrank is not None:
            qkv = lowrank.delta(a, qkv)
        qkv = T.transpose(qkv.reshape(B, n, 3, H, dh), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(dh))
        weights = T.softmax(scores, -1)
        ctx = T.transpose(T.matmul(weights, v), (0, 2, 1, 3)).reshape(B, n, d)
        values = T.transpose(v, (0, 2, 1, 3)).reshape(B, n, d)
        out = self.out_proj(block, ctx)
        if return_weights:
            return out, values, weights
        return out, values

    def out_proj(self, block: int, x: Tensor) -> Tensor:
        pre = f"blocks.{block}.attn.proj."
        return x @ self.p(pre + "weight") + self.p(pre + "bias")

    def mlp(self, block: int, x: Tensor) -> Tensor:
        pre = f"blocks.{block}."
        a = T.layer_norm(x, self.p(pre + "ln2.gain"), self.p(pre + "ln2.bias"))
        hdn = T.gelu(a @ self.p(pre + "mlp.fc1.weight") + self.p(pre + "mlp.fc1.bias"))
        return hdn @ self.p(pre + "mlp.fc2.weight") + self.p(pre + "mlp.fc2.bias")

    def forward(self, grid: TokenGrid, adapters=None, normalize: bool = False) -> Tensor:
        """Run all blocks and return the final class-token embedding (B, d)."""
        if adapters is not None:
            adapters.validate(self.cfg.n_blocks)
        x = grid.tokens
        for b in range(self.cfg.n_blocks):
            lowrank = adapters.lowrank_for(b) if adapters is not None else None
            attn_out, values = self.multi_head_attention(b, x, lowrank=lowrank)
            domattn = adapters.domattn_for(b) if adapters is not None else None
            if domattn is not None:
                attn_out = domattn.apply(values, attn_out, self.p(f"blocks.{b}.attn.proj.weight"),
                                         self.p(f"blocks.{b}.attn.proj.bias"))
            y = x + attn_out
            bottleneck = adapters.bottleneck_for(b) if adapters is not None else None
            res = bottleneck.adapt(y) if bottleneck is not None else y
            x = res + self.mlp(b, y)
        x = T.layer_norm(x, self.p("ln_f.gain"), self.p("ln_f.bias"))
        emb = x[:, 0, :]
        return T.l2_normalize(emb, -1) if normalize else emb


def _batched(images) -> Tensor:
    images = images if isinstance(images, Tensor) else Tensor(images)
    if images.ndim == 3:
        images = images.reshape((1,) + images.shape)
    if images.ndim != 4:
        raise ValueError(f"expected (3,H,W) or (B,3,H,W) images, got {images.shape}")
    return images


def _add_channel_bias(feats: Tensor, bias: Tensor) -> Tensor:
    # (B, d, p, p) + (d,): move channels last so the bias rides the last axis
    moved = T.transpose(feats, (0, 2, 3, 1))
    return T.transpose(moved + bias, (0, 3, 1, 2))


def _add_pos(tokens: Tensor, pos: Tensor) -> Tensor:
    B, n, d = tokens.shape
    flat = tokens.reshape(B, n * d)
    return (flat + pos.reshape(n * d)).reshape(B, n, d)
