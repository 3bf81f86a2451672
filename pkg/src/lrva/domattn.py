"""Learned global attention maps shared across images and tokens.

C maps of size 2h x 2h are learned once.  The token at grid location (i, j)
reads the h x h window whose top-left corner is (h - i, h - j), so its own
position always lands at the window centre (h, h) of the global map.  The
softmaxed windows attend over the block's value tensor, the results go
through that block's frozen output projection, and a learned scalar alpha
adds them to the multi-head attention output.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .backbone import ParameterStore
from .tensor import Tensor


def crop(global_map, i: int, j: int, h: int) -> np.ndarray:
    """The h x h window of a 2h x 2h map used by the token at (i, j)."""
    if not (0 <= i < h and 0 <= j < h):
        raise IndexError(f"token ({i}, {j}) outside {h}x{h} grid")
    m = global_map.data if isinstance(global_map, Tensor) else np.asarray(global_map)
    if m.shape != (2 * h, 2 * h):
        raise T.ShapeError(f"global map must be {2 * h}x{2 * h}, got {m.shape}")
    return m[h - i : 2 * h - i, h - j : 2 * h - j]


def crop_indices(h: int) -> np.ndarray:
    """(h², h²) flat indices into a 2h x 2h map; row t = i*h + j holds the
    row-major flattened crop for token (i, j)."""
    i = np.arange(h)[:, None, None, None]
    j = np.arange(h)[None, :, None, None]
    a = np.arange(h)[None, None, :, None]
    b = np.arange(h)[None, None, None, :]
    idx = (h - i + a) * (2 * h) + (h - j + b)
    return idx.reshape(h * h, h * h)


class AttentionMapBank:
    def __init__(self, n_maps: int, h: int, block: int, rng: np.random.Generator,
                 store: Optional[ParameterStore] = None, init_std: float = 0.02):
        self.n_maps = n_maps
        self.h = h
        self.block = block
        maps = (rng.standard_normal((n_maps, 2 * h, 2 * h)) * init_std).astype(np.float32).astype(np.float64)
        if store is None:
            store = ParameterStore()
        self.maps = store.add("domattn.maps", maps, frozen=False)
        self.r = store.add("domattn.r", np.zeros(n_maps), frozen=False)
        self.alpha = store.add("domattn.alpha", np.asarray(0.0), frozen=False)
        self._idx = None

    @staticmethod
    def n_params(n_maps: int, h: int) -> int:
        return n_maps * (2 * h) ** 2 + n_maps + 1

    def _flat_indices(self) -> np.ndarray:
        if self._idx is None:
            side = (2 * self.h) ** 2
            self._idx = np.arange(self.n_maps)[:, None, None] * side + crop_indices(self.h)[None]
        return self._idx

    def token_attention(self) -> Tensor:
        """(C, h², h²) row-stochastic attention, one matrix per global map."""
        return T.softmax(T.take(self.maps, self._flat_indices()), -1)

    def mixed_attention(self) -> Tensor:
        """Σ_c softmax(r)_c · softmax(M_c) as a single (h², h²) matrix."""
        n = self.h * self.h
        att = self.token_attention().reshape(self.n_maps, n * n)
        return (T.softmax(self.r, -1).reshape(1, self.n_maps) @ att).reshape(n, n)

    def features(self, values: Tensor, proj_w: Tensor, proj_b: Tensor) -> Tensor:
        """f̂ for spatial value rows ``values`` (B, h², d).

        The per-map projection is affine and the map weights sum to one, so
        mixing the attention matrices first gives the same result as
        projecting each map's output and mixing afterwards.
        """
        B, n, d = values.shape
        if n != self.h * self.h:
            raise T.ShapeError(f"value rows {n} != h² = {self.h * self.h}")
        mixed = self.mixed_attention()
        attended = T.swap_last(T.swap_last(values) @ T.swap_last(mixed))  # (B, n, d)
        return attended @ proj_w + proj_b

    def apply(self, values: Tensor, mhsa_out: Tensor, proj_w: Tensor, proj_b: Tensor) -> Tensor:
        """Add α·f̂ to the spatial rows of the MHSA output; the class row
        (index 0) passes through untouched."""
        feats = self.features(values[:, 1:, :], proj_w, proj_b)
        spatial = mhsa_out[:, 1:, :] + feats * self.alpha
        return T.concat([mhsa_out[:, :1, :], spatial], axis=1)


def features_per_map(bank: AttentionMapBank, values: Tensor, proj_w: Tensor, proj_b: Tensor) -> Tensor:
    """Literal Σ_c softmax(r)_c · proj(softmax(M_c) V); slower reference path."""
    att = bank.token_attention()
    s = T.softmax(bank.r, -1)
    out = None
    for c in range(bank.n_maps):
        a_c = att[c]
        term = T.swap_last(T.swap_last(values) @ T.swap_last(a_c)) @ proj_w + proj_b
        term = term * s[c]
        out = term if out is None else out + term
    return out
