import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrva import tensor as T
from lrva.backbone import BackboneConfig, ParameterStore, ViTBackbone
from lrva.errors import ConfigError
from lrva.gradcheck import grad_check
from lrva.subkernel import carve, combine, encode, grid_offsets, mixed_kernel, tokenize_finegrained


def kernel(d=4, q=8, seed=0):
    return T.tensor(np.random.default_rng(seed).normal(size=(d, 3, q, q)))


class TestOffsets:
    def test_hand_enumeration(self):
        assert grid_offsets(8, 4, 3) == [0, 2, 4]
        bank = carve(kernel(), 4, 3)
        assert bank.n_sub == 9
        assert sorted(bank.offsets) == [(r, c) for r in (0, 2, 4) for c in (0, 2, 4)]

    def test_paper_scale_count(self):
        bank = carve(kernel(d=2, q=14), 7, 7)
        assert bank.n_sub == 49
        assert grid_offsets(14, 7, 7) == [0, 1, 2, 4, 5, 6, 7]

    def test_single_full_kernel(self):
        K = kernel()
        bank = carve(K, 8, 1)
        assert bank.n_sub == 1
        np.testing.assert_array_equal(bank.sub_kernel(0).data, K.data)

    def test_duplicate_offsets_rejected(self):
        with pytest.raises(ConfigError):
            carve(kernel(), 7, 3)

    def test_oversized_sub_kernel_rejected(self):
        with pytest.raises(ConfigError):
            carve(kernel(), 9, 1)

    def test_stride1_placement(self):
        assert carve(kernel(), 4, stride1=True).n_sub == 25

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 16), st.data())
    def test_offsets_in_range(self, q, data):
        u = data.draw(st.integers(1, q))
        v = data.draw(st.integers(1, q - u + 1))
        offs = grid_offsets(q, u, v)
        assert len(offs) == v and all(0 <= o <= q - u for o in offs)
        assert offs[0] == 0 and (v == 1 or offs[-1] == q - u)


class TestBank:
    def test_sub_kernels_are_views_of_K(self):
        K = kernel()
        bank = carve(K, 4, 3)
        for t, (r, c) in enumerate(bank.offsets):
            sk = bank.sub_kernel(t).data
            assert np.shares_memory(sk, K.data)
            np.testing.assert_array_equal(sk, K.data[:, :, r : r + 4, c : c + 4])

    def test_only_w_is_trainable(self):
        store = ParameterStore()
        bank = carve(kernel(), 4, 3, store=store)
        assert store.names(frozen=False) == ["subkernel.w"]
        assert store.count("subkernel.") == bank.n_sub == 9
        assert np.all(bank.w.data == 0)


class TestCombine:
    def test_uniform_weights_give_mean(self):
        b1, b2 = T.tensor([1.0, 3.0]), T.tensor([3.0, 1.0])
        np.testing.assert_allclose(combine([b1, b2], T.tensor(np.zeros(2))).data, [2.0, 2.0])

    def test_closed_form_softmax(self):
        out = combine([T.tensor([2.0]), T.tensor([6.0])], T.tensor([math.log(3.0), 0.0]))
        assert abs(out.data[0] - 3.0) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_convex_hull_and_simplex(self, n, seed):
        rng = np.random.default_rng(seed)
        feats = [T.tensor(rng.normal(size=(2, 3, 3))) for _ in range(n)]
        w = T.tensor(rng.normal(size=n) * 3)
        out = combine(feats, w).data
        stack = np.stack([f.data for f in feats])
        assert np.all(out >= stack.min(0) - 1e-12) and np.all(out <= stack.max(0) + 1e-12)
        assert abs(T.softmax(w, -1).data.sum() - 1.0) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 5), st.integers(0, 10_000))
    def test_permutation_equivariant(self, n, seed):
        rng = np.random.default_rng(seed)
        feats = [T.tensor(rng.normal(size=(4,))) for _ in range(n)]
        w = rng.normal(size=n)
        p = rng.permutation(n)
        a = combine(feats, T.tensor(w)).data
        b = combine([feats[i] for i in p], T.tensor(w[p])).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            combine([T.tensor(np.zeros(2)), T.tensor(np.zeros(3))], T.tensor(np.zeros(2)))


class TestEncode:
    def test_map_size(self):
        feats = encode(np.zeros((3, 64, 64)), carve(kernel(), 4, 3))
        assert len(feats) == 9 and all(f.shape == (1, 4, 16, 16) for f in feats)

    def test_constant_image_gives_constant_maps(self):
        for f in encode(np.full((3, 16, 16), 0.3), carve(kernel(), 4, 3)):
            assert np.allclose(f.data, f.data[:, :, :1, :1])

    def test_indivisible_size(self):
        with pytest.raises(ConfigError):
            encode(np.zeros((3, 18, 18)), carve(kernel(), 4, 3))

    def test_stride_must_equal_u(self):
        with pytest.raises(ConfigError):
            encode(np.zeros((3, 16, 16)), carve(kernel(), 4, 3), stride=2)


CFG = BackboneConfig(image_size=32, patch_size=8, d_model=8, n_heads=2, n_blocks=1, mlp_ratio=2)


class TestTokenize:
    def test_grid_compatible_with_original(self):
        bb = ViTBackbone(CFG, seed=0)
        bank = carve(bb.patch_kernel, 4, 3)
        x = np.random.default_rng(0).random((2, 3, 32, 32))
        assert tokenize_finegrained(x, bank, bb).tokens.shape == bb.tokenize_original(x).tokens.shape

    def test_default_size_gives_65_tokens(self):
        bb = ViTBackbone(BackboneConfig(d_model=8, n_heads=2, n_blocks=1), seed=0)
        grid = tokenize_finegrained(np.zeros((3, 64, 64)), carve(bb.patch_kernel, 4, 3), bb)
        assert grid.tokens.shape == (1, 65, 8) and grid.h == 8

    def test_fast_path_equals_encode_then_combine(self):
        bb = ViTBackbone(CFG, seed=1)
        bank = carve(bb.patch_kernel, 4, 3)
        bank.w.data[...] = np.random.default_rng(2).normal(size=9)
        x = np.random.default_rng(3).random((2, 3, 32, 32))
        fast = tokenize_finegrained(x, bank, bb, fast=True).tokens.data
        slow = tokenize_finegrained(x, bank, bb, fast=False).tokens.data
        np.testing.assert_allclose(fast, slow, atol=1e-12)

    def test_mixed_kernel_is_softmax_weighted_slices(self):
        bank = carve(kernel(), 4, 3)
        bank.w.data[...] = np.arange(9.0) / 3
        p = np.exp(bank.w.data) / np.exp(bank.w.data).sum()
        want = sum(pt * k.data for pt, k in zip(p, bank.sub_kernels))
        np.testing.assert_allclose(mixed_kernel(bank).data, want, atol=1e-12)

    def test_full_kernel_without_pooling_equals_original(self):
        bb = ViTBackbone(CFG, seed=0)
        bank = carve(bb.patch_kernel, 8, 1)
        x = np.random.default_rng(0).random((2, 3, 32, 32))
        a = tokenize_finegrained(x, bank, bb, pool=False).tokens.data
        np.testing.assert_allclose(a, bb.tokenize_original(x).tokens.data, atol=1e-12)

    def test_full_kernel_with_pooling_is_a_grid_error(self):
        # u = q leaves an h x h map that 2x2 pooling halves below the grid
        bb = ViTBackbone(CFG, seed=0)
        with pytest.raises(ConfigError):
            tokenize_finegrained(np.zeros((3, 32, 32)), carve(bb.patch_kernel, 8, 1), bb, pool=True)

    def test_w_gradient_matches_finite_differences(self):
        bb = ViTBackbone(CFG, seed=0)
        bank = carve(bb.patch_kernel, 4, 3)
        bank.w.data[...] = np.random.default_rng(0).normal(size=9)
        x = np.random.default_rng(1).random((2, 3, 32, 32))
        rep = grad_check(lambda: bb.forward(tokenize_finegrained(x, bank, bb)).sum(), bank.w)
        assert rep.passed, str(rep)

    def test_w_receives_gradient_but_K_does_not(self):
        bb = ViTBackbone(CFG, seed=0)
        bank = carve(bb.patch_kernel, 4, 3)
        x = np.random.default_rng(1).random((1, 3, 32, 32))
        T.backward(bb.forward(tokenize_finegrained(x, bank, bb)).sum())
        assert bank.w.grad is not None and bb.patch_kernel.grad is None
