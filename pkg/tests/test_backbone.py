import numpy as np
import pytest

from lrva import tensor as T
from lrva.adapters import AdapterSet, BottleneckAdapter
from lrva.backbone import BackboneConfig, ParameterStore, ViTBackbone
from lrva.domattn import AttentionMapBank
from lrva.optim import Adam

SMALL = BackboneConfig(image_size=16, patch_size=4, d_model=8, n_heads=2, n_blocks=2, mlp_ratio=2)


@pytest.fixture(scope="module")
def vit():
    return ViTBackbone(SMALL, seed=3)


def images(n, size=16, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size))


def test_token_count_for_default_backbone():
    bb = ViTBackbone(BackboneConfig(d_model=16, n_blocks=1), seed=0)
    grid = bb.tokenize_original(np.zeros((3, 64, 64)))
    assert grid.h == 8
    assert grid.tokens.shape == (1, 65, 16)


def test_zero_image_gives_positional_encodings():
    bb = ViTBackbone(SMALL, seed=0)
    bb.p("patch.bias").data[...] = 0.0
    toks = bb.tokenize_original(np.zeros((3, 16, 16))).tokens.data[0]
    np.testing.assert_array_equal(toks[1:], bb.p("pos").data[1:])
    np.testing.assert_array_equal(toks[0], bb.p("cls").data + bb.p("pos").data[0])


def test_first_patch_token_matches_loop(vit):
    img = images(1)[0]
    tok = vit.tokenize_original(img).tokens.data[0, 1]
    K = vit.patch_kernel.data
    q = SMALL.patch_size
    want = np.zeros(SMALL.d_model)
    for o in range(SMALL.d_model):
        for c in range(3):
            for a in range(q):
                for b in range(q):
                    want[o] += img[c, a, b] * K[o, c, a, b]
    want += vit.p("patch.bias").data + vit.p("pos").data[1]
    np.testing.assert_allclose(tok, want, atol=1e-12)


def test_size_mismatch_rejected(vit):
    with pytest.raises(ValueError):
        vit.tokenize_original(np.zeros((3, 20, 20)))


def test_embedding_is_bitwise_reproducible():
    a = ViTBackbone(SMALL, seed=5)
    b = ViTBackbone(SMALL, seed=5)
    x = images(2)
    ea = a.forward(a.tokenize_original(x)).data
    eb = b.forward(b.tokenize_original(x)).data
    assert ea.tobytes() == eb.tobytes()


def test_zero_initialised_adapters_are_a_no_op(vit):
    x = images(3)
    base = vit.forward(vit.tokenize_original(x)).data
    store = ParameterStore()
    rng = np.random.default_rng(0)
    ad = AdapterSet()
    for b in range(SMALL.n_blocks):
        ad.bottleneck[b] = BottleneckAdapter(b, SMALL.d_model, 2, rng, store)
    ad.domattn = AttentionMapBank(3, SMALL.grid, 0, rng, store)
    out = vit.forward(vit.tokenize_original(x), ad).data
    np.testing.assert_allclose(out, base, rtol=0, atol=1e-12)


def test_normalised_embedding_has_unit_norm(vit):
    z = vit.forward(vit.tokenize_original(images(4)), normalize=True).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)


def test_adapter_block_out_of_range(vit):
    ad = AdapterSet()
    ad.bottleneck[7] = BottleneckAdapter(7, SMALL.d_model, 2, np.random.default_rng(0), ParameterStore())
    with pytest.raises(IndexError):
        vit.forward(vit.tokenize_original(images(1)), ad)


class TestAttention:
    def test_single_token(self, vit):
        x = T.tensor(np.random.default_rng(1).normal(size=(1, 1, SMALL.d_model)))
        out, V, w = vit.multi_head_attention(0, x, return_weights=True)
        assert np.all(w.data == 1.0)
        np.testing.assert_allclose(out.data, vit.out_proj(0, V).data, atol=1e-12)

    def test_rows_sum_to_one(self, vit):
        x = vit.tokenize_original(images(2)).tokens
        _, _, w = vit.multi_head_attention(1, x, return_weights=True)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)

    def test_value_rows_follow_token_permutation(self, vit):
        x = np.random.default_rng(2).normal(size=(1, SMALL.n_tokens, SMALL.d_model))
        perm = np.arange(SMALL.n_tokens)
        perm[[2, 5]] = perm[[5, 2]]
        out, V = vit.multi_head_attention(0, T.tensor(x))
        out_p, V_p = vit.multi_head_attention(0, T.tensor(x[:, perm]))
        np.testing.assert_allclose(V_p.data, V.data[:, perm], atol=1e-12)
        np.testing.assert_allclose(out_p.data, out.data[:, perm], atol=1e-12)


class TestFreezeContract:
    def test_every_backbone_parameter_is_frozen(self, vit):
        assert vit.params.trainable() == []
        assert all(not t.requires_grad for _, t in vit.params.frozen())

    def test_frozen_bytes_survive_optimizer_steps(self):
        bb = ViTBackbone(SMALL, seed=0)
        store = ParameterStore()
        store.merge(bb.params)
        ad = AdapterSet()
        rng = np.random.default_rng(0)
        for b in range(SMALL.n_blocks):
            ad.bottleneck[b] = BottleneckAdapter(b, SMALL.d_model, 2, rng, store)
        head_w = store.add("head.weight", np.zeros((SMALL.d_model, 3)), frozen=False)
        before = store.frozen_bytes()
        opt = Adam(store.trainable(), lr=1e-2)
        x, y = images(4), np.array([0, 1, 2, 0])
        for _ in range(50):
            opt.zero_grad()
            T.backward(T.cross_entropy(bb.forward(bb.tokenize_original(x), ad) @ head_w, y))
            opt.step()
        assert store.frozen_bytes() == before
        assert np.abs(head_w.data).sum() > 0


def test_parameter_store_rejects_duplicates():
    s = ParameterStore()
    s.add("a", np.zeros(2), frozen=True)
    with pytest.raises(KeyError):
        s.add("a", np.zeros(2), frozen=False)


def test_parameter_counts_split_by_flag():
    s = ParameterStore()
    s.add("x.a", np.zeros((2, 3)), frozen=True)
    s.add("x.b", np.zeros(4), frozen=False)
    assert s.count("x.", frozen=True) == 6
    assert s.count("x.") == 4


def test_weights_are_float32_representable(vit):
    for _, t in vit.params.frozen():
        assert np.array_equal(t.data.astype(np.float32).astype(np.float64), t.data)
