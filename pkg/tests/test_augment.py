import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrva import tensor as T
from lrva.augment import (
    AugmentationConfig,
    AugmentationStore,
    KeyEncoder,
    MemoryBank,
    build_store,
    combined_loss,
    dataset_samples,
    generate,
    label_breaking_loss,
    make_generator,
    sample_training_batch,
    steps_per_epoch,
    timesteps,
)
from lrva.errors import ConfigError, InvariantViolation
from lrva.tasks import gen_glyph_task, gen_map_pairs, glyph_label


def unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_info_nce(anchors, positives, banked, sigma):
    keys = np.concatenate([positives, banked]) if len(banked) else positives
    total = 0.0
    for j, a in enumerate(anchors):
        logits = [float(a @ k) / sigma for k in keys]
        top = max(logits)
        lse = top + math.log(sum(math.exp(v - top) for v in logits))
        total += lse - logits[j]
    return total / len(anchors)


class TestTimesteps:
    def test_default_values(self):
        assert timesteps(AugmentationConfig()) == (15, 30)

    def test_floor_semantics(self):
        assert timesteps(AugmentationConfig(gamma=0.02))[0] == 1

    @pytest.mark.parametrize("gamma,tau", [(0.6, 0.3), (0.5, 0.5)])
    def test_gamma_must_be_below_tau(self, gamma, tau):
        with pytest.raises(ConfigError):
            AugmentationConfig(gamma=gamma, tau=tau)


@pytest.fixture(scope="module")
def glyphs():
    return gen_glyph_task(4, 3, 32, seed=0)


class TestSyntheticGenerator:
    def test_strength_zero_is_identity(self, glyphs):
        gen = make_generator(AugmentationConfig(), glyphs)
        s = dataset_samples(glyphs)[0]
        assert np.array_equal(gen.perturb(s, 0, np.random.default_rng(0)).image, s.image)

    def test_m_items_of_each_kind(self, glyphs):
        cfg = AugmentationConfig(m=10)
        pres, pairs = generate(dataset_samples(glyphs)[0], cfg, 0, make_generator(cfg, glyphs))
        assert len(pres) == 10 and len(pairs) == 10

    def test_same_seed_is_bitwise_identical(self, glyphs):
        cfg = AugmentationConfig(m=3)
        s = dataset_samples(glyphs)[1]
        a = generate(s, cfg, 7, make_generator(cfg, glyphs))
        b = generate(s, cfg, 7, make_generator(cfg, glyphs))
        for x, y in zip(a[0], b[0]):
            assert x.image.tobytes() == y.image.tobytes()
        for x, y in zip(a[1], b[1]):
            assert x.anchor.tobytes() == y.anchor.tobytes() and x.positive.tobytes() == y.positive.tobytes()

    def test_preserving_keeps_generating_class(self, glyphs):
        cfg = AugmentationConfig(m=4)
        gen = make_generator(cfg, glyphs)
        for s, y in zip(dataset_samples(glyphs), glyphs.labels):
            for p in gen.generate(s, 0)[0]:
                assert glyph_label(p.latent, glyphs.n_classes) == y

    def test_breaking_is_further_from_source_than_preserving(self):
        ds = gen_glyph_task(8, 1, 32, seed=3)
        cfg = AugmentationConfig()
        gen = make_generator(cfg, ds)
        t_p, t_b = timesteps(cfg)
        near, far = [], []
        for seed in range(100):
            s = dataset_samples(ds)[seed % len(ds)]
            src = s.image.astype(float)
            near.append(np.linalg.norm(gen.perturb(s, t_p, np.random.default_rng(seed)).image - src))
            far.append(np.linalg.norm(gen.perturb(s, t_b, np.random.default_rng(seed)).image - src))
        assert np.mean(far) > np.mean(near)

    def test_strength_out_of_range(self, glyphs):
        gen = make_generator(AugmentationConfig(), glyphs)
        with pytest.raises(ValueError):
            gen.perturb(dataset_samples(glyphs)[0], 51, np.random.default_rng(0))

    def test_unknown_generator(self, glyphs):
        with pytest.raises(ConfigError):
            make_generator(AugmentationConfig(generator_kind="diffusion"), glyphs)

    def test_map_pairs_keep_both_domains(self):
        maps = gen_map_pairs(3, 32, seed=0)
        cfg = AugmentationConfig(m=2)
        pres, _ = generate(dataset_samples(maps)[0], cfg, 0, make_generator(cfg, maps))
        assert pres[0].gallery is not None and pres[0].gallery.shape == pres[0].image.shape


class TestStore:
    def test_union_size_arithmetic(self):
        # 154 originals with m = 10 preserving each
        n = 154
        store = AugmentationStore("classification", np.zeros((n * 11, 1, 1, 1), np.uint8), np.zeros(n * 11, int),
                                  np.zeros((n * 10, 1, 1, 1), np.uint8), np.zeros((n * 10, 1, 1, 1), np.uint8),
                                  np.zeros(n * 10, int), n)
        assert store.n_task == 1694
        assert steps_per_epoch(store, 8) == math.ceil(1694 / 8)

    def test_store_layout(self, glyphs):
        store = build_store(glyphs, AugmentationConfig(m=2), 0)
        n = len(glyphs)
        assert store.n_task == 3 * n and store.n_pairs == 2 * n
        np.testing.assert_array_equal(store.task_targets[:n], glyphs.labels)
        np.testing.assert_array_equal(store.task_targets[n:], np.repeat(glyphs.labels, 2))

    def test_no_augmentation_keeps_originals_only(self, glyphs):
        store = build_store(glyphs, None, 0)
        assert store.n_task == len(glyphs) and store.n_pairs == 0

    def test_batches_are_deterministic(self, glyphs):
        store = build_store(glyphs, AugmentationConfig(m=2), 0)
        a = sample_training_batch(store, 8, 3, 1, 2)
        b = sample_training_batch(store, 8, 3, 1, 2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        task_idx, pair_idx = a
        assert len(task_idx) == 8 and len(set(pair_idx.tolist())) == 8

    def test_epoch_covers_union(self, glyphs):
        store = build_store(glyphs, AugmentationConfig(m=2), 0)
        seen = np.concatenate([sample_training_batch(store, 8, 0, 0, s)[0]
                               for s in range(steps_per_epoch(store, 8))])
        assert set(seen.tolist()) == set(range(store.n_task))

    def test_empty_store(self):
        empty = AugmentationStore("classification", np.zeros((0, 3, 2, 2), np.uint8), np.zeros(0, int),
                                  np.zeros((0, 3, 2, 2), np.uint8), np.zeros((0, 3, 2, 2), np.uint8),
                                  np.zeros(0, int), 0)
        with pytest.raises(ValueError):
            sample_training_batch(empty, 8, 0, 0, 0)


class TestMemoryBank:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 6), st.integers(1, 10))
    def test_size_is_min_of_capacity_and_enqueued(self, cap, B, k):
        bank = MemoryBank(cap)
        rng = np.random.default_rng(0)
        for _ in range(k):
            bank.enqueue(unit(rng, B, 3))
        assert len(bank) == min(cap, k * B)

    def test_fifo_eviction(self):
        bank = MemoryBank(3)
        rows = np.eye(4)
        bank.enqueue(rows[:2])
        bank.enqueue(rows[2:])
        np.testing.assert_array_equal(bank.contents(), rows[1:])

    def test_rejects_non_unit_rows(self):
        with pytest.raises(InvariantViolation):
            MemoryBank(4).enqueue(np.ones((1, 3)))

    def test_stored_rows_are_copies(self):
        bank = MemoryBank(4)
        x = np.eye(2)
        bank.enqueue(x)
        x[0, 0] = 5.0
        assert bank.contents()[0, 0] == 1.0


class TestLabelBreakingLoss:
    def test_lone_positive_gives_zero(self):
        x = T.tensor([[1.0, 0.0]])
        assert label_breaking_loss(x, x, MemoryBank(4), sigma=1.0).item() == 0.0

    def test_two_orthogonal_pairs(self):
        x = T.tensor(np.eye(2))
        want = -math.log(math.e / (math.e + 1))
        assert abs(label_breaking_loss(x, x, MemoryBank(0), sigma=1.0).item() - want) < 1e-12

    @pytest.mark.parametrize("n_bank", range(0, 9))
    def test_matches_brute_force(self, n_bank):
        rng = np.random.default_rng(n_bank)
        B = int(rng.integers(1, 5))
        anchors, positives = unit(rng, B, 6), unit(rng, B, 6)
        bank = MemoryBank(8)
        if n_bank:
            bank.enqueue(unit(rng, n_bank, 6))
        banked = bank.contents()
        got = label_breaking_loss(T.tensor(anchors), T.tensor(positives), bank, sigma=0.07).item()
        assert abs(got - brute_info_nce(anchors, positives, banked, 0.07)) < 1e-10
        assert got >= 0

    def test_positives_are_enqueued_detached(self):
        rng = np.random.default_rng(0)
        bank = MemoryBank(8)
        p = T.tensor(unit(rng, 2, 3), requires_grad=True)
        label_breaking_loss(T.tensor(unit(rng, 2, 3)), p, bank)
        np.testing.assert_array_equal(bank.contents(), p.data)
        p.data[...] = 0.0
        assert np.all(bank.contents() != 0.0)

    def test_banked_features_receive_no_gradient(self):
        rng = np.random.default_rng(1)
        bank = MemoryBank(8)
        p = T.tensor(unit(rng, 3, 4), requires_grad=True)
        label_breaking_loss(T.tensor(unit(rng, 3, 4)), p, bank)
        a = T.tensor(unit(rng, 3, 4), requires_grad=True)
        T.backward(label_breaking_loss(a, T.tensor(unit(rng, 3, 4)), bank, enqueue=False))
        assert a.grad is not None and p.grad is None

    def test_negative_order_invariance(self):
        rng = np.random.default_rng(2)
        a, p, banked = unit(rng, 3, 5), unit(rng, 3, 5), unit(rng, 6, 5)
        b1, b2 = MemoryBank(8), MemoryBank(8)
        b1.enqueue(banked)
        b2.enqueue(banked[::-1])
        l1 = label_breaking_loss(T.tensor(a), T.tensor(p), b1).item()
        l2 = label_breaking_loss(T.tensor(a), T.tensor(p), b2).item()
        assert abs(l1 - l2) < 1e-12

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            label_breaking_loss(T.tensor(np.zeros((0, 2))), T.tensor(np.zeros((0, 2))), MemoryBank(2))


class TestCombinedLoss:
    def test_exact_arithmetic(self):
        assert combined_loss(T.tensor(2.0), T.tensor(1.0), 0.1).item() == 2.0 + 0.1 * 1.0
        assert combined_loss(T.tensor(2.0), T.tensor(1.0), 0.0).item() == 2.0

    def test_default_lambda(self):
        assert AugmentationConfig().lam == 0.1
        assert combined_loss(T.tensor(1.0), T.tensor(3.0)).item() == 1.0 + 0.1 * 3.0


class TestKeyEncoder:
    def params(self):
        rng = np.random.default_rng(0)
        return [("a", T.tensor(rng.normal(size=(3, 2)), requires_grad=True)),
                ("b", T.tensor(rng.normal(size=4), requires_grad=True))]

    def test_update_is_exponential_average(self):
        ps = self.params()
        keys = KeyEncoder(ps, momentum=0.9)
        start = ps[0][1].data.copy()
        ps[0][1].data[...] += 1.0
        keys.update()
        np.testing.assert_allclose(keys.shadow["a"], start + 0.1, atol=1e-12)

    def test_zero_momentum_tracks_live_weights(self):
        ps = self.params()
        keys = KeyEncoder(ps, momentum=0.0)
        ps[1][1].data[...] = 7.0
        keys.update()
        assert np.all(keys.shadow["b"] == 7.0)

    def test_active_swaps_and_restores(self):
        ps = self.params()
        keys = KeyEncoder(ps, momentum=0.5)
        live = ps[0][1].data.copy()
        keys.shadow["a"][...] = 0.0
        with keys.active():
            assert np.all(ps[0][1].data == 0.0)
        np.testing.assert_array_equal(ps[0][1].data, live)

    def test_active_restores_after_error(self):
        ps = self.params()
        keys = KeyEncoder(ps)
        keys.shadow["b"][...] = 3.0
        live = ps[1][1].data.copy()
        with pytest.raises(RuntimeError):
            with keys.active():
                raise RuntimeError("boom")
        np.testing.assert_array_equal(ps[1][1].data, live)

    def test_state_round_trip(self):
        keys = KeyEncoder(self.params())
        keys.shadow["a"][...] = 2.0
        other = KeyEncoder(self.params())
        other.load_state(keys.state())
        assert set(keys.state()) == {"key.a", "key.b"}
        assert np.all(other.shadow["a"] == 2.0)

    @pytest.mark.parametrize("m", [-0.1, 1.0])
    def test_momentum_range(self, m):
        with pytest.raises(ConfigError):
            AugmentationConfig(key_momentum=m)
