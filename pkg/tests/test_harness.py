import os

import numpy as np
import pytest

from lrva import harness
from lrva import tensor as T
from lrva.checkpoint import load_state
from lrva.errors import ConfigError
from lrva.model import AdaptedModel


def all_on(cfg, **extra):
    return cfg.copy(**{"aug.enabled": True, "subkernel.enabled": True, "domattn.enabled": True, **extra})


class TestDeterminism:
    def test_two_runs_are_byte_identical(self, tiny_cfg, tmp_path):
        cfg = all_on(tiny_cfg)
        a = harness.train(cfg, str(tmp_path / "a"))
        b = harness.train(cfg, str(tmp_path / "b"))
        for name in ("metrics.csv", "checkpoint.lrva", "train_log.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        assert a.losses == b.losses

    def test_seed_changes_the_run(self, tiny_cfg, tmp_path):
        a = harness.train(tiny_cfg, str(tmp_path / "a"))
        b = harness.train(tiny_cfg.copy(seed=1), str(tmp_path / "b"))
        assert a.losses != b.losses


class TestTrain:
    def test_outputs_and_csv_layout(self, tiny_cfg, tmp_path):
        res = harness.train(tiny_cfg, str(tmp_path))
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        comments = [l for l in lines if l.startswith("#")]
        assert "".join(l[2:] + "\n" for l in comments[:-1]) == tiny_cfg.dump()
        assert comments[-1].startswith("# datasets train=")
        body = lines[len(comments):]
        assert body[0] == "task,split,metric,value,seed"
        rows = [r.split(",") for r in body[1:]]
        assert {(r[1], r[2]) for r in rows} >= {("val", "top1"), ("test", "top5"), ("model", "trainable.total")}
        assert all(r[0] == "classification" and r[4] == "0" for r in rows)
        assert len(res.losses) == 2 * 2  # 6 originals, batch 4

    def test_config_embedded_in_checkpoint(self, tiny_cfg, tmp_path):
        res = harness.train(tiny_cfg, str(tmp_path))
        assert load_state(res.checkpoint).config_text == tiny_cfg.dump()

    def test_freeze_contract_with_everything_enabled(self, tiny_cfg, tmp_path):
        cfg = all_on(tiny_cfg)
        fresh = AdaptedModel(cfg, n_classes=3)
        before = fresh.store.frozen_bytes()
        seen = {}

        def check(model, epoch, step, loss):
            seen["model"] = model

        harness.train(cfg, str(tmp_path), on_step=check)
        model = seen["model"]
        assert model.store.frozen_bytes() == before
        K = model.backbone.patch_kernel.data
        for t, (r, c) in enumerate(model.bank.offsets):
            assert np.shares_memory(model.bank.sub_kernel(t).data, K)

    def test_step_zero_loss_equals_no_adapter_loss(self, tiny_cfg):
        # trainable parts at their initial values change nothing beyond the fine-grained tokens
        splits = harness.load_splits(tiny_cfg)
        images, labels = splits.train.images, splits.train.labels
        plain = AdaptedModel(tiny_cfg.copy(**{"host.method": "none", "subkernel.enabled": True}), n_classes=3)
        full = AdaptedModel(all_on(tiny_cfg), n_classes=3)
        with T.no_grad():
            e0, e1 = plain.embed(images).data, full.embed(images).data
            l0 = T.cross_entropy(plain.head(T.tensor(e0)), labels).item()
            l1 = T.cross_entropy(full.head(T.tensor(e1)), labels).item()
        np.testing.assert_allclose(e1, e0, rtol=0, atol=1e-10)
        assert abs(l1 - l0) < 1e-10

    def test_probe_only_run_keeps_backbone(self, tiny_cfg, tmp_path):
        cfg = tiny_cfg.copy(**{"host.method": "probe"})
        before = AdaptedModel(cfg, n_classes=3).store.frozen_bytes()
        harness.train(cfg, str(tmp_path))
        after = harness.model_from_checkpoint(str(tmp_path / "checkpoint.lrva"))
        assert after.store.frozen_bytes() == before

    def test_memorisation_sanity(self, tiny_cfg, tmp_path):
        cfg = tiny_cfg.copy(**{"train.epochs": 60, "optim.lr": 3e-2})
        splits = harness.load_splits(cfg)
        same = harness.Splits(splits.train, splits.train, splits.train)
        res = harness.train(cfg, str(tmp_path), splits=same)
        assert res.test.top1 >= 80.0

    def test_dataset_config_mismatch(self, tiny_cfg, tmp_path):
        with pytest.raises(ConfigError):
            harness.train(tiny_cfg.copy(**{"task.kind": "retrieval"}), str(tmp_path))
        maps = harness.load_splits(tiny_cfg.copy(**{"task.kind": "retrieval", "data.source": "maps"}))
        with pytest.raises(ConfigError):
            harness.train(tiny_cfg, str(tmp_path), splits=maps)

    def test_lite_source_needs_root(self, tiny_cfg):
        with pytest.raises(ConfigError):
            harness.load_splits(tiny_cfg.copy(**{"data.source": "lite"}))


class TestEvaluate:
    def test_same_checkpoint_twice(self, tiny_cfg, tmp_path):
        res = harness.train(tiny_cfg, str(tmp_path))
        test = harness.load_splits(tiny_cfg).test
        a = harness.evaluate(res.checkpoint, test, "test")
        b = harness.evaluate(res.checkpoint, test, "test")
        assert a == b
        assert a.top1 == res.test.top1

    def test_retrieval_reports_both_directions(self, tiny_cfg, tmp_path):
        cfg = tiny_cfg.copy(**{"task.kind": "retrieval", "data.source": "maps", "eval.bidirectional": True,
                               "aug.enabled": True})
        res = harness.train(cfg, str(tmp_path))
        assert set(res.test.directions) == {"a2b", "b2a"}
        text = (tmp_path / "metrics.csv").read_text()
        assert "test,a2b.r_at_1" in text and "test,b2a.mean_rank" in text

    def test_shape_mismatch(self, tiny_cfg, tmp_path):
        res = harness.train(tiny_cfg, str(tmp_path))
        other = tiny_cfg.copy(**{"host.bottleneck_dim": 2})
        with pytest.raises(ConfigError, match="checkpoint/config shape mismatch"):
            harness.evaluate(res.checkpoint, harness.load_splits(tiny_cfg).test, cfg=other)

    def test_retrieval_metrics_on_classification_model(self, tiny_cfg, tmp_path):
        res = harness.train(tiny_cfg, str(tmp_path))
        maps = harness.load_splits(tiny_cfg.copy(**{"task.kind": "retrieval", "data.source": "maps"}))
        with pytest.raises(ConfigError):
            harness.evaluate(res.checkpoint, maps.test)


class TestSweep:
    def test_row_count(self, tiny_cfg, tmp_path):
        cfg = tiny_cfg.copy(**{"train.epochs": 1})
        path = harness.sweep(cfg, "domattn.C", [1, 2], [0, 1, 2], str(tmp_path))
        rows = [l for l in open(path).read().splitlines() if l and not l.startswith(("#", "axis,"))]
        assert len(rows) == 2 * 3
        assert {r.split(",")[1] for r in rows} == {"1", "2"}

    @pytest.mark.parametrize("axis,values", [
        ("aug.gamma", [0.2, 0.7]),
        ("aug.tau", [0.1]),
        ("subkernel.u", [5]),
        ("domattn.block", [9]),
        ("domattn.C", [0]),
        ("backbone.d_model", [8]),
    ])
    def test_invalid_values_rejected_before_training(self, tiny_cfg, tmp_path, axis, values):
        with pytest.raises(ConfigError):
            harness.sweep(tiny_cfg, axis, values, [0], str(tmp_path))
        assert not os.path.exists(tmp_path / "sweep.csv")


class TestLadder:
    def test_rows_and_csv(self, tiny_cfg, tmp_path):
        cfg = tiny_cfg.copy(**{"train.epochs": 1})
        path, results = harness.ablation_ladder(cfg, [0], str(tmp_path), singles=True)
        assert list(results) == list(harness.LADDER) + list(harness.SINGLES)
        text = open(path).read()
        assert "row,task,split,metric,value,seed" in text
        assert "# mean host+aug+subkernel+domattn test=" in text

    def test_unknown_row(self, tiny_cfg, tmp_path):
        with pytest.raises(ConfigError):
            harness.ablation_ladder(tiny_cfg, [0], str(tmp_path), rows=["host+lora"])


class TestGradcheckSuite:
    def test_fresh_build_passes(self):
        rep = harness.gradcheck_suite(seeds=range(2))
        assert rep.passed, rep.lines()
        names = set(rep.per_check())
        assert {f"path.{p}" for p in harness.PATHWAYS} <= names
        assert "op.conv2d" in names

    def test_corrupted_backward_names_the_op(self, monkeypatch):
        real = T.tanh

        def broken(x):
            out = real(x)
            bw = out._backward
            out._backward = lambda g: tuple(2.0 * d for d in bw(g))
            return out

        monkeypatch.setattr(T, "tanh", broken)
        rep = harness.gradcheck_suite(seeds=[0], pathways=[])
        assert rep.failures() == ["op.tanh"]
        assert any(l.startswith("FAIL op.tanh") for l in rep.lines())
