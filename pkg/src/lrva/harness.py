"""Training loop, evaluation, sweeps, the ablation ladder and the gradient
check suite.

Everything that a run logs is a function of (config, seed): datasets,
augmentations, batch order and initialisation all derive their generators
from the seed, and the loop is single-threaded.
"""

from __future__ import annotations

import logging
import os
from collections import OrderedDict
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .augment import (
    AugmentationConfig,
    KeyEncoder,
    MemoryBank,
    build_store,
    combined_loss,
    label_breaking_loss,
    make_generator,
    sample_training_batch,
    steps_per_epoch,
)
from .checkpoint import TrainState, load_state, save_state
from .config import ExperimentConfig, parse_config_text
from .errors import ConfigError
from .gradcheck import GradCheckReport, grad_check
from .metrics import MetricReport, classification_report, retrieval_metrics, task_loss
from .model import AdaptedModel
from .optim import Adam
from .tasks import ClassificationDataset, gen_glyph_task, gen_map_pairs, load_lite_directory
from .tensor import Tensor

log = logging.getLogger("lrva")

CSV_HEADER = "task,split,metric,value,seed"
SWEEP_AXES = ("subkernel.u", "domattn.block", "domattn.C", "aug.gamma", "aug.tau")
# a sweep over an axis switches its baseline on
AXIS_ENABLES = {"subkernel": "subkernel.enabled", "domattn": "domattn.enabled", "aug": "aug.enabled"}

LADDER = OrderedDict([
    ("host", {}),
    ("host+aug", {"aug.enabled": True}),
    ("host+aug+subkernel", {"aug.enabled": True, "subkernel.enabled": True}),
    ("host+aug+subkernel+domattn", {"aug.enabled": True, "subkernel.enabled": True, "domattn.enabled": True}),
])
SINGLES = OrderedDict([
    ("host+subkernel", {"subkernel.enabled": True}),
    ("host+domattn", {"domattn.enabled": True}),
])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Splits:
    train: object
    val: object
    test: object

    def digests(self) -> str:
        return " ".join(f"{s}={getattr(self, s).digest()}" for s in ("train", "val", "test"))


def load_splits(cfg: ExperimentConfig) -> Splits:
    src, kind, seed = cfg["data.source"], cfg["task.kind"], cfg["seed"]
    size = cfg["backbone.image_size"]
    if src == "glyph":
        if kind != "classification":
            raise ConfigError("glyph data is a classification task; set task.kind=classification")
        n = cfg["data.n_classes"]
        mk = lambda split, n_items=None: gen_glyph_task(n, cfg["data.per_class"], size, seed, split, n_items)
        return Splits(mk("train"), mk("val", n * cfg["data.val_per_class"]), mk("test", cfg["data.n_test"]))
    if src == "maps":
        if kind != "retrieval":
            raise ConfigError("map data is a retrieval task; set task.kind=retrieval")
        return Splits(gen_map_pairs(cfg["data.n_pairs"], size, seed, "train"),
                      gen_map_pairs(cfg["data.n_val_pairs"], size, seed, "val"),
                      gen_map_pairs(cfg["data.n_test_pairs"], size, seed, "test"))
    root = cfg["data.root"]
    if not root:
        raise ConfigError("data.source=lite needs data.root")
    return Splits(*(load_lite_directory(root, kind, s, size) for s in ("train", "val", "test")))


def augmentation_config(cfg: ExperimentConfig) -> AugmentationConfig:
    return AugmentationConfig(
        gamma=cfg["aug.gamma"], tau=cfg["aug.tau"], steps=cfg["aug.steps"], m=cfg["aug.m"],
        generator_kind=cfg["aug.generator"], lam=cfg["aug.lambda"], sigma=cfg["aug.sigma"],
        bank_size=cfg["aug.bank_size"], preserving=cfg["aug.preserving"], breaking=cfg["aug.breaking"],
        key_momentum=cfg["aug.key_momentum"],
    )


def _check_kind(cfg: ExperimentConfig, dataset) -> None:
    if dataset.kind != cfg["task.kind"]:
        raise ConfigError(f"dataset is a {dataset.kind} task but config asks for {cfg['task.kind']}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _chunked(fn: Callable, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    return np.concatenate([fn(images[i : i + chunk]).data for i in range(0, len(images), chunk)])


def evaluate_model(model: AdaptedModel, dataset, bidirectional: bool = False) -> MetricReport:
    with T.no_grad():
        if isinstance(dataset, ClassificationDataset):
            if model.kind != "classification":
                raise ConfigError("classification data given to a retrieval model")
            if dataset.n_classes != model.head.n_classes:
                raise ConfigError(f"dataset has {dataset.n_classes} classes, head has {model.head.n_classes}")
            return classification_report(_chunked(model.logits, dataset.images), dataset.labels)
        if model.kind != "retrieval":
            raise ConfigError("retrieval metrics requested on a classification model")
        za = _chunked(model.retrieval_embedding, dataset.queries)
        zb = _chunked(model.retrieval_embedding, dataset.gallery)
        return retrieval_metrics(za @ zb.T, dataset.ground_truth, bidirectional=bidirectional)


def _selection_key(rep: MetricReport) -> tuple:
    return (rep.primary(), -(rep.mean_rank or 0.0))


# ---------------------------------------------------------------------------
# checkpoint <-> model
# ---------------------------------------------------------------------------


def capture_state(model: AdaptedModel, opt: Adam, bank: Optional[MemoryBank], step: int, epoch: int,
                  keys: Optional[KeyEncoder] = None) -> TrainState:
    params = OrderedDict((n, (t.data.copy(), f)) for n, t, f in model.store.items())
    moments = {k: v.copy() for k, v in opt.state().items()}
    n_classes = model.head.n_classes if model.kind == "classification" else 0
    return TrainState(config_text=model.cfg.dump(), params=params, step=step, epoch=epoch, adam_t=opt.t,
                      moments=moments, bank=bank.contents() if bank is not None and len(bank) else None,
                      n_classes=n_classes, key_params=keys.state() if keys is not None else {})


def load_into(model: AdaptedModel, state: TrainState) -> None:
    names = model.store.names()
    if set(names) != set(state.params):
        missing = sorted(set(names) ^ set(state.params))
        raise ConfigError(f"checkpoint/config shape mismatch: parameter sets differ at {missing[0]!r}")
    for name, t, frozen in model.store.items():
        arr, ck_frozen = state.params[name]
        if arr.shape != t.shape or ck_frozen != frozen:
            raise ConfigError(f"checkpoint/config shape mismatch at {name!r}: "
                              f"checkpoint {arr.shape} vs model {t.shape}")
        t.data[...] = arr


def model_from_checkpoint(path: str, cfg: Optional[ExperimentConfig] = None) -> AdaptedModel:
    state = load_state(path)
    cfg = cfg if cfg is not None else parse_config_text(state.config_text)
    model = AdaptedModel(cfg, n_classes=state.n_classes or None)
    load_into(model, state)
    return model


def evaluate(checkpoint: str, dataset, split: Optional[str] = None, cfg: Optional[ExperimentConfig] = None,
             bidirectional: Optional[bool] = None) -> MetricReport:
    """Metrics of a saved model on ``dataset`` (``split`` is informational)."""
    model = model_from_checkpoint(checkpoint, cfg)
    _check_kind(model.cfg, dataset)
    if split is not None and getattr(dataset, "split", split) != split:
        raise ConfigError(f"dataset split {dataset.split!r} != requested {split!r}")
    bidir = model.cfg["eval.bidirectional"] if bidirectional is None else bidirectional
    return evaluate_model(model, dataset, bidirectional=bidir)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: str
    checkpoint: str
    csv: str
    val: MetricReport
    test: MetricReport
    best_epoch: int
    losses: List[float] = field(default_factory=list)
    trainable: Dict[str, int] = field(default_factory=dict)


def step_loss(model: AdaptedModel, store, task_idx, pair_idx, aug: Optional[AugmentationConfig],
              bank: Optional[MemoryBank], sigma_task: float, keys: Optional[KeyEncoder] = None) -> Tensor:
    """Task loss plus (when label-breaking pairs are on) lambda times the
    memory-bank contrastive loss.  Task items and anchors share one forward
    pass; positives go through the momentum key encoder without a tape."""
    nb = len(task_idx)
    retrieval = model.kind == "retrieval"
    parts = [store.task_images[task_idx]]
    if retrieval:
        parts.append(store.task_targets[task_idx])
    use_lb = aug is not None and aug.breaking and len(pair_idx) > 0
    if use_lb:
        parts.append(store.pair_anchors[pair_idx])
    emb = model.embed(np.concatenate(parts))
    if retrieval:
        project = (lambda z: model.head(z)) if model.head is not None else (lambda z: z)
        za = T.l2_normalize(project(emb[:nb]), -1)
        zb = T.l2_normalize(project(emb[nb : 2 * nb]), -1)
        loss = task_loss("retrieval", (za, zb), sigma_task=sigma_task)
        off = 2 * nb
    else:
        loss = task_loss("classification", model.head(emb[:nb]), store.task_targets[task_idx])
        off = nb
    if not use_lb:
        return loss
    anchors = T.l2_normalize(emb[off:], -1)
    with T.no_grad(), (keys.active() if keys is not None else nullcontext()):
        positives = T.l2_normalize(model.embed(store.pair_positives[pair_idx]), -1)
    lb = label_breaking_loss(anchors, positives, bank, sigma=aug.sigma)
    return combined_loss(loss, lb, aug.lam)


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def config_comment(cfg: ExperimentConfig) -> str:
    return "".join(f"# {line}\n" for line in cfg.dump().splitlines())


def write_metrics_csv(path: str, cfg: ExperimentConfig, splits: Optional[Splits], rows) -> None:
    task = cfg["task.kind"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(config_comment(cfg))
        if splits is not None:
            fh.write(f"# datasets {splits.digests()}\n")
        fh.write(CSV_HEADER + "\n")
        for split, metric, value in rows:
            fh.write(f"{task},{split},{metric},{_fmt(value)},{cfg['seed']}\n")


def train(cfg: ExperimentConfig, out_dir: str, splits: Optional[Splits] = None,
          on_step: Optional[Callable] = None) -> TrainResult:
    """Train the enabled trainable parts on the frozen backbone, keep the
    best-validation checkpoint, and report its val and test metrics."""
    os.makedirs(out_dir, exist_ok=True)
    splits = splits if splits is not None else load_splits(cfg)
    for ds in (splits.train, splits.val, splits.test):
        _check_kind(cfg, ds)
    seed = cfg["seed"]
    aug = augmentation_config(cfg) if cfg["aug.enabled"] else None
    generator = None
    if aug is not None:
        generator = make_generator(aug, splits.train, manifest_root=cfg["data.root"] or None)
    store = build_store(splits.train, aug, seed, generator)
    n_classes = splits.train.n_classes if cfg["task.kind"] == "classification" else None
    model = AdaptedModel(cfg, n_classes)
    opt = Adam(model.store.trainable(), lr=cfg["optim.lr"], betas=(cfg["optim.beta1"], cfg["optim.beta2"]),
               eps=cfg["optim.eps"])
    bank = MemoryBank(aug.bank_size) if aug is not None else None
    keys = KeyEncoder(model.store.trainable(), aug.key_momentum) if aug is not None and aug.breaking else None
    bidir = cfg["eval.bidirectional"]
    batch = cfg["train.batch"]
    if batch < 1 or cfg["train.epochs"] < 0:
        raise ConfigError("train.batch must be >= 1 and train.epochs >= 0")
    if cfg["task.kind"] == "retrieval" and min(batch, store.n_task) < 2:
        raise ConfigError("retrieval training needs at least 2 pairs per batch")

    ckpt = os.path.join(out_dir, "checkpoint.lrva")
    losses: List[float] = []
    n_steps = steps_per_epoch(store, batch)
    best_key, best_epoch = None, -1
    with open(os.path.join(out_dir, "train_log.csv"), "w", encoding="utf-8") as lf:
        lf.write("epoch,step,loss\n")
        has_params = bool(opt.params)
        for epoch in range(cfg["train.epochs"] if has_params else 0):
            for step in range(n_steps):
                task_idx, pair_idx = sample_training_batch(store, batch, seed, epoch, step)
                loss = step_loss(model, store, task_idx, pair_idx, aug, bank, cfg["task.sigma"], keys)
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                if keys is not None:
                    keys.update()
                value = loss.item()
                losses.append(value)
                lf.write(f"{epoch},{step},{value!r}\n")
                log.debug("epoch %d step %d loss %.6f", epoch, step, value)
                if on_step is not None:
                    on_step(model, epoch, step, value)
            rep = evaluate_model(model, splits.val, bidir)
            log.info("epoch %d val %.3f", epoch, rep.primary())
            if best_key is None or _selection_key(rep) > best_key:
                best_key, best_epoch = _selection_key(rep), epoch
                save_state(ckpt, capture_state(model, opt, bank, (epoch + 1) * n_steps, epoch, keys))
        if best_epoch < 0:
            save_state(ckpt, capture_state(model, opt, bank, 0, 0, keys))

    load_into(model, load_state(ckpt))
    val = evaluate_model(model, splits.val, bidir)
    test = evaluate_model(model, splits.test, bidir)
    counts = model.trainable_counts()
    rows = [("val", k, v) for k, v in val.rows()] + [("test", k, v) for k, v in test.rows()]
    rows.append(("val", "best_epoch", float(best_epoch)))
    rows += [("model", f"trainable.{k}", float(v)) for k, v in counts.items()]
    csv = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(csv, cfg, splits, rows)
    return TrainResult(out_dir=out_dir, checkpoint=ckpt, csv=csv, val=val, test=test, best_epoch=best_epoch,
                       losses=losses, trainable=counts)


# ---------------------------------------------------------------------------
# sweeps and the ablation ladder
# ---------------------------------------------------------------------------


def sweep_configs(cfg: ExperimentConfig, axis: str, values: Sequence) -> list:
    """Validated per-value configs; any invalid value fails before training."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"cannot sweep {axis!r}; axes are {', '.join(SWEEP_AXES)}")
    out = []
    for v in values:
        c = cfg.copy(**{axis: v, AXIS_ENABLES[axis.split(".")[0]]: True})
        if c["aug.enabled"]:
            augmentation_config(c)
        AdaptedModel(c, n_classes=max(c["data.n_classes"], 1))
        out.append((v, c))
    return out


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, seeds: Sequence[int], out_dir: str) -> str:
    plan = sweep_configs(cfg, axis, values)
    os.makedirs(out_dir, exist_ok=True)
    rows, per_value = [], OrderedDict()
    for v, c in plan:
        for s in seeds:
            res = train(c.copy(seed=s), os.path.join(out_dir, f"{axis}={v}", f"seed{s}"))
            primary = "top1" if res.val.top1 is not None else "r_at_1"
            rows.append((v, s, primary, res.val.primary(), res.test.primary()))
            per_value.setdefault(v, []).append(res.val.primary())
    path = os.path.join(out_dir, "sweep.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_comment(cfg))
        fh.write("axis,axis_value,task,split,metric,value,seed,test_value\n")
        for v, s, metric, val, test in rows:
            fh.write(f"{axis},{v},{cfg['task.kind']},val,{metric},{_fmt(val)},{s},{_fmt(test)}\n")
        for v, vals in per_value.items():
            fh.write(f"# mean {axis}={v} val={_fmt(float(np.mean(vals)))}\n")
    return path


def ablation_ladder(cfg: ExperimentConfig, seeds: Sequence[int], out_dir: str,
                    rows: Optional[Sequence[str]] = None, singles: bool = False) -> tuple:
    """Train the ladder rows (optionally plus single-baseline rows) for every
    seed.  Returns (csv path, {row: [test primary per seed]})."""
    table = OrderedDict(LADDER)
    if singles:
        table.update(SINGLES)
    names = list(rows) if rows is not None else list(table)
    for n in names:
        if n not in table:
            raise ConfigError(f"unknown ladder row {n!r}; rows are {', '.join(table)}")
    off = {"aug.enabled": False, "subkernel.enabled": False, "domattn.enabled": False}
    results: "OrderedDict[str, list]" = OrderedDict()
    lines = []
    for n in names:
        c = cfg.copy(**{**off, **table[n]})
        for s in seeds:
            res = train(c.copy(seed=s), os.path.join(out_dir, n, f"seed{s}"))
            results.setdefault(n, []).append(res.test.primary())
            for split, rep in (("val", res.val), ("test", res.test)):
                for metric, value in rep.rows():
                    lines.append(f"{n},{cfg['task.kind']},{split},{metric},{_fmt(value)},{s}\n")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "ladder.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_comment(cfg))
        fh.write("row," + CSV_HEADER + "\n")
        fh.writelines(lines)
        for n, vals in results.items():
            fh.write(f"# mean {n} test={_fmt(float(np.mean(vals)))}\n")
    return path, results


# ---------------------------------------------------------------------------
# gradient check suite
# ---------------------------------------------------------------------------


def _op_cases(rng: np.random.Generator) -> "OrderedDict[str, tuple]":
    """Primitive-level checks: op name -> (loss closure, inputs)."""
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)))
    v = Tensor(rng.normal(size=(4,)), requires_grad=True)
    img = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 2, 2, 2)), requires_grad=True)
    pw = Tensor(rng.normal(size=(1, 2, 2, 2)))
    idx = rng.integers(0, 12, size=(5,))
    labels = rng.integers(0, 4, size=3)
    g, b = Tensor(rng.normal(size=4), requires_grad=True), Tensor(rng.normal(size=4), requires_grad=True)
    m = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    return OrderedDict([
        ("add", (lambda: ((x + v) * w).sum(), [x, v])),
        ("mul", (lambda: ((x * v) * w).sum(), [x, v])),
        ("matmul", (lambda: ((x @ m) * (x @ m)).sum(), [x, m])),
        ("exp", (lambda: (T.exp(x * 0.3) * w).sum(), [x])),
        ("log", (lambda: (T.log(T.exp(x) + 1.0) * w).sum(), [x])),
        ("tanh", (lambda: (T.tanh(x) * w).sum(), [x])),
        ("gelu", (lambda: (T.gelu(x) * w).sum(), [x])),
        ("softmax", (lambda: (T.softmax(x, -1) * w).sum(), [x])),
        ("log_softmax", (lambda: (T.log_softmax(x, -1) * w).sum(), [x])),
        ("layer_norm", (lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b])),
        ("l2_normalize", (lambda: (T.l2_normalize(x, -1) * w).sum(), [x])),
        ("cross_entropy", (lambda: T.cross_entropy(x, labels), [x])),
        ("take", (lambda: (T.take(x, idx) * T.take(x, idx)).sum(), [x])),
        ("concat", (lambda: (T.concat([x, x * 2.0], 0) * T.concat([w, w], 0)).sum(), [x])),
        ("transpose", (lambda: (T.transpose(x, (1, 0)) @ w).sum(), [x])),
        ("conv2d", (lambda: (T.conv2d(img, k, 2) * T.conv2d(img, k, 2)).sum(), [img, k])),
        ("max_pool2d", (lambda: (T.max_pool2d(T.conv2d(img, k, 1), 2, 2) * pw).sum(), [img, k])),
    ])


def _tiny_model(kind_flags: dict, seed: int) -> AdaptedModel:
    base = {
        "backbone.image_size": 8, "backbone.patch_size": 4, "backbone.d_model": 8, "backbone.n_heads": 2,
        "backbone.n_blocks": 2, "backbone.mlp_ratio": 2, "host.bottleneck_dim": 2, "host.rank": 2,
        "subkernel.u": 2, "subkernel.v": 2, "domattn.C": 2, "domattn.block": 0, "seed": seed,
    }
    base.update(kind_flags)
    model = AdaptedModel(ExperimentConfig(base), n_classes=3)
    # move every trainable tensor off its (often zero) initial value so that
    # each pathway has non-trivial gradients
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    for _, t in model.store.trainable():
        t.data[...] = rng.normal(scale=0.5, size=t.shape)
    return model


PATHWAYS = OrderedDict([
    ("subkernel.w", ({"subkernel.enabled": True, "host.method": "none"}, ("subkernel.w",))),
    ("domattn.maps", ({"domattn.enabled": True, "host.method": "none"}, ("domattn.maps",))),
    ("domattn.r", ({"domattn.enabled": True, "host.method": "none"}, ("domattn.r",))),
    ("domattn.alpha", ({"domattn.enabled": True, "host.method": "none"}, ("domattn.alpha",))),
    ("bottleneck", ({"host.method": "bottleneck"}, ("host.bottleneck.",))),
    ("lowrank", ({"host.method": "lowrank"}, ("host.lowrank.",))),
    ("probe", ({"host.method": "probe"}, ("head.",))),
])


@dataclass
class SuiteReport:
    checks: List[GradCheckReport]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def per_check(self) -> "OrderedDict[str, float]":
        out: "OrderedDict[str, float]" = OrderedDict()
        for c in self.checks:
            out[c.name] = max(out.get(c.name, 0.0), c.max_rel_error)
        return out

    def failures(self) -> List[str]:
        return sorted({c.name for c in self.checks if not c.passed})

    def lines(self) -> List[str]:
        tol = self.checks[0].tol if self.checks else 0.0
        return [f"{'PASS' if err < tol else 'FAIL'} {name} max_rel_err={err:.3e}"
                for name, err in self.per_check().items()]


def gradcheck_suite(seeds: Sequence[int] = range(20), tol: float = 1e-4, eps: float = 1e-5,
                    pathways: Optional[Sequence[str]] = None) -> SuiteReport:
    """Finite-difference checks of every primitive op and of every trainable
    pathway through a tiny model (classification loss plus the contrastive
    loss), repeated over ``seeds``."""
    checks = []
    names = list(pathways) if pathways is not None else list(PATHWAYS)
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 55]))
        for op, (f, xs) in _op_cases(rng).items():
            checks.append(grad_check(f, xs, eps=eps, tol=tol, name=f"op.{op}"))
        images = np.random.default_rng(np.random.SeedSequence([seed, 66])).random((4, 3, 8, 8))
        labels = np.array([0, 1, 2, 1])
        for name in names:
            flags, prefixes = PATHWAYS[name]
            model = _tiny_model(flags, seed)
            xs = [t for n, t in model.store.trainable() if n.startswith(prefixes)]

            def f(model=model):
                emb = model.embed(images)
                ce = T.cross_entropy(model.head(emb), labels)
                z = T.l2_normalize(emb, -1)
                bank = MemoryBank(0)
                return ce + label_breaking_loss(z[:2], z[2:], bank, sigma=0.5, enqueue=False) * 0.1

            checks.append(grad_check(f, xs, eps=eps, tol=tol, name=f"path.{name}"))
    return SuiteReport(checks)
