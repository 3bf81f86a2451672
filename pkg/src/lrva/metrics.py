"""Top-k accuracy, Recall@k / mean rank, and the task losses.

Ranks are 1-indexed.  Ties are broken in favour of the lower index, so a
tied ground truth counts as ahead of every tied item with a larger index.
All percentages are on a 0-100 scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .tasks import check_bijective
from .tensor import Tensor


@dataclass
class MetricReport:
    top1: Optional[float] = None
    top5: Optional[float] = None
    r_at_1: Optional[float] = None
    r_at_5: Optional[float] = None
    mean_rank: Optional[float] = None
    directions: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.top1 is not None and self.top5 is not None and self.top1 > self.top5:
            raise ValueError("top1 > top5")
        if self.r_at_1 is not None and self.r_at_5 is not None and self.r_at_1 > self.r_at_5:
            raise ValueError("R@1 > R@5")
        if self.mean_rank is not None and self.mean_rank < 1:
            raise ValueError("mean rank below 1")

    def primary(self) -> float:
        """Higher-is-better headline number used for model selection."""
        return self.top1 if self.top1 is not None else self.r_at_1

    def rows(self) -> list:
        out = [(k, v) for k, v in asdict(self).items() if k != "directions" and v is not None]
        for direction, rep in self.directions.items():
            out += [(f"{direction}.{k}", v) for k, v in rep.items() if v is not None]
        return out


def ranks_of_targets(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-indexed rank of ``scores[i, targets[i]]`` in row i under descending
    order, ties resolved by lower column index."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n, m = scores.shape
    if targets.size and (targets.min() < 0 or targets.max() >= m):
        raise ValueError(f"target index out of range [0, {m})")
    true = scores[np.arange(n), targets][:, None]
    cols = np.arange(m)[None, :]
    ahead = (scores > true) | ((scores == true) & (cols < targets[:, None]))
    return ahead.sum(axis=1) + 1


def topk_accuracy(scores, labels, k: int) -> float:
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if k > scores.shape[1]:
        raise ValueError(f"k={k} exceeds number of classes {scores.shape[1]}")
    ranks = ranks_of_targets(scores, labels)
    return 100.0 * float(np.mean(ranks <= k))


def _recall_report(ranks: np.ndarray) -> dict:
    return {
        "r_at_1": 100.0 * float(np.mean(ranks <= 1)),
        "r_at_5": 100.0 * float(np.mean(ranks <= 5)),
        "mean_rank": float(np.mean(ranks)),
    }


def retrieval_metrics(similarity, ground_truth, bidirectional: bool = False) -> MetricReport:
    """Recall@1/5 and mean rank of the ground-truth gallery item per query.

    With ``bidirectional`` the gallery-to-query direction is scored on the
    transposed matrix and the two directions are averaged.
    """
    S = similarity.data if isinstance(similarity, Tensor) else np.asarray(similarity, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.int64)
    check_bijective(gt, S.shape[1])
    fwd = _recall_report(ranks_of_targets(S, gt))
    if not bidirectional:
        return MetricReport(**fwd)
    inverse = np.empty_like(gt)
    inverse[gt] = np.arange(len(gt))
    bwd = _recall_report(ranks_of_targets(S.T, inverse))
    avg = {k: (fwd[k] + bwd[k]) / 2.0 for k in fwd}
    return MetricReport(**avg, directions={"a2b": fwd, "b2a": bwd})


def classification_report(scores, labels) -> MetricReport:
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    k5 = min(5, scores.shape[1])
    return MetricReport(top1=topk_accuracy(scores, labels, 1), top5=topk_accuracy(scores, labels, k5))


def info_nce(queries: Tensor, keys: Tensor, sigma: float) -> Tensor:
    """Mean -log softmax of the diagonal of ``queries @ keys.T / sigma``."""
    logits = (queries @ T.swap_last(keys)) * (1.0 / sigma)
    n = queries.shape[0]
    return -T.mean(T.pick(T.log_softmax(logits, -1), np.arange(n)))


def task_loss(kind: str, outputs, targets=None, sigma_task: float = 0.07) -> Tensor:
    """Cross-entropy over class logits, or symmetric in-batch InfoNCE between
    the two domains' normalised embeddings (``outputs`` = (za, zb))."""
    if kind == "classification":
        return T.cross_entropy(outputs, targets)
    if kind == "retrieval":
        za, zb = outputs
        if za.shape[0] < 2:
            raise ValueError("retrieval task loss needs a batch of at least 2 pairs")
        return (info_nce(za, zb, sigma_task) + info_nce(zb, za, sigma_task)) * 0.5
    raise ValueError(f"unknown task kind {kind!r}")
