"""Greedy ensemble selection and the alternative aggregation rules."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cohort import (REGRESSION, Pairing, Task, _forward, as_target_matrix, curvature,
                     init_student, predict, step_from_forward, task_loss)
from .errors import EmptyPool, FormatError, MethodTaskMismatch, ShapeMismatch
from .numerics import make_rng, solve_least_squares

METHODS = ("best-single", "stacking", "simple-average", "weighted-average",
           "majority-vote", "weighted-vote")


@dataclass(frozen=True)
class SelectionConfig:
    p_prune: float = 0.5
    n_init: int = 2
    n_c: Optional[int] = None  # None means min(10, survivors)

    def __post_init__(self):
        if not 0.0 <= self.p_prune < 1.0:
            raise ValueError("p_prune must lie in [0, 1)")
        if self.n_init < 1:
            raise ValueError("n_init must be at least 1")
        if self.n_c is not None and self.n_c < self.n_init:
            raise ValueError("n_c must be at least n_init")


@dataclass
class Committee:
    members: List[Pairing]
    aggregation: str = "simple-average"
    weights: Optional[List[float]] = None
    val_loss: float = float("nan")

    def __post_init__(self):
        if len(set(self.members)) != len(self.members) or not self.members:
            raise ValueError("committee members must be distinct and nonempty")
        if self.aggregation == "weighted-average":
            w = np.asarray(self.weights, dtype=float)
            if w.shape[0] != len(self.members) or abs(w.sum() - 1.0) > 1e-12 or np.any(w <= 0):
                raise ValueError("weighted committee needs positive weights summing to 1")

    def predict(self, predictions: Dict[Pairing, np.ndarray]) -> np.ndarray:
        stack = np.stack([predictions[I] for I in self.members])
        if self.aggregation == "weighted-average":
            return np.tensordot(np.asarray(self.weights), stack, axes=1)
        return stack.mean(axis=0)

    def to_text(self) -> str:
        return json.dumps({
            "format": "committee", "version": 1,
            "members": [list(map(int, I)) for I in self.members],
            "aggregation": self.aggregation,
            "weights": None if self.weights is None else [float(w) for w in self.weights],
            "val_loss": None if math.isnan(self.val_loss) else float(self.val_loss),
        }, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "Committee":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(str(exc)) from exc
        if d.get("format") != "committee" or d.get("version") != 1:
            raise FormatError("not a version-1 committee record")
        vl = d.get("val_loss")
        return cls([tuple(m) for m in d["members"]], d["aggregation"], d["weights"],
                   float("nan") if vl is None else vl)


def _mean_loss(stack_sum, count, y, task):
    return task_loss(stack_sum / count, y, task)


def sort_by_loss(losses: Dict[Pairing, float]) -> List[Pairing]:
    """Ascending loss; ties broken by lexicographic pairing order."""
    return sorted(losses, key=lambda I: (losses[I], I))


def ensemble_select(val_predictions: Dict[Pairing, np.ndarray], y_val,
                    config: SelectionConfig = SelectionConfig(),
                    task: Task = REGRESSION) -> Committee:
    """Prune the worst students, seed with the best ``n_init``, then add greedily.

    A candidate joins only if the averaged committee strictly lowers the
    validation loss; candidates are drawn without replacement.
    """
    if not val_predictions:
        raise EmptyPool("no students to select from")
    losses = {I: task_loss(P, y_val, task) for I, P in val_predictions.items()}
    ranked = sort_by_loss(losses)
    n_drop = math.ceil(config.p_prune * len(ranked))
    survivors = ranked[: len(ranked) - n_drop]
    if len(survivors) < config.n_init:
        raise EmptyPool(f"{len(survivors)} survivors for n_init={config.n_init}")
    n_c = config.n_c if config.n_c is not None else min(10, len(survivors))
    n_c = max(min(n_c, len(survivors)), config.n_init)
    members = survivors[: config.n_init]
    total = sum(val_predictions[I] for I in members)
    current = _mean_loss(total, len(members), y_val, task)
    pool = survivors[config.n_init:]
    while pool and len(members) < n_c:
        scores = [_mean_loss(total + val_predictions[I], len(members) + 1, y_val, task) for I in pool]
        j = int(np.argmin(scores))  # first minimum keeps the sorted tie order
        if not scores[j] < current:
            break
        members.append(pool.pop(j))
        total = total + val_predictions[members[-1]]
        current = scores[j]
    return Committee(list(members), "simple-average", None, current)


# ---------------------------------------------------------------- aggregators

def performance_weights(val_predictions: Sequence[np.ndarray], y_val, task: Task) -> np.ndarray:
    """Weights proportional to 1/loss (regression) or accuracy (classification)."""
    if task.kind == "regression":
        perf = np.array([1.0 / max(task_loss(P, y_val, task), 1e-300) for P in val_predictions])
    else:
        y = as_target_matrix(y_val, task)
        perf = np.array([np.mean(np.argmax(P, axis=1) == y) for P in val_predictions])
        if perf.sum() == 0:
            perf = np.ones_like(perf)
    return perf / perf.sum()


def _votes(predictions, weights, n_classes):
    labels = np.stack([np.argmax(P, axis=1) for P in predictions])  # K x n
    n = labels.shape[1]
    tally = np.zeros((n, n_classes))
    for w, lab in zip(weights, labels):
        tally[np.arange(n), lab] += w
    # argmax returns the first maximum, i.e. the smallest class on ties
    return np.eye(n_classes)[np.argmax(tally, axis=1)]


def aggregate(predictions: Sequence[np.ndarray], method: str, task: Task = REGRESSION,
              weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Combine member outputs.  Votes return one-hot class indicators.

    ``weights`` are the normalized member weights for the weighted rules; for
    ``best-single`` the member with the largest weight is returned.
    """
    preds = [np.asarray(P, dtype=float) for P in predictions]
    if not preds:
        raise EmptyPool("nothing to aggregate")
    if any(P.shape != preds[0].shape for P in preds):
        raise ShapeMismatch("member predictions disagree in shape")
    if method in ("majority-vote", "weighted-vote") and task.kind != "classification":
        raise MethodTaskMismatch(f"{method} needs a classification task")
    K = len(preds)
    w = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=float)
    if method == "simple-average":
        return np.mean(preds, axis=0)
    if method == "weighted-average":
        return np.tensordot(w / w.sum(), np.stack(preds), axes=1)
    if method == "best-single":
        return preds[int(np.argmax(w))]
    if method == "majority-vote":
        return _votes(preds, np.ones(K), task.n_classes)
    if method == "weighted-vote":
        return _votes(preds, w, task.n_classes)
    if method == "stacking":
        raise ValueError("stacking needs a fitted head; use fit_aggregator")
    raise ValueError(f"unknown aggregation method {method!r}")


def _softmax_head(F, y, n_classes, epochs=500):
    task = Task("classification", n_classes)
    s = init_student((0,), F.shape[1], n_classes, make_rng(0))
    lr = 1.0 / curvature(F, task)
    for _ in range(epochs):
        out, acts = _forward(s, F)
        s, _, _ = step_from_forward(s, acts, out, y, [], [], 0.0, lr, task)
    return s


@dataclass
class Aggregator:
    method: str
    members: List[Pairing]
    task: Task
    weights: Optional[np.ndarray] = None
    head: object = None

    def predict(self, predictions: Dict[Pairing, np.ndarray]) -> np.ndarray:
        preds = [predictions[I] for I in self.members]
        if self.method != "stacking":
            return aggregate(preds, self.method, self.task, self.weights)
        F = np.hstack(preds)
        if self.task.kind == "regression":
            return np.hstack([F, np.ones((F.shape[0], 1))]) @ self.head
        return predict(self.head, F)


def fit_aggregator(method: str, val_predictions: Dict[Pairing, np.ndarray], y_val,
                   task: Task = REGRESSION, stacking_ridge: float = 1e-8) -> Aggregator:
    """Fit an aggregation rule on validation outputs of every student.

    Stacking fits a linear head (least squares with a tiny relative ridge, or
    softmax regression) on the concatenated member outputs.
    """
    if method not in METHODS:
        raise ValueError(f"unknown aggregation method {method!r}")
    if method in ("majority-vote", "weighted-vote") and task.kind != "classification":
        raise MethodTaskMismatch(f"{method} needs a classification task")
    members = sorted(val_predictions)
    preds = [val_predictions[I] for I in members]
    if method == "stacking":
        F = np.hstack(preds)
        if task.kind == "regression":
            A = np.hstack([F, np.ones((F.shape[0], 1))])
            scale = float(np.trace(A.T @ A)) / A.shape[1]
            head = solve_least_squares(A, as_target_matrix(y_val, task), stacking_ridge * scale)
        else:
            head = _softmax_head(F, as_target_matrix(y_val, task), task.n_classes)
        return Aggregator(method, members, task, None, head)
    w = performance_weights(preds, y_val, task)
    if method == "best-single":
        losses = {I: task_loss(P, y_val, task) for I, P in zip(members, preds)}
        if task.kind == "classification":
            y = as_target_matrix(y_val, task)
            # best accuracy, then lowest loss, then pairing order
            best = min(members, key=lambda I: (-np.mean(np.argmax(val_predictions[I], 1) == y),
                                               losses[I], I))
        else:
            best = sort_by_loss(losses)[0]
        return Aggregator(method, [best], task, np.ones(1))
    return Aggregator(method, members, task, w)
