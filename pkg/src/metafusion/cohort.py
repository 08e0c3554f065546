"""Pairings, fused representations and the student models trained on them."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import extractors as ext
from .errors import NonFiniteLoss, NotFitted, ShapeMismatch

Pairing = Tuple[int, ...]


@dataclass(frozen=True)
class Task:
    kind: str = "regression"  # or "classification"
    n_classes: int = 0
    kl_direction: str = "peer||self"

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.kind!r}")
        if self.kind == "classification" and self.n_classes < 2:
            raise ValueError("classification needs n_classes >= 2")
        if self.kl_direction not in ("peer||self", "self||peer"):
            raise ValueError("kl_direction must be 'peer||self' or 'self||peer'")

    @property
    def out_dim(self) -> int:
        return 1 if self.kind == "regression" else self.n_classes


REGRESSION = Task()


# ---------------------------------------------------------------- pairings

def build_pairings(bank_sizes: Sequence[int]) -> List[Pairing]:
    """All tuples in the product of ``{0..k_m+1}`` except the all-null one."""
    if len(bank_sizes) < 1 or any(k < 0 for k in bank_sizes):
        raise ValueError("need at least one modality and nonnegative bank sizes")
    ranges = [range(k + 2) for k in bank_sizes]
    return [t for t in itertools.product(*ranges) if any(t)]


def identity_index(bank: Sequence[ext.Extractor]) -> int:
    return len(bank) - 1


def representations(banks, modalities) -> List[List[np.ndarray]]:
    """Transform every modality with every extractor of its bank."""
    if len(banks) != len(modalities):
        raise ShapeMismatch("one bank per modality required")
    return [[ext.transform(e, m) for e in bank] for bank, m in zip(banks, modalities)]


def fuse_reps(pairing: Pairing, reps) -> np.ndarray:
    if len(pairing) != len(reps):
        raise ShapeMismatch("pairing length differs from the number of modalities")
    blocks = [reps[m][i] for m, i in enumerate(pairing)]
    n = blocks[0].shape[0]
    return np.hstack(blocks) if blocks else np.zeros((n, 0))


def fuse(pairing: Pairing, banks, modalities) -> np.ndarray:
    """Column-wise concatenation of the selected extractor outputs, in modality order."""
    if len(pairing) != len(banks) or len(banks) != len(modalities):
        raise ShapeMismatch("pairing, banks and modalities must have equal length")
    blocks = []
    for m, i in enumerate(pairing):
        e = banks[m][i]
        if not e.fitted:
            raise NotFitted(f"extractor {e.label()} of modality {m} is not fitted")
        blocks.append(ext.transform(e, modalities[m]))
    return np.hstack(blocks)


# ---------------------------------------------------------------- students

@dataclass(frozen=True)
class Student:
    """A linear model or a tanh MLP acting on one fused representation.

    ``weights[l]`` has shape (fan_in, fan_out).  A linear student has a single
    layer; an MLP has ``len(hidden) + 1`` layers.
    """
    pairing: Pairing
    kind: str
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    ridge: float = 0.0
    fit_intercept: bool = True

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])

    def with_flat(self, vec) -> "Student":
        vec = np.asarray(vec, dtype=float)
        out, pos = [], 0
        for a in self.weights + self.biases:
            out.append(vec[pos:pos + a.size].reshape(a.shape))
            pos += a.size
        L = len(self.weights)
        return replace(self, weights=tuple(out[:L]), biases=tuple(out[L:]))


def init_student(pairing: Pairing, in_width: int, out_dim: int, rng: np.random.Generator,
                 kind: str = "linear", hidden: Sequence[int] = (16,), ridge: float = 0.0,
                 fit_intercept: bool = True, init_scale: float = 0.01) -> Student:
    """Small random weights and zero biases.

    Linear weights are N(0, init_scale^2 / fan_in); MLP layers use
    N(0, 1 / fan_in) so tanh units start in their linear range.
    """
    if kind == "linear":
        widths = [in_width, out_dim]
    elif kind == "mlp":
        widths = [in_width] + [int(h) for h in hidden] + [out_dim]
    else:
        raise ValueError(f"unknown student kind {kind!r}")
    Ws, bs = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        scale = (init_scale if kind == "linear" else 1.0) / np.sqrt(max(a, 1))
        Ws.append(scale * rng.standard_normal((a, b)))
        bs.append(np.zeros(b))
    return Student(tuple(pairing), kind, tuple(Ws), tuple(bs), float(ridge), fit_intercept)


def _forward(student: Student, H: np.ndarray):
    if H.ndim != 2 or H.shape[1] != student.in_width:
        raise ShapeMismatch(f"input width {H.shape[-1]} != student width {student.in_width}")
    acts = [H]
    a = H
    last = len(student.weights) - 1
    for l, (W, b) in enumerate(zip(student.weights, student.biases)):
        a = a @ W + b
        if l < last:
            a = np.tanh(a)
        acts.append(a)
    return a, acts


def predict(student: Student, H) -> np.ndarray:
    """Outputs of shape (n, d); logits for classification."""
    return _forward(student, np.asarray(H, dtype=float))[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def as_target_matrix(targets, task: Task) -> np.ndarray:
    t = np.asarray(targets)
    if task.kind == "regression":
        return t.reshape(t.shape[0], -1).astype(float)
    return t.astype(int).ravel()


def task_loss(outputs: np.ndarray, targets, task: Task) -> float:
    """Mean squared error, or mean cross-entropy on softmax of logits."""
    if task.kind == "regression":
        t = as_target_matrix(targets, task)
        return float(np.mean((outputs - t) ** 2))
    t = as_target_matrix(targets, task)
    return float(-np.mean(log_softmax(outputs)[np.arange(t.shape[0]), t]))


def divergence(own: np.ndarray, peer: np.ndarray, task: Task) -> float:
    if task.kind == "regression":
        return float(np.mean((own - peer) ** 2))
    ls, lp = log_softmax(own), log_softmax(peer)
    if task.kl_direction == "peer||self":
        return float(np.mean(np.sum(np.exp(lp) * (lp - ls), axis=1)))
    return float(np.mean(np.sum(np.exp(ls) * (ls - lp), axis=1)))


def _output_grad(out, targets, peers, peer_weights, rho, task):
    """Loss terms and d(loss)/d(outputs) for one student."""
    n = out.shape[0]
    if task.kind == "regression":
        t = as_target_matrix(targets, task)
        if t.shape != out.shape:
            raise ShapeMismatch(f"targets {t.shape} vs outputs {out.shape}")
        size = out.size
        resid = out - t
        tl = float(np.sum(resid**2) / size)
        g = 2.0 * resid / size
        dl = 0.0
        for P, w in zip(peers, peer_weights):
            if P.shape != out.shape:
                raise ShapeMismatch("peer outputs must match the student's output shape")
            diff = out - P
            dl += w * float(np.sum(diff**2) / size)
            g = g + (2.0 * rho * w / size) * diff
        return tl, dl, g
    t = as_target_matrix(targets, task)
    ls = log_softmax(out)
    p = np.exp(ls)
    tl = float(-np.mean(ls[np.arange(n), t]))
    g = p.copy()
    g[np.arange(n), t] -= 1.0
    g /= n
    dl = 0.0
    for P, w in zip(peers, peer_weights):
        if P.shape != out.shape:
            raise ShapeMismatch("peer outputs must match the student's output shape")
        lp = log_softmax(P)
        q = np.exp(lp)
        if task.kl_direction == "peer||self":
            dl += w * float(np.mean(np.sum(q * (lp - ls), axis=1)))
            g = g + (rho * w / n) * (p - q)
        else:
            r = ls - lp
            kl = np.sum(p * r, axis=1, keepdims=True)
            dl += w * float(np.mean(kl))
            g = g + (rho * w / n) * p * (r - kl)
    return tl, dl, g


def _param_grads(student: Student, acts, g_out):
    gW, gb = [None] * len(student.weights), [None] * len(student.biases)
    g = g_out
    for l in range(len(student.weights) - 1, -1, -1):
        a_in = acts[l]
        gW[l] = a_in.T @ g
        if student.ridge and l == len(student.weights) - 1:
            gW[l] = gW[l] + 2.0 * student.ridge * student.weights[l]
        gb[l] = g.sum(axis=0) if student.fit_intercept else np.zeros_like(student.biases[l])
        if l > 0:
            g = (g @ student.weights[l].T) * (1.0 - acts[l] ** 2)
    return gW, gb


def loss_and_grad(student: Student, H, targets, peer_outputs=(), peer_weights=(),
                  rho: float = 0.0, task: Task = REGRESSION):
    """Total loss ``task + rho * sum_J d_J Div`` and its gradient as a flat vector."""
    out, acts = _forward(student, np.asarray(H, dtype=float))
    tl, dl, g = _output_grad(out, targets, list(peer_outputs), list(peer_weights), rho, task)
    gW, gb = _param_grads(student, acts, g)
    total = tl + rho * dl + student.ridge * float(np.sum(student.weights[-1] ** 2))
    return total, np.concatenate([a.ravel() for a in gW + gb])


def step_from_forward(student: Student, acts, out, targets, peers, peer_weights, rho, lr, task):
    """Gradient step given a cached forward pass; returns (student, task loss, div loss)."""
    with np.errstate(over="ignore", invalid="ignore"):  # reported below instead
        tl, dl, g = _output_grad(out, targets, peers, peer_weights, rho, task)
    if not np.isfinite(tl + dl):
        raise NonFiniteLoss(f"loss became non-finite for pairing {student.pairing}")
    gW, gb = _param_grads(student, acts, g)
    Ws = tuple(W - lr * d for W, d in zip(student.weights, gW))
    bs = tuple(b - lr * d for b, d in zip(student.biases, gb))
    return replace(student, weights=Ws, biases=bs), tl, dl


def grad_step(student: Student, H, targets, peer_outputs=(), peer_weights=(),
              rho: float = 0.0, lr: float = 1e-2, task: Task = REGRESSION) -> Student:
    """One full-batch gradient step with peer outputs held fixed."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if any(w < 0 for w in peer_weights):
        raise ValueError("divergence weights must be nonnegative")
    if len(peer_outputs) != len(peer_weights):
        raise ShapeMismatch("one weight per peer output required")
    out, acts = _forward(student, np.asarray(H, dtype=float))
    new, _, _ = step_from_forward(student, acts, out, targets, list(peer_outputs),
                                  list(peer_weights), rho, lr, task)
    return new


def curvature(H: np.ndarray, task: Task, out_dim: int = 1) -> float:
    """Lipschitz bound of the task-loss gradient for a linear head with intercept.

    Equals ``c * lambda_max([H, 1]^T [H, 1] / n)`` with ``c = 2/d`` for mean
    squared error and ``c = 1/2`` for cross-entropy.
    """
    n = H.shape[0]
    Ht = np.hstack([H, np.ones((n, 1))])
    G = Ht.T @ Ht if Ht.shape[1] <= n else Ht @ Ht.T
    lam = float(np.linalg.eigvalsh(G)[-1]) / n
    c = 2.0 / out_dim if task.kind == "regression" else 0.5
    return c * max(lam, 1e-12)


# ---------------------------------------------------------------- cohort

@dataclass
class Cohort:
    banks: List[List[ext.Extractor]]
    pairings: List[Pairing]
    students: Dict[Pairing, Student]
    task: Task = REGRESSION

    def __post_init__(self):
        for I in self.pairings:
            if I not in self.students:
                raise ShapeMismatch(f"no student for pairing {I}")

    def __len__(self):
        return len(self.pairings)

    def index(self, pairing: Pairing) -> int:
        return self.pairings.index(tuple(pairing))

    def predict_all(self, modalities) -> Dict[Pairing, np.ndarray]:
        reps = representations(self.banks, modalities)
        return {I: predict(self.students[I], fuse_reps(I, reps)) for I in self.pairings}

    def label(self, pairing: Pairing) -> str:
        return "+".join(self.banks[m][i].label() for m, i in enumerate(pairing))


def pairing_key(pairing: Pairing) -> List[int]:
    return [int(i) for i in pairing]


def extractor_code(e: ext.Extractor) -> int:
    return {"null": 0, "identity": 1}.get(e.kind, 2 + e.k)


def student_seed_keys(banks, pairing: Pairing) -> List[int]:
    """Seed keys built from extractor identities rather than bank positions.

    The raw-feature student therefore gets the same initialization whether
    it sits in a full cohort or in a cohort of identity extractors only.
    """
    return [len(pairing)] + [extractor_code(banks[m][i]) for m, i in enumerate(pairing)]
