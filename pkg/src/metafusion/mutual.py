"""Adaptive mutual learning: screening, loss clustering, divergence weights, joint training."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import cohort as co
from .cohort import Cohort, Pairing, Task
from .datagen import MultimodalDataset
from .ensemble import Committee, SelectionConfig, ensemble_select
from .errors import NonFiniteLoss
from .numerics import derive_rng, kmeans_1d, silhouette_mean

WEIGHT_MODES = ("learn-from-top", "learn-from-worst", "all-ones")
DEFAULT_RHO_GRID = (0.1, 0.5, 1.0, 2.0, 5.0)
_KMEANS_STREAM = 0x6B6D


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``lr`` is relative: each student steps by ``lr / L_I`` where ``L_I`` is
    the gradient Lipschitz bound of its loss (see :func:`cohort.curvature`)
    times ``1 + rho * sum_J d_IJ``.
    """
    rho: float = 1.0
    n_epochs: int = 500
    lr: float = 0.8
    k_top: int = 1
    k_cls_max: int = 5
    kind: str = "linear"
    hidden: Tuple[int, ...] = (16,)
    ridge: float = 0.0
    fit_intercept: bool = True
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.k_top < 1:
            raise ValueError("k_top must be at least 1")


@dataclass
class FusedData:
    """Fused train/val inputs for every pairing, computed once per cohort."""
    pairings: List[Pairing]
    train: Dict[Pairing, np.ndarray]
    y_train: np.ndarray
    val: Dict[Pairing, np.ndarray]
    y_val: np.ndarray
    curv: Dict[Pairing, float]


def prepare(cohort: Cohort, dataset: MultimodalDataset) -> FusedData:
    mods_tr, y_tr = dataset.part("train")
    mods_va, y_va = dataset.part("val")
    reps_tr = co.representations(cohort.banks, mods_tr)
    reps_va = co.representations(cohort.banks, mods_va)
    train = {I: co.fuse_reps(I, reps_tr) for I in cohort.pairings}
    val = {I: co.fuse_reps(I, reps_va) for I in cohort.pairings}
    d = cohort.task.out_dim
    curv = {I: co.curvature(train[I], cohort.task, d) for I in cohort.pairings}
    return FusedData(list(cohort.pairings), train, y_tr, val, y_va, curv)


def _as_fused(cohort, data) -> FusedData:
    return data if isinstance(data, FusedData) else prepare(cohort, data)


def initialize(cohort: Cohort, data: FusedData, config: TrainConfig) -> Cohort:
    """Fresh parameters for every student from the per-pairing seed stream."""
    students = {}
    for I in cohort.pairings:
        rng = derive_rng(config.seed, *co.student_seed_keys(cohort.banks, I))
        students[I] = co.init_student(I, data.train[I].shape[1], cohort.task.out_dim, rng,
                                      config.kind, config.hidden, config.ridge,
                                      config.fit_intercept, config.init_scale)
    return replace(cohort, students=students)


@dataclass
class DivergenceWeights:
    pairings: List[Pairing]
    matrix: np.ndarray  # matrix[i, j] = d_{I_i, I_j}, zero diagonal
    mode: str = "learn-from-top"

    def row(self, I: Pairing) -> Dict[Pairing, float]:
        i = self.pairings.index(I)
        return {J: float(w) for J, w in zip(self.pairings, self.matrix[i]) if w != 0}

    @classmethod
    def zeros(cls, pairings):
        P = len(pairings)
        return cls(list(pairings), np.zeros((P, P)), "none")


@dataclass
class Traces:
    rows: List[Tuple[int, Pairing, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "pairing", "task_loss", "divergence_loss"])
        for epoch, I, tl, dl in self.rows:
            w.writerow([epoch, "-".join(map(str, I)), format(tl, ".12g"), format(dl, ".12g")])
        return buf.getvalue()


def train(cohort: Cohort, data, weights: Optional[DivergenceWeights], config: TrainConfig,
          rho: Optional[float] = None, record: bool = False):
    """Re-initialize and run synchronous full-batch epochs.

    Every student steps against the previous epoch's snapshot of peer
    outputs, which are treated as constants.  Returns ``(cohort, traces)``.
    """
    data = _as_fused(cohort, data)
    rho = config.rho if rho is None else rho
    cohort = initialize(cohort, data, config)
    task = cohort.task
    P = cohort.pairings
    if weights is None:
        weights = DivergenceWeights.zeros(P)
    peers = {}
    for i, I in enumerate(P):
        row = weights.matrix[i]
        peers[I] = [(P[j], float(row[j])) for j in np.flatnonzero(row) if j != i]
    steps = {}
    for I in P:
        load = sum(w for _, w in peers[I]) if rho > 0 else 0.0
        steps[I] = config.lr / ((1.0 + rho * load) * data.curv[I])
    targets = co.as_target_matrix(data.y_train, task)
    students = dict(cohort.students)
    traces = Traces()
    for epoch in range(config.n_epochs):
        fwd = {I: co._forward(students[I], data.train[I]) for I in P}
        new = {}
        for I in P:
            out, acts = fwd[I]
            pe = [fwd[J][0] for J, _ in peers[I]] if rho > 0 else []
            pw = [w for _, w in peers[I]] if rho > 0 else []
            try:
                new[I], tl, dl = co.step_from_forward(students[I], acts, out, targets, pe, pw,
                                                      rho, steps[I], task)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"pairing {I} diverged at epoch {epoch}") from exc
            if record:
                traces.rows.append((epoch, I, tl, dl))
        students = new
    return replace(cohort, students=students), traces


def validation_outputs(cohort: Cohort, data: FusedData) -> Dict[Pairing, np.ndarray]:
    return {I: co.predict(cohort.students[I], data.val[I]) for I in cohort.pairings}


def validation_losses(cohort: Cohort, data: FusedData) -> Dict[Pairing, float]:
    outs = validation_outputs(cohort, data)
    return {I: co.task_loss(outs[I], data.y_val, cohort.task) for I in cohort.pairings}


# ---------------------------------------------------------------- screening

@dataclass
class ScreeningReport:
    pairings: List[Pairing]
    losses: np.ndarray  # validation task loss per pairing
    assignments: np.ndarray  # cluster index per pairing, clusters ordered by mean loss
    k_cls: int
    top: np.ndarray  # bool per pairing
    cohort: Optional[Cohort] = None  # independently trained cohort
    silhouettes: Dict[int, float] = field(default_factory=dict)

    def top_set(self, k_top: int) -> np.ndarray:
        if np.ptp(self.losses) == 0:
            return np.ones(len(self.pairings), dtype=bool)
        return self.assignments < k_top

    def worst_set(self) -> np.ndarray:
        if np.ptp(self.losses) == 0:
            return np.ones(len(self.pairings), dtype=bool)
        return self.assignments == self.assignments.max()


def cluster_losses(losses: Sequence[float], k_top: int = 1, k_cls_max: int = 5, seed: int = 0,
                   k_cls: Optional[int] = None):
    """Pick ``k_cls`` by maximal silhouette and cluster the 1-D losses.

    Returns ``(assignments, k_cls, top flags, silhouettes)``.  Cluster labels
    are ordered by centroid, so label 0 holds the lowest losses.
    """
    x = np.asarray(losses, dtype=float)
    m = x.shape[0]
    if m == 1:
        return np.zeros(1, dtype=int), 1, np.ones(1, dtype=bool), {}
    rng = derive_rng(seed, _KMEANS_STREAM)
    if k_cls is not None:
        candidates = [k_cls]
    else:
        candidates = list(range(2, min(k_cls_max, m - 1) + 1)) or [2]
    best = None
    sil = {}
    for k in candidates:
        res = kmeans_1d(x, k, rng)
        score = silhouette_mean(x, res.assignments)
        sil[k] = score
        if best is None or score > best[0]:
            best = (score, k, res)
    _, k, res = best
    if np.ptp(x) == 0:
        top = np.ones(m, dtype=bool)
    else:
        top = res.assignments < k_top
    return res.assignments, k, top, sil


def initial_screening(cohort: Cohort, dataset, config: TrainConfig,
                      k_cls: Optional[int] = None) -> ScreeningReport:
    """Independent training (rho = 0), then clustering of validation losses."""
    data = _as_fused(cohort, dataset)
    trained, _ = train(cohort, data, None, config, rho=0.0)
    losses = validation_losses(trained, data)
    vec = np.array([losses[I] for I in cohort.pairings])
    assign, k, top, sil = cluster_losses(vec, config.k_top, config.k_cls_max, config.seed, k_cls)
    return ScreeningReport(list(cohort.pairings), vec, assign, k, top, trained, sil)


def divergence_weights(report: ScreeningReport, mode: str = "learn-from-top",
                       k_top: Optional[int] = None) -> DivergenceWeights:
    """Binary peer weights; column J is switched on for every I != J when J qualifies."""
    if mode not in WEIGHT_MODES:
        raise ValueError(f"unknown weight mode {mode!r}")
    P = len(report.pairings)
    if mode == "all-ones":
        cols = np.ones(P, dtype=bool)
    elif mode == "learn-from-top":
        cols = report.top if k_top is None else report.top_set(k_top)
    else:
        cols = report.worst_set()
    M = np.tile(cols.astype(float), (P, 1))
    np.fill_diagonal(M, 0.0)
    return DivergenceWeights(list(report.pairings), M, mode)


def mutual_train(cohort: Cohort, dataset, weights: DivergenceWeights, config: TrainConfig,
                 record: bool = True):
    """Step 2: re-initialize and train all students jointly at ``config.rho``."""
    return train(cohort, dataset, weights, config, record=record)


# ---------------------------------------------------------------- rho search

@dataclass
class RhoSearch:
    rho: float
    table: List[Tuple[float, float]]  # (rho, validation ensemble loss)
    cohort: Cohort
    committee: Committee
    report: ScreeningReport
    weights: DivergenceWeights


def select_rho(cohort: Cohort, dataset, grid: Sequence[float] = DEFAULT_RHO_GRID,
               config: TrainConfig = TrainConfig(), selection: SelectionConfig = SelectionConfig(),
               mode: str = "learn-from-top", report: Optional[ScreeningReport] = None) -> RhoSearch:
    """Run screening once, then joint training plus committee selection per rho.

    The returned rho minimizes the validation loss of the selected committee;
    ties go to the smallest rho.
    """
    grid = sorted(float(r) for r in grid)
    if not grid or grid[0] < 0:
        raise ValueError("rho grid must be nonempty and nonnegative")
    data = _as_fused(cohort, dataset)
    if report is None:
        report = initial_screening(cohort, data, config)
    weights = divergence_weights(report, mode)
    best = None
    table = []
    for rho in grid:
        trained, _ = train(cohort, data, weights, config, rho=rho)
        committee = ensemble_select(validation_outputs(trained, data), data.y_val,
                                    selection, cohort.task)
        table.append((rho, committee.val_loss))
        if best is None or committee.val_loss < best[1]:
            best = (rho, committee.val_loss, trained, committee)
    return RhoSearch(best[0], table, best[2], best[3], report, weights)
