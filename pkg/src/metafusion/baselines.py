"""Benchmark fusion strategies: unimodal, early, late and cooperative learning."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import cohort as co
from . import extractors as ex
from . import mutual as mu
from .cohort import Cohort, Pairing, Student, Task
from .datagen import MultimodalDataset
from .errors import ShapeMismatch, SingularSystem
from .numerics import RANK_TOL, solve_least_squares

COOP_RHO_GRID = tuple(round(0.1 * i, 1) for i in range(10))


# ---------------------------------------------------------------- pairing shortcuts

def identity_banks(dataset: MultimodalDataset) -> List[List[ex.Extractor]]:
    """Banks with no learned extractors: ``[null, identity]`` for every modality."""
    mods, _ = dataset.part("train")
    return [ex.fit_bank(ex.make_bank([], m), X) for m, X in enumerate(mods)]


def early_pairing(banks) -> Pairing:
    return tuple(len(b) - 1 for b in banks)


def unimodal_pairing(banks, m: int) -> Pairing:
    return tuple(len(b) - 1 if j == m else 0 for j, b in enumerate(banks))


def _fit_pairings(dataset, pairings, config, banks, task):
    if banks is None:
        banks = identity_banks(dataset)
    c = Cohort(banks, list(pairings), {I: None for I in pairings}, task)
    trained, _ = mu.train(c, dataset, None, config, rho=0.0)
    return trained


@dataclass
class FittedPredictor:
    """Average of one or more students, each reading its own pairing."""
    cohort: Cohort

    def predict(self, modalities) -> np.ndarray:
        outs = self.cohort.predict_all(modalities)
        return np.mean([outs[I] for I in self.cohort.pairings], axis=0)


def early_fusion_fit(dataset: MultimodalDataset, config: mu.TrainConfig = mu.TrainConfig(),
                     banks=None, task: Task = co.REGRESSION) -> FittedPredictor:
    """One student on the concatenation of all raw modalities."""
    if len(dataset.modalities) < 2:
        raise ShapeMismatch("early fusion needs at least two modalities")
    banks = identity_banks(dataset) if banks is None else banks
    return FittedPredictor(_fit_pairings(dataset, [early_pairing(banks)], config, banks, task))


def late_fusion_fit(dataset: MultimodalDataset, config: mu.TrainConfig = mu.TrainConfig(),
                    banks=None, task: Task = co.REGRESSION) -> FittedPredictor:
    """Independently trained unimodal students, predictions averaged."""
    if len(dataset.modalities) < 2:
        raise ShapeMismatch("late fusion needs at least two modalities")
    banks = identity_banks(dataset) if banks is None else banks
    pairs = [unimodal_pairing(banks, m) for m in range(len(banks))]
    return FittedPredictor(_fit_pairings(dataset, pairs, config, banks, task))


def unimodal_fit(dataset: MultimodalDataset, m: int, config: mu.TrainConfig = mu.TrainConfig(),
                 banks=None, task: Task = co.REGRESSION) -> FittedPredictor:
    banks = identity_banks(dataset) if banks is None else banks
    return FittedPredictor(_fit_pairings(dataset, [unimodal_pairing(banks, m)], config, banks, task))


# ---------------------------------------------------------------- cooperative learning

class _Projector:
    """Cached SVD of a centred design; solves penalised least squares quickly."""

    def __init__(self, A: np.ndarray, ridge: float):
        self.U, self.s, self.Vt = np.linalg.svd(A, full_matrices=False)
        self.ridge = ridge
        if ridge == 0 and (A.shape[1] > A.shape[0] or self.s[-1] ** 2 <= RANK_TOL * self.s[0] ** 2):
            raise SingularSystem("design is rank deficient; pass a positive ridge")

    def solve(self, t: np.ndarray, curv: float) -> np.ndarray:
        """argmin ``curv/2 ||A w||^2 - w.A^T t + ridge/2 ||w||^2``."""
        filt = self.s / (curv * self.s**2 + self.ridge)
        return self.Vt.T @ (filt * (self.U.T @ t))


@dataclass
class CoopState:
    rho: float
    w_x: np.ndarray
    w_z: np.ndarray
    w_xz: Optional[np.ndarray]
    intercept: float
    mean_x: np.ndarray
    mean_z: np.ndarray
    ridge: float = 0.0
    iterations: int = 0
    residual: float = np.inf
    converged: bool = False
    objective: List[float] = field(default_factory=list)

    def components(self, X, Z):
        Xc, Zc = np.asarray(X) - self.mean_x, np.asarray(Z) - self.mean_z
        fx, fz = Xc @ self.w_x, Zc @ self.w_z
        fxz = np.hstack([Xc, Zc]) @ self.w_xz if self.w_xz is not None else np.zeros_like(fx)
        return fx, fz, fxz

    def predict(self, X, Z) -> np.ndarray:
        fx, fz, fxz = self.components(X, Z)
        return self.intercept + fx + fz + fxz


def coop_objective(y, fx, fz, fxz, rho, ridge=0.0, weights=()) -> float:
    """Empirical cooperative-learning objective (sum form) plus the ridge term."""
    val = 0.5 * np.sum((y - fx - fz - fxz) ** 2) + 0.5 * rho * np.sum((fx - fz) ** 2)
    if fxz is not None and rho < 1:
        val += 0.5 * rho / (1.0 - rho) * np.sum(fxz**2)
    val += 0.5 * ridge * sum(float(np.sum(w**2)) for w in weights if w is not None)
    return float(val)


def coop_fit(X, Z, y, rho: float, ridge: float = 0.0, max_iter: int = 500, tol: float = 1e-8,
             simplified: bool = False, fit_intercept: bool = True) -> CoopState:
    """Cyclic block minimization of the cooperative-learning objective.

    Each block update is the exact minimizer over that block:
    ``f_X = P_X[(Y - (1-rho) f_Z - f_XZ) / (1+rho)]``, the mirror image for
    ``f_Z``, and ``f_XZ = (1-rho) P_XZ (Y - f_X - f_Z)``, where ``P`` is a
    least-squares fit (ridge regularised when ``ridge > 0``).  With
    ``simplified=True`` the interaction block is dropped and any
    ``rho >= 0`` is allowed.
    """
    if simplified:
        if rho < 0:
            raise ValueError("rho must be nonnegative")
    elif not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")
    X, Z, y = np.asarray(X, float), np.asarray(Z, float), np.asarray(y, float).ravel()
    mx = X.mean(0) if fit_intercept else np.zeros(X.shape[1])
    mz = Z.mean(0) if fit_intercept else np.zeros(Z.shape[1])
    b0 = float(y.mean()) if fit_intercept else 0.0
    Xc, Zc, yc = X - mx, Z - mz, y - b0
    px, pz = _Projector(Xc, ridge), _Projector(Zc, ridge)
    XZ = np.hstack([Xc, Zc])
    pxz = None if simplified else _Projector(XZ, ridge)
    wx, wz = np.zeros(X.shape[1]), np.zeros(Z.shape[1])
    wxz = None if simplified else np.zeros(XZ.shape[1])
    fx, fz = np.zeros_like(yc), np.zeros_like(yc)
    fxz = np.zeros_like(yc)
    state = CoopState(rho, wx, wz, wxz, b0, mx, mz, ridge)
    obj = [coop_objective(yc, fx, fz, fxz, rho, ridge, (wx, wz, wxz))]
    for it in range(1, max_iter + 1):
        new_wx = px.solve(yc - (1 - rho) * fz - fxz, 1 + rho)
        dx = np.max(np.abs(new_wx - wx), initial=0.0)
        wx, fx = new_wx, Xc @ new_wx
        obj.append(coop_objective(yc, fx, fz, fxz, rho, ridge, (wx, wz, wxz)))
        new_wz = pz.solve(yc - (1 - rho) * fx - fxz, 1 + rho)
        dz = np.max(np.abs(new_wz - wz), initial=0.0)
        wz, fz = new_wz, Zc @ new_wz
        obj.append(coop_objective(yc, fx, fz, fxz, rho, ridge, (wx, wz, wxz)))
        dxz = 0.0
        if pxz is not None:
            new_wxz = pxz.solve(yc - fx - fz, 1.0 / (1 - rho))
            dxz = np.max(np.abs(new_wxz - wxz), initial=0.0)
            wxz, fxz = new_wxz, XZ @ new_wxz
            obj.append(coop_objective(yc, fx, fz, fxz, rho, ridge, (wx, wz, wxz)))
        change = max(dx, dz, dxz)
        state.iterations, state.residual = it, float(change)
        if change < tol:
            state.converged = True
            break
    state.w_x, state.w_z, state.w_xz, state.objective = wx, wz, wxz, obj
    return state


def averaged_pair_fit(X, Z, y, rho: float, fit_intercept: bool = True):
    """Two unimodal linear students minimizing the averaged-ensemble objective.

    Solves ``min ||Y - (Xa + Zb)/2||^2 + rho ||Xa - Zb||^2`` as one stacked
    least-squares problem and returns ``(a, b, predict)`` where ``predict``
    maps new ``(X, Z)`` to the averaged prediction.
    """
    X, Z, y = np.asarray(X, float), np.asarray(Z, float), np.asarray(y, float).ravel()
    mx = X.mean(0) if fit_intercept else np.zeros(X.shape[1])
    mz = Z.mean(0) if fit_intercept else np.zeros(Z.shape[1])
    b0 = float(y.mean()) if fit_intercept else 0.0
    Xc, Zc = X - mx, Z - mz
    r = np.sqrt(rho)
    A = np.vstack([np.hstack([Xc / 2, Zc / 2]), np.hstack([r * Xc, -r * Zc])])
    t = np.concatenate([y - b0, np.zeros_like(y)])
    w = solve_least_squares(A, t)
    a, b = w[: X.shape[1]], w[X.shape[1]:]

    def predict(Xn, Zn):
        return b0 + 0.5 * ((np.asarray(Xn) - mx) @ a + (np.asarray(Zn) - mz) @ b)

    return a, b, predict


@dataclass
class CoopSelection:
    rho: float
    ridge: float
    table: List[Tuple[float, float, float]]  # (rho, ridge, validation mse)
    state: CoopState


def coop_select_rho(dataset: MultimodalDataset, grid: Sequence[float] = COOP_RHO_GRID,
                    ridges: Sequence[float] = (0.0,), max_iter: int = 500,
                    tol: float = 1e-8) -> CoopSelection:
    """Validation-MSE minimizer over ``grid`` (and optionally a ridge grid).

    Ties go to the smallest rho, then the smallest ridge.  Ridge values whose
    design is singular (``ridge = 0`` with more columns than rows) are skipped.
    """
    (Xt, Zt), yt = dataset.part("train")[0][:2], dataset.part("train")[1]
    (Xv, Zv), yv = dataset.part("val")[0][:2], dataset.part("val")[1]
    best, table = None, []
    for rho in sorted(grid):
        for ridge in sorted(ridges):
            try:
                st = coop_fit(Xt, Zt, yt, rho, ridge, max_iter, tol)
            except SingularSystem:
                continue
            mse = float(np.mean((st.predict(Xv, Zv) - yv) ** 2))
            table.append((float(rho), float(ridge), mse))
            if best is None or mse < best[2]:
                best = (float(rho), float(ridge), mse, st)
    if best is None:
        raise SingularSystem("every ridge value gave a singular design")
    return CoopSelection(best[0], best[1], table, best[3])
