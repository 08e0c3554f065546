"""Numerical checks of the two-student latent factor theory.

The instance is ``Y = V theta`` with ``V_m = V T_m + eps_m`` for two
students ``I`` and ``J``.  Students minimize the combined objective
``||Y - V_I a||^2 + ||Y - V_J b||^2 + rho ||V_I a - V_J b||^2``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .datagen import TheoryInstance
from .errors import SingularSystem
from .numerics import make_rng

JITTER = 1e-8


# ---------------------------------------------------------------- fitting

@dataclass(frozen=True)
class FittedPair:
    theta_I: np.ndarray
    theta_J: np.ndarray
    rho: float
    route: str  # "block-closed-form" or "gradient-descent"
    iterations: int = 0


def _block_system(VI, VJ, Y, rho):
    GII, GIJ, GJJ = VI.T @ VI, VI.T @ VJ, VJ.T @ VJ
    S = np.block([[(1 + rho) * GII, -rho * GIJ], [-rho * GIJ.T, (1 + rho) * GJJ]])
    rhs = np.concatenate([VI.T @ Y, VJ.T @ Y])
    return S, rhs


def _solve_spd(S, rhs):
    scale = np.trace(S) / S.shape[0]
    try:
        return sla.solve(S, rhs, assume_a="pos")
    except (sla.LinAlgError, np.linalg.LinAlgError):
        pass
    try:
        return sla.solve(S + JITTER * scale * np.eye(S.shape[0]), rhs, assume_a="pos")
    except (sla.LinAlgError, np.linalg.LinAlgError) as exc:
        raise SingularSystem("block system is singular") from exc


def closed_form_fit(inst: TheoryInstance, rho: float) -> FittedPair:
    """Exact minimizer of the combined objective via the stacked normal equations."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    S, rhs = _block_system(inst.V_I, inst.V_J, inst.Y, rho)
    w = _solve_spd(S, rhs)
    return FittedPair(w[: inst.p_I], w[inst.p_I:], float(rho), "block-closed-form")


def gradient_descent_fit(inst: TheoryInstance, rho: float, tol: float = 1e-10,
                         max_iter: int = 1_000_000) -> FittedPair:
    """Plain gradient descent on the combined objective (scaled by 1/n).

    The step is ``2 / (mu + L)`` from the extreme Hessian eigenvalues, and the
    loop stops once ``||grad|| / mu`` (a bound on the distance to the
    minimizer) drops below ``tol``.
    """
    VI, VJ, Y, n = inst.V_I, inst.V_J, inst.Y, inst.n
    W = np.hstack([VI, -VJ])
    pI = inst.p_I
    w = np.zeros(pI + inst.p_J)

    def grad(w):
        a, b = w[:pI], w[pI:]
        ra, rb = VI @ a - Y, VJ @ b - Y
        d = VI @ a - VJ @ b
        return 2.0 / n * np.concatenate([VI.T @ ra, VJ.T @ rb]) + 2.0 * rho / n * (W.T @ d)

    S, _ = _block_system(VI, VJ, Y, rho)
    ev = np.linalg.eigvalsh(2.0 * S / n)
    mu, L = ev[0], ev[-1]
    if mu <= 0:
        raise SingularSystem("objective is not strongly convex")
    step = 2.0 / (mu + L)
    it = 0
    for it in range(1, max_iter + 1):
        g = grad(w)
        if np.linalg.norm(g) / mu < tol:
            break
        w = w - step * g
    return FittedPair(w[:pI], w[pI:], float(rho), "gradient-descent", it)


def first_order_coefficient(inst: TheoryInstance) -> np.ndarray:
    """d theta_I / d rho at 0: ``V_II^-1 V_IJ V_JJ^-1 V_J'Y - V_II^-1 V_I'Y``."""
    VI, VJ, Y = inst.V_I, inst.V_J, inst.Y
    GII, GIJ, GJJ = VI.T @ VI, VI.T @ VJ, VJ.T @ VJ
    return np.linalg.solve(GII, GIJ @ np.linalg.solve(GJJ, VJ.T @ Y)) - np.linalg.solve(GII, VI.T @ Y)


# ---------------------------------------------------------------- population quantities

@dataclass(frozen=True)
class OracleQuantities:
    Sigma_I: np.ndarray  # T_I'T_I + sigma_I^2 I
    Sigma_J: np.ndarray
    theta_star_I: np.ndarray
    sigma2_star_I: float
    theta_star_J: np.ndarray
    sigma2_star_J: float
    theta_bar_I: np.ndarray
    theta_bar_J: np.ndarray
    sigma2_bar: float
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    T_IJ: np.ndarray  # T_I' T_J


def oracle_quantities(inst: TheoryInstance) -> OracleQuantities:
    TI, TJ, th = inst.T_I, inst.T_J, inst.theta
    SI = TI.T @ TI + inst.sigma_I**2 * np.eye(inst.p_I)
    SJ = TJ.T @ TJ + inst.sigma_J**2 * np.eye(inst.p_J)
    tsI = np.linalg.solve(SI, TI.T @ th)
    tsJ = np.linalg.solve(SJ, TJ.T @ th)
    s2I = float(th @ th - th @ TI @ tsI)
    s2J = float(th @ th - th @ TJ @ tsJ)
    TIJ = TI.T @ TJ
    big = np.block([[SI, TIJ], [TIJ.T, SJ]])
    inv = np.linalg.inv(big)
    pI = inst.p_I
    A, B, C, D = inv[:pI, :pI], inv[:pI, pI:], inv[pI:, :pI], inv[pI:, pI:]
    tbI = (A.T @ TI.T + C.T @ TJ.T) @ th
    tbJ = (B.T @ TI.T + D.T @ TJ.T) @ th
    P = (TI @ A + TJ @ C) @ TI.T + (TI @ B + TJ @ D) @ TJ.T
    s2bar = float(th @ th - th @ P @ th)
    return OracleQuantities(SI, SJ, tsI, s2I, tsJ, s2J, tbI, tbJ, s2bar, A, B, C, D, TIJ)


def block_inverse_residual(oq: OracleQuantities) -> float:
    big = np.block([[oq.Sigma_I, oq.T_IJ], [oq.T_IJ.T, oq.Sigma_J]])
    inv = np.block([[oq.A, oq.B], [oq.C, oq.D]])
    return float(np.max(np.abs(inv @ big - np.eye(big.shape[0]))))


def oracle_identity_residual(oq: OracleQuantities) -> float:
    """``||Sigma_I^-1 T_I'T_J theta_bar_J - (theta*_I - theta_bar_I)||_inf``."""
    lhs = np.linalg.solve(oq.Sigma_I, oq.T_IJ @ oq.theta_bar_J)
    return float(np.max(np.abs(lhs - (oq.theta_star_I - oq.theta_bar_I))))


def xi(inst: TheoryInstance, oq: Optional[OracleQuantities] = None) -> float:
    """Leading term of the aleatoric-variance slope at rho = 0."""
    oq = oracle_quantities(inst) if oq is None else oq
    nI = np.sum(inst.T_I**2, axis=0) + inst.sigma_I**2  # per column m
    nJ = np.sum(inst.T_J**2, axis=0) + inst.sigma_J**2  # per column k
    cross = (inst.T_I.T @ inst.T_J) ** 2  # [m, k]
    inner = (cross / nJ[None, :]).sum(axis=1) / nI
    return float(2.0 * oq.sigma2_bar / inst.n * np.sum(inner - 1.0))


# ---------------------------------------------------------------- samplers

def _posterior(inst, parts):
    """Posterior of a latent row given observed blocks, in information form.

    ``parts`` is a list of ``(T, sigma)``.  Returns ``(gains, L)`` such that
    the conditional mean of a row is ``sum_m obs_m @ gains[m]`` and a draw adds
    ``z @ L.T`` where ``L`` is the Cholesky factor of the posterior covariance.
    """
    prec = np.eye(inst.p)
    for T, s in parts:
        prec = prec + T @ T.T / s**2
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    gains = [(T / s**2).T @ cov for T, s in parts]  # p_m x p
    return gains, np.linalg.cholesky(cov)


def sample_latent_given(inst, observed, n_draws, rng, which=("I",)):
    """Draws of V (shape draws x n x p) given the observed blocks ``which``."""
    parts = [(inst.T_I, inst.sigma_I) if w == "I" else (inst.T_J, inst.sigma_J) for w in which]
    gains, L = _posterior(inst, parts)
    mean = sum(obs @ g for obs, g in zip(observed, gains))
    z = rng.standard_normal((n_draws, mean.shape[0], inst.p))
    return mean[None] + z @ L.T


# ---------------------------------------------------------------- decomposition

@dataclass
class Decomposition:
    rho: float
    B2: float
    V_a: float
    V_e: float
    sigma2_star: float
    mse: float
    mse_se: float
    n_mc: int
    B2_floor: float = 0.0  # expected B2 estimate under zero bias
    B2_floor_sd: float = 0.0

    @property
    def total(self) -> float:
        return self.B2 + self.V_a + self.V_e + self.sigma2_star

    @property
    def relative_gap(self) -> float:
        return abs(self.total - self.mse) / self.mse


def _batched_moments(inst, oq, VJ, Y, rho):
    """theta_hat, conditional mean and conditional variance diag per draw."""
    VI = inst.V_I
    pI = inst.p_I
    GII = VI.T @ VI
    GIJ = np.einsum("ni,bnj->bij", VI, VJ)
    GJJ = np.einsum("bni,bnj->bij", VJ, VJ)
    nb = VJ.shape[0]
    top = np.concatenate([np.broadcast_to((1 + rho) * GII, (nb, pI, pI)), -rho * GIJ], axis=2)
    bot = np.concatenate([-rho * np.transpose(GIJ, (0, 2, 1)), (1 + rho) * GJJ], axis=2)
    S = np.concatenate([top, bot], axis=1)
    Sinv = np.linalg.inv(S)[:, :pI, :]  # first block row
    rhs = np.concatenate([Y @ VI, np.einsum("bnj,bn->bj", VJ, Y)], axis=1)
    th = np.einsum("bij,bj->bi", Sinv, rhs)
    m_I = GII @ oq.theta_bar_I + np.einsum("bij,j->bi", GIJ, oq.theta_bar_J)
    m_J = (np.einsum("bji,j->bi", GIJ, oq.theta_bar_I)
           + np.einsum("bij,j->bi", GJJ, oq.theta_bar_J))
    mu = np.einsum("bij,bj->bi", Sinv, np.concatenate([m_I, m_J], axis=1))
    G = np.concatenate([np.concatenate([np.broadcast_to(GII, (nb, pI, pI)), GIJ], axis=2),
                        np.concatenate([np.transpose(GIJ, (0, 2, 1)), GJJ], axis=2)], axis=1)
    var = oq.sigma2_bar * np.einsum("bij,bjk,bik->bi", Sinv, G, Sinv)
    return th, mu, var


def mse_decomposition(inst: TheoryInstance, rhos: Sequence[float], n_mc: int = 100_000,
                      seed: int = 0, n_test: int = 4, batch: int = 1000,
                      fd_step: Optional[float] = None) -> Dict[float, Decomposition]:
    """Monte Carlo estimate of the bias / aleatoric / epistemic split given V_I.

    ``V_I`` stays fixed.  Each draw samples ``V | V_I`` (rows independent
    Gaussian), then ``V_J = V T_J + eps_J`` and ``Y = V theta``.  The same
    draws serve every rho (common random numbers).  The direct MSE uses
    ``n_test`` fresh test points per draw and the actual ``theta_hat``.
    """
    oq = oracle_quantities(inst)
    rng = make_rng(seed)
    rhos = [float(r) for r in rhos]
    d = np.diag(oq.Sigma_I)
    acc = {r: {"mu": [], "var": [], "err": []} for r in rhos}
    done = 0
    while done < n_mc:
        nb = min(batch, n_mc - done)
        V = sample_latent_given(inst, [inst.V_I], nb, rng, ("I",))
        VJ = V @ inst.T_J + inst.sigma_J * rng.standard_normal((nb, inst.n, inst.p_J))
        Y = V @ inst.theta
        Vs = rng.standard_normal((nb, n_test, inst.p))
        VIs = Vs @ inst.T_I + inst.sigma_I * rng.standard_normal((nb, n_test, inst.p_I))
        Ys = Vs @ inst.theta
        for r in rhos:
            th, mu, var = _batched_moments(inst, oq, VJ, Y, r)
            pred = np.einsum("bti,bi->bt", VIs, th)
            acc[r]["mu"].append(mu)
            acc[r]["var"].append(var)
            acc[r]["err"].append(np.mean((Ys - pred) ** 2, axis=1))
        done += nb
    out = {}
    for r in rhos:
        mu = np.concatenate(acc[r]["mu"])
        var = np.concatenate(acc[r]["var"])
        err = np.concatenate(acc[r]["err"])
        mbar = mu.mean(axis=0)
        vmu = mu.var(axis=0, ddof=1)
        floor_terms = d * vmu / n_mc
        out[r] = Decomposition(
            rho=r,
            B2=float(d @ (oq.theta_star_I - mbar) ** 2),
            V_a=float(d @ var.mean(axis=0)),
            V_e=float(d @ vmu),
            sigma2_star=oq.sigma2_star_I,
            mse=float(err.mean()),
            mse_se=float(err.std(ddof=1) / np.sqrt(n_mc)),
            n_mc=n_mc,
            B2_floor=float(floor_terms.sum()),
            B2_floor_sd=float(np.sqrt(2.0 * np.sum(floor_terms**2))),
        )
    return out


@dataclass
class SlopeEstimate:
    value: float  # mean finite-difference slope
    se: float


def aleatoric_slope(inst: TheoryInstance, n_mc: int = 2000, seed: int = 0, step: float = 1e-4,
                    batch: int = 250) -> SlopeEstimate:
    """Forward difference of V_a at rho = 0 with shared draws of V_J given V_I."""
    oq = oracle_quantities(inst)
    rng = make_rng(seed)
    d = np.diag(oq.Sigma_I)
    vals, done = [], 0
    while done < n_mc:
        nb = min(batch, n_mc - done)
        V = sample_latent_given(inst, [inst.V_I], nb, rng, ("I",))
        VJ = V @ inst.T_J + inst.sigma_J * rng.standard_normal((nb, inst.n, inst.p_J))
        Y = V @ inst.theta
        _, _, v0 = _batched_moments(inst, oq, VJ, Y, 0.0)
        _, _, v1 = _batched_moments(inst, oq, VJ, Y, step)
        vals.append(((v1 - v0) @ d) / step)
        done += nb
    vals = np.concatenate(vals)
    return SlopeEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_mc)))


def epistemic_slope(inst: TheoryInstance, n_mc: int = 2000, seed: int = 0, step: float = 1e-4,
                    batch: int = 250) -> SlopeEstimate:
    """Forward difference of V_e at rho = 0 (shared draws); SE from 20 batch means."""
    oq = oracle_quantities(inst)
    rng = make_rng(seed)
    d = np.diag(oq.Sigma_I)
    mu0, mu1, done = [], [], 0
    while done < n_mc:
        nb = min(batch, n_mc - done)
        V = sample_latent_given(inst, [inst.V_I], nb, rng, ("I",))
        VJ = V @ inst.T_J + inst.sigma_J * rng.standard_normal((nb, inst.n, inst.p_J))
        Y = V @ inst.theta
        mu0.append(_batched_moments(inst, oq, VJ, Y, 0.0)[1])
        mu1.append(_batched_moments(inst, oq, VJ, Y, step)[1])
        done += nb
    mu0, mu1 = np.concatenate(mu0), np.concatenate(mu1)

    def slope(a, b):
        return float((d @ b.var(axis=0, ddof=1) - d @ a.var(axis=0, ddof=1)) / step)

    groups = np.array_split(np.arange(n_mc), 20)
    parts = [slope(mu0[g], mu1[g]) for g in groups]
    return SlopeEstimate(slope(mu0, mu1), float(np.std(parts, ddof=1) / np.sqrt(len(parts))))


# ---------------------------------------------------------------- event E

@dataclass
class EventCheck:
    holds: bool
    cond1: np.ndarray  # must be >= 0
    cond2: np.ndarray  # must be <= 0
    bias_slope: float = float("nan")  # Monte Carlo, Y redrawn given (v_I, v_J)
    bias_slope_se: float = float("nan")
    epistemic_slope: float = float("nan")  # realization-level integrand, exact
    conditional_mean: Optional[np.ndarray] = None
    conditional_mean_se: Optional[np.ndarray] = None


def event_conditions(inst: TheoryInstance, v_I, v_J, oq: Optional[OracleQuantities] = None):
    oq = oracle_quantities(inst) if oq is None else oq
    GII, GIJ, GJJ = v_I.T @ v_I, v_I.T @ v_J, v_J.T @ v_J
    c1 = np.linalg.solve(GII, GIJ @ oq.theta_bar_J) - (oq.theta_star_I - oq.theta_bar_I)
    c2 = np.linalg.solve(GII, GIJ @ np.linalg.solve(GJJ, GIJ.T @ oq.theta_bar_I)) - oq.theta_bar_I
    return c1, c2


def scalar_event(v_I, v_J, T_I: float, T_J: float, sigma_I: float) -> bool:
    v_I, v_J = np.ravel(v_I), np.ravel(v_J)
    return bool(v_I @ v_J / (v_I @ v_I) >= T_I * T_J / (T_I**2 + sigma_I**2))


def canonicalize_1d(inst: TheoryInstance) -> TheoryInstance:
    """Sign-flip a one-dimensional instance so that T_I, T_J, theta are positive.

    Flipping the sign of a block together with its noise, or of theta, maps
    the model onto itself, so the flips preserve the instance distribution.
    """
    sI = np.sign(inst.T_I[0, 0]) or 1.0
    sJ = np.sign(inst.T_J[0, 0]) or 1.0
    st = np.sign(inst.theta[0]) or 1.0
    return replace(inst, T_I=sI * inst.T_I, T_J=sJ * inst.T_J, V_I=sI * inst.V_I,
                   V_J=sJ * inst.V_J, theta=st * inst.theta, V=inst.V, Y=st * inst.Y)


def event_E_check(inst: TheoryInstance, v_I, v_J, n_mc: int = 0, seed: int = 0,
                  step: float = 1e-4) -> EventCheck:
    """Evaluate event E; with ``n_mc > 0`` also measure slopes by conditional Monte Carlo.

    The Monte Carlo redraws ``V | (v_I, v_J)`` from the information-form
    posterior and sets ``Y = V theta``, so it does not reuse the closed-form
    conditional-mean formulas it is checking.
    """
    oq = oracle_quantities(inst)
    c1, c2 = event_conditions(inst, v_I, v_J, oq)
    # c2 vanishes identically when v_J spans v_I; allow for rounding there
    tol = 1e-10 * max(1.0, float(np.max(np.abs(oq.theta_bar_I))))
    holds = bool(np.all(c1 >= -tol) and np.all(c2 <= tol))
    d = np.diag(oq.Sigma_I)
    out = EventCheck(holds, c1, c2, epistemic_slope=float(2 * d @ (c1 * c2)))
    if n_mc <= 0:
        return out
    rng = make_rng(seed)
    sub = replace(inst, V_I=v_I, V_J=v_J, n=v_I.shape[0])
    V = sample_latent_given(sub, [v_I, v_J], n_mc, rng, ("I", "J"))
    Y = V @ inst.theta  # n_mc x n
    th0 = _solve_many(v_I, v_J, Y, 0.0)
    th1 = _solve_many(v_I, v_J, Y, step)
    m0 = th0.mean(axis=0)
    delta = (th1 - th0) / step
    md = delta.mean(axis=0)
    slope = float(2 * d @ ((m0 - oq.theta_star_I) * md))
    # delta-method influence of each draw on the slope estimate
    psi = 2 * ((th0 - m0) * md + (m0 - oq.theta_star_I) * (delta - md)) @ d
    out.bias_slope = slope
    out.bias_slope_se = float(psi.std(ddof=1) / np.sqrt(n_mc))
    out.conditional_mean = m0
    out.conditional_mean_se = th0.std(axis=0, ddof=1) / np.sqrt(n_mc)
    return out


def _solve_many(v_I, v_J, Y, rho):
    """theta_hat_I for many label vectors sharing one design (rows of Y)."""
    S, _ = _block_system(v_I, v_J, np.zeros(v_I.shape[0]), rho)
    rhs = np.concatenate([Y @ v_I, Y @ v_J], axis=1).T
    W = _solve_spd(S, rhs)
    return W[: v_I.shape[1]].T


def conditional_mean_prediction(inst: TheoryInstance, v_I, v_J) -> np.ndarray:
    """Closed-form ``E[theta_hat_I | v_I, v_J]`` at rho = 0."""
    oq = oracle_quantities(inst)
    return oq.theta_bar_I + np.linalg.solve(v_I.T @ v_I, v_I.T @ v_J @ oq.theta_bar_J)


def regression_check(inst: TheoryInstance, n: int = 100_000, seed: int = 0):
    """Regress Y on [V_I, V_J] over fresh draws; return (coef, se, residual variance)."""
    rng = make_rng(seed)
    V = rng.standard_normal((n, inst.p))
    VI = V @ inst.T_I + inst.sigma_I * rng.standard_normal((n, inst.p_I))
    VJ = V @ inst.T_J + inst.sigma_J * rng.standard_normal((n, inst.p_J))
    Y = V @ inst.theta
    W = np.hstack([VI, VJ])
    coef, *_ = np.linalg.lstsq(W, Y, rcond=None)
    resid = Y - W @ coef
    s2 = float(resid @ resid / (n - W.shape[1]))
    se = np.sqrt(s2 * np.diag(np.linalg.inv(W.T @ W)))
    return coef, se, s2
