"""Numerical checks of the closed-form theory, emitted as a pass/fail table."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import baselines as bl
from . import theory as th
from .datagen import generate_theory_instance
from .numerics import derive_rng, make_rng, solve_least_squares


@dataclass(frozen=True)
class Check:
    name: str
    statistic: float
    threshold: float
    passed: bool
    relation: str = "<="

    def row(self):
        return [self.name, format(self.statistic, ".12g"), self.relation,
                format(self.threshold, ".12g"), "pass" if self.passed else "fail"]


def _le(name, stat, thr):
    return Check(name, float(stat), float(thr), bool(stat <= thr), "<=")


def check_gd_vs_closed_form(seed=0, n_inst=20, rhos=(0.0, 0.5, 1.0, 2.0)) -> Check:
    worst = 0.0
    for i in range(n_inst):
        inst = generate_theory_instance(200, 8, 5, 5, 1.0, 1.0, seed=seed * 1000 + i)
        for rho in rhos:
            a = th.closed_form_fit(inst, rho)
            b = th.gradient_descent_fit(inst, rho)
            worst = max(worst, np.max(np.abs(a.theta_I - b.theta_I)),
                        np.max(np.abs(a.theta_J - b.theta_J)))
    return _le("gd_vs_block_solve_max_abs", worst, 1e-5)


def check_oracle_identity(seed=0, n_inst=100) -> Check:
    rng = make_rng(seed)
    worst = 0.0
    for i in range(n_inst):
        p = int(rng.integers(2, 9))
        pI, pJ = int(rng.integers(1, p + 1)), int(rng.integers(1, p + 1))
        inst = generate_theory_instance(50, p, pI, pJ, float(rng.uniform(0.3, 2)),
                                        float(rng.uniform(0.3, 2)), seed=seed * 1000 + i)
        worst = max(worst, th.oracle_identity_residual(th.oracle_quantities(inst)))
    return _le("oracle_identity_residual_max", worst, 1e-8)


def check_xi_negative(seed=0, n_inst=100) -> Check:
    rng = make_rng(seed + 1)
    worst = -np.inf
    for i in range(n_inst):
        p = int(rng.integers(2, 9))
        pI, pJ = int(rng.integers(1, p + 1)), int(rng.integers(1, p + 1))
        inst = generate_theory_instance(100, p, pI, pJ, float(rng.uniform(0.3, 2)),
                                        float(rng.uniform(0.3, 2)), seed=seed * 1000 + 500 + i)
        worst = max(worst, th.xi(inst))
    return Check("xi_max_over_instances", float(worst), 0.0, bool(worst < 0), "<")


def check_decomposition(seed=0, n_inst=2, n_mc=20_000) -> Check:
    worst = 0.0
    for i in range(n_inst):
        inst = generate_theory_instance(40, 6, 3, 3, 1.0, 1.0, seed=seed * 1000 + 700 + i)
        for d in th.mse_decomposition(inst, (0.0, 0.25), n_mc=n_mc, seed=seed + i).values():
            worst = max(worst, d.relative_gap)
    return _le("decomposition_relative_gap", worst, 0.02)


def check_aleatoric_slope(seed=0, n_inst=3, n=2000, n_mc=500) -> Check:
    worst = 0.0
    for i in range(n_inst):
        inst = generate_theory_instance(n, 6, 3, 3, 1.0, 1.0, seed=seed * 1000 + 800 + i)
        s = th.aleatoric_slope(inst, n_mc=n_mc, seed=seed + i)
        x = th.xi(inst)
        worst = max(worst, abs(s.value - x) / abs(x) if s.value < 0 else np.inf)
    return _le("aleatoric_slope_rel_error_vs_xi", worst, 0.25)


def check_scalar_event(seed=0, n_draws=1000) -> Check:
    rng = make_rng(seed + 2)
    mismatches = 0
    for i in range(n_draws):
        inst = th.canonicalize_1d(generate_theory_instance(
            int(rng.integers(5, 30)), 1, 1, 1, float(rng.uniform(0.2, 3)),
            float(rng.uniform(0.2, 3)), seed=seed * 100_000 + i))
        general = th.event_E_check(inst, inst.V_I, inst.V_J).holds
        simple = th.scalar_event(inst.V_I, inst.V_J, inst.T_I[0, 0], inst.T_J[0, 0],
                                    inst.sigma_I)
        mismatches += general != simple
    return _le("scalar_event_mismatches", mismatches, 0)


def _coop_instance(seed, n=200, px=6, pz=4):
    rng = derive_rng(seed, 0xC00)
    X, Z = rng.standard_normal((n, px)), rng.standard_normal((n, pz))
    y = X @ rng.standard_normal(px) + Z @ rng.standard_normal(pz) + rng.standard_normal(n)
    return X, Z, y


def check_coop_limits(seed=0) -> List[Check]:
    X, Z, y = _coop_instance(seed)
    s0 = bl.coop_fit(X, Z, y, 0.0, max_iter=5000, tol=1e-12)
    A = np.hstack([X - X.mean(0), Z - Z.mean(0), np.ones((len(y), 1))])
    joint = A @ solve_least_squares(A, y)
    fx, fz, fxz = s0.components(X, Z)
    joint_gap = np.max(np.abs(s0.predict(X, Z) - joint))
    s1 = bl.coop_fit(X, Z, y, 0.999, max_iter=20_000, tol=1e-12)
    fx1, fz1, fxz1 = s1.components(X, Z)
    px = np.hstack([X - X.mean(0), np.ones((len(y), 1))])
    pz = np.hstack([Z - Z.mean(0), np.ones((len(y), 1))])
    avg = 0.5 * (px @ solve_least_squares(px, y) + pz @ solve_least_squares(pz, y))
    rel = np.linalg.norm(s1.predict(X, Z) - avg) / np.linalg.norm(avg)
    ratio = np.linalg.norm(fxz1) / np.linalg.norm(fx1)
    a2 = 0.0
    for rho in (0.1, 0.5, 2.0):
        simp = bl.coop_fit(X, Z, y, 4 * rho, simplified=True, max_iter=100_000, tol=1e-13)
        _, _, pred = bl.averaged_pair_fit(X, Z, y, rho)
        a2 = max(a2, np.max(np.abs(simp.predict(X, Z) - pred(X, Z))))
    return [_le("coop_rho0_vs_joint_fit", joint_gap, 1e-6),
            _le("coop_rho0999_vs_averaged_marginals_rel", rel, 1e-2),
            _le("coop_rho0999_interaction_ratio", ratio, 1e-2),
            _le("simplified_coop_vs_averaged_pair", a2, 1e-6)]


def theory_report(seed: int = 0) -> List[Check]:
    checks = [check_gd_vs_closed_form(seed), check_oracle_identity(seed), check_xi_negative(seed),
              check_decomposition(seed), check_aleatoric_slope(seed), check_scalar_event(seed)]
    return checks + check_coop_limits(seed)


def report_csv(checks: List[Check]) -> str:
    lines = ["name,statistic,relation,threshold,result"]
    lines += [",".join(c.row()) for c in checks]
    return "\n".join(lines) + "\n"
