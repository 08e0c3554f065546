import numpy as np
import pytest

from metafusion import baselines as bl
from metafusion import cohort as co
from metafusion import mutual as mu
from metafusion.datagen import MultimodalDataset, SynthConfig, generate_synthetic, split_tags
from metafusion.errors import ShapeMismatch, SingularSystem
from metafusion.numerics import make_rng, solve_least_squares
from metafusion.pipeline import build_banks

FAST = mu.TrainConfig(n_epochs=80)


def linear_instance(seed=0, n=200, px=6, pz=4, noise=1.0):
    rng = make_rng(seed)
    X, Z = rng.standard_normal((n, px)), rng.standard_normal((n, pz))
    y = X @ rng.standard_normal(px) + Z @ rng.standard_normal(pz) + noise * rng.standard_normal(n)
    return X, Z, y


def as_dataset(X, Z, y):
    return MultimodalDataset([X, Z], y, split_tags(len(y)))


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SynthConfig(n=250, px_latent=4, pz_latent=3, ps_latent=2, p_x=12,
                                          p_z=9, c_x=1, c_z=1, c_s=1, r_x=0.3, r_z=0.3, seed=5))


# ---- early / late

def test_early_fusion_equals_cohort_student(synth):
    early = bl.early_fusion_fit(synth, FAST)
    banks = build_banks(synth, ranks=[[2, 4], [3]])
    P = co.build_pairings([2, 1])
    c, _ = mu.train(co.Cohort(banks, P, {I: None for I in P}), synth, None, FAST, rho=0.0)
    J = bl.early_pairing(banks)
    assert J == (3, 2)
    mods, _ = synth.part("test")
    assert np.array_equal(early.predict(mods), c.predict_all(mods)[J])


def test_late_fusion_is_mean_of_unimodal(synth):
    late = bl.late_fusion_fit(synth, FAST)
    a = bl.unimodal_fit(synth, 0, FAST)
    b = bl.unimodal_fit(synth, 1, FAST)
    mods, _ = synth.part("test")
    assert np.max(np.abs(late.predict(mods) - 0.5 * (a.predict(mods) + b.predict(mods)))) <= 1e-12


def test_late_fusion_of_constants():
    rng = make_rng(1)
    X, Z = rng.standard_normal((50, 3)), rng.standard_normal((50, 2))
    ds = as_dataset(X, Z, np.full(50, 3.0))
    late = bl.late_fusion_fit(ds, mu.TrainConfig(n_epochs=400))
    assert np.allclose(late.predict([X, Z]), 3.0, atol=1e-6)


def test_early_fusion_noiseless_additive():
    X, Z, y = linear_instance(2, n=300, noise=0.0)
    ds = as_dataset(X, Z, y)
    early = bl.early_fusion_fit(ds, mu.TrainConfig(n_epochs=3000, lr=0.9))
    (Xt, Zt), yt = ds.part("train")
    assert np.mean((early.predict([Xt, Zt]).ravel() - yt) ** 2) <= 1e-10


def test_single_modality_rejected():
    ds = MultimodalDataset([np.ones((10, 2))], np.ones(10), split_tags(10))
    with pytest.raises(ShapeMismatch):
        bl.early_fusion_fit(ds)


# ---- cooperative learning

def test_coop_rho_zero_is_joint_fit():
    X, Z, y = linear_instance(3)
    st = bl.coop_fit(X, Z, y, 0.0, max_iter=5000, tol=1e-12)
    A = np.hstack([X, Z, np.ones((len(y), 1))])
    ref = A @ solve_least_squares(A, y)
    assert np.max(np.abs(st.predict(X, Z) - ref)) <= 1e-6


def test_coop_rho_near_one_averages_marginals():
    X, Z, y = linear_instance(4)
    st = bl.coop_fit(X, Z, y, 0.999, max_iter=20_000, tol=1e-12)
    fx, fz, fxz = st.components(X, Z)
    mx = np.hstack([X, np.ones((len(y), 1))])
    mz = np.hstack([Z, np.ones((len(y), 1))])
    avg = 0.5 * (mx @ solve_least_squares(mx, y) + mz @ solve_least_squares(mz, y))
    assert np.linalg.norm(st.predict(X, Z) - avg) / np.linalg.norm(avg) <= 1e-2
    assert np.linalg.norm(st.w_xz) <= 1e-2 * np.linalg.norm(st.w_x)


@pytest.mark.parametrize("rho", [0.0, 0.3, 0.8])
@pytest.mark.parametrize("ridge", [0.0, 5.0])
def test_coop_block_updates_monotone(rho, ridge):
    X, Z, y = linear_instance(5, n=60)
    st = bl.coop_fit(X, Z, y, rho, ridge=ridge, max_iter=50, tol=0)
    obj = np.array(st.objective)
    assert np.all(np.diff(obj) <= 1e-9 * obj[0])


def test_coop_rejects_bad_rho_and_singular():
    X, Z, y = linear_instance(6, n=30)
    with pytest.raises(ValueError):
        bl.coop_fit(X, Z, y, 1.0)
    Xw = make_rng(0).standard_normal((30, 40))
    with pytest.raises(SingularSystem):
        bl.coop_fit(Xw, Z, y, 0.5)
    st = bl.coop_fit(Xw, Z, y, 0.5, ridge=1.0)
    assert np.all(np.isfinite(st.predict(Xw, Z)))


@pytest.mark.parametrize("rho", [0.05, 0.5, 3.0])
def test_simplified_coop_matches_averaged_pair(rho):
    X, Z, y = linear_instance(7, n=80)
    simp = bl.coop_fit(X, Z, y, 4 * rho, simplified=True, max_iter=200_000, tol=1e-13)
    _, _, pred = bl.averaged_pair_fit(X, Z, y, rho)
    assert np.max(np.abs(simp.predict(X, Z) - pred(X, Z))) <= 1e-6


def test_averaged_pair_matches_two_student_gradient_descent():
    # both students trained on the averaged ensemble objective by plain gradient descent
    X, Z, y = linear_instance(8, n=80, px=3, pz=2)
    rho = 0.7
    a_ref, b_ref, _ = bl.averaged_pair_fit(X, Z, y, rho, fit_intercept=False)
    a, b = np.zeros(3), np.zeros(2)
    A = np.hstack([X / 2, Z / 2])
    B = np.hstack([np.sqrt(rho) * X, -np.sqrt(rho) * Z])
    L = np.linalg.eigvalsh(A.T @ A + B.T @ B)[-1]
    for _ in range(20_000):
        r = (X @ a + Z @ b) / 2 - y
        d = X @ a - Z @ b
        a = a - (X.T @ r / 2 + rho * X.T @ d) / L
        b = b - (Z.T @ r / 2 - rho * Z.T @ d) / L
    assert np.max(np.abs(a - a_ref)) <= 1e-6 and np.max(np.abs(b - b_ref)) <= 1e-6


def test_coop_select_singleton_and_interaction():
    X, Z, y = linear_instance(9)
    ds = as_dataset(X, Z, y)
    assert bl.coop_select_rho(ds, [0.4]).rho == 0.4
    d = generate_synthetic(SynthConfig(n=500, px_latent=3, pz_latent=3, p_x=8, p_z=8, c_x=1,
                                       c_z=1, c_u=1, r_x=0.1, r_z=0.1, seed=1))
    # additive signal across modalities; the averaged limit wastes it
    sel = bl.coop_select_rho(d, [0.0, 0.9])
    assert sel.rho == 0.0


def test_coop_select_skips_singular_ridge_free():
    rng = make_rng(1)
    X, Z = rng.standard_normal((60, 50)), rng.standard_normal((60, 5))
    y = Z @ np.ones(5) + 0.1 * rng.standard_normal(60)
    sel = bl.coop_select_rho(as_dataset(X, Z, y), [0.0, 0.5], ridges=[0.0, 1.0, 10.0])
    assert sel.ridge > 0 and all(r > 0 for _, r, _ in sel.table)
