import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metafusion import cohort as co
from metafusion import extractors as ex
from metafusion.errors import NonFiniteLoss, NotFitted, ShapeMismatch
from metafusion.numerics import make_rng, solve_least_squares

CLS = co.Task("classification", 3)


def banks_for(mods, ranks):
    return [ex.fit_bank(ex.make_bank(r, m), X) for m, (X, r) in enumerate(zip(mods, ranks))]


def fd_grad(student, H, t, peers, weights, rho, task, eps=1e-5):
    base = student.flat()
    g = np.zeros_like(base)
    for i in range(base.size):
        e = np.zeros_like(base)
        e[i] = eps
        lp = co.loss_and_grad(student.with_flat(base + e), H, t, peers, weights, rho, task)[0]
        lm = co.loss_and_grad(student.with_flat(base - e), H, t, peers, weights, rho, task)[0]
        g[i] = (lp - lm) / (2 * eps)
    return g


# ---- pairings

@pytest.mark.parametrize("sizes,count", [((1, 1), 8), ((0, 0), 3), ((1, 0, 0), 11),
                                         ((2, 3), 19), ((1, 1, 1), 26)])
def test_cohort_size_formula(sizes, count):
    P = co.build_pairings(sizes)
    assert len(P) == count == int(np.prod([k + 2 for k in sizes])) - 1
    assert tuple(0 for _ in sizes) not in P
    assert P == sorted(P)


def test_raw_pairings_without_learned_extractors():
    assert co.build_pairings([0, 0]) == [(0, 1), (1, 0), (1, 1)]


@given(st.lists(st.integers(0, 3), min_size=1, max_size=3))
@settings(max_examples=30, deadline=None)
def test_cohort_size_property(sizes):
    P = co.build_pairings(sizes)
    assert len(P) == len(set(P)) == int(np.prod([k + 2 for k in sizes])) - 1


# ---- fusion

def test_fuse_identity_null_and_provenance():
    rng = make_rng(0)
    X, Z = rng.standard_normal((30, 6)), rng.standard_normal((30, 5))
    banks = banks_for([X, Z], [[2], [3]])  # [null, pca2, identity], [null, pca3, identity]
    assert np.array_equal(co.fuse((2, 0), banks, [X, Z]), X)
    assert np.array_equal(co.fuse((0, 2), banks, [X, Z]), Z)
    F = co.fuse((1, 1), banks, [X, Z])
    assert F.shape == (30, 5)
    F2 = co.fuse((1, 1), banks, [X + rng.standard_normal(X.shape), Z])
    changed = np.any(np.abs(F2 - F) > 1e-12, axis=0)
    assert list(changed) == [True, True, False, False, False]


def test_fuse_unfitted_raises():
    X = np.ones((4, 3))
    banks = [ex.make_bank([2]), ex.make_bank([2])]
    with pytest.raises(NotFitted):
        co.fuse((1, 1), banks, [X, X])


# ---- prediction

def test_constant_linear_student():
    s = co.init_student((1,), 4, 1, make_rng(0))
    s = co.Student(s.pairing, "linear", (np.zeros((4, 1)),), (np.array([2.5]),))
    assert np.all(co.predict(s, np.ones((3, 4))) == 2.5)


def test_zero_mlp_outputs_bias():
    s = co.init_student((1,), 4, 2, make_rng(0), kind="mlp", hidden=(5,))
    flat = np.zeros_like(s.flat())
    z = s.with_flat(flat)
    z = co.Student(z.pairing, "mlp", z.weights, (z.biases[0], np.array([1.0, -2.0])))
    assert np.allclose(co.predict(z, make_rng(1).standard_normal((6, 4))), [[1.0, -2.0]] * 6)


def test_shape_mismatch():
    s = co.init_student((1,), 4, 1, make_rng(0))
    with pytest.raises(ShapeMismatch):
        co.predict(s, np.ones((3, 5)))


def test_least_squares_student_fits_noiseless_data():
    rng = make_rng(2)
    H = rng.standard_normal((40, 3))
    y = H @ np.array([1.0, -2.0, 0.5]) + 0.3
    w = solve_least_squares(np.hstack([H, np.ones((40, 1))]), y)
    s = co.Student((1,), "linear", (w[:3, None],), (w[3:],))
    assert co.task_loss(co.predict(s, H), y, co.REGRESSION) <= 1e-10


def test_softmax_rows_sum_to_one():
    z = make_rng(3).standard_normal((10, 4)) * 30
    assert np.max(np.abs(co.softmax(z).sum(axis=1) - 1)) <= 1e-12


# ---- gradient steps

def test_rho_zero_is_plain_gradient_descent():
    rng = make_rng(4)
    H, y = rng.standard_normal((20, 3)), rng.standard_normal(20)
    s = co.init_student((1,), 3, 1, make_rng(5))
    peer = rng.standard_normal((20, 1))
    a = co.grad_step(s, H, y, [peer], [1.0], 0.0, lr=0.05)
    b = co.grad_step(s, H, y, [], [], 0.7, lr=0.05)
    assert np.array_equal(a.flat(), b.flat())


def test_three_parameter_fd_check():
    rng = make_rng(6)
    H, y = rng.standard_normal((15, 2)), rng.standard_normal(15)
    s = co.init_student((1,), 2, 1, make_rng(7), init_scale=1.0)
    s = s.with_flat(rng.standard_normal(3))
    peer = rng.standard_normal((15, 1))
    _, g = co.loss_and_grad(s, H, y, [peer], [1.0], 0.5, co.REGRESSION)
    ref = fd_grad(s, H, y, [peer], [1.0], 0.5, co.REGRESSION)
    assert np.max(np.abs(g - ref) / np.maximum(np.abs(ref), 1e-8)) <= 1e-5


@pytest.mark.parametrize("kind", ["linear", "mlp"])
@pytest.mark.parametrize("task", [co.REGRESSION, CLS, co.Task("classification", 3, "self||peer")])
@pytest.mark.parametrize("rho", [0.0, 0.5, 2.0])
def test_gradient_matches_finite_differences(kind, task, rho):
    rng = make_rng(8)
    n, p = 12, 4
    H = rng.standard_normal((n, p))
    t = rng.integers(0, 3, n) if task.kind == "classification" else rng.standard_normal(n)
    d = task.out_dim
    s = co.init_student((1,), p, d, make_rng(9), kind=kind, hidden=(3,), ridge=0.1, init_scale=1.0)
    s = s.with_flat(0.5 * rng.standard_normal(s.flat().size))
    peers = [rng.standard_normal((n, d)), rng.standard_normal((n, d))]
    _, g = co.loss_and_grad(s, H, t, peers, [1.0, 0.5], rho, task)
    ref = fd_grad(s, H, t, peers, [1.0, 0.5], rho, task)
    assert np.max(np.abs(g - ref)) <= 1e-7 * max(1.0, np.max(np.abs(ref)))


def test_gd_converges_to_least_squares():
    rng = make_rng(10)
    H, y = rng.standard_normal((60, 4)), rng.standard_normal(60)
    s = co.init_student((1,), 4, 1, make_rng(0))
    lr = 0.9 / co.curvature(H, co.REGRESSION)
    for _ in range(3000):
        s = co.grad_step(s, H, y, lr=lr)
    w = solve_least_squares(np.hstack([H, np.ones((60, 1))]), y)
    assert np.max(np.abs(np.concatenate([s.weights[0].ravel(), s.biases[0]]) - w)) <= 1e-6


def test_divergence_lr_raises_nonfinite():
    rng = make_rng(11)
    H, y = 1e3 * rng.standard_normal((10, 3)), rng.standard_normal(10)
    s = co.init_student((1,), 3, 1, make_rng(0))
    with pytest.raises(NonFiniteLoss):
        for _ in range(2000):
            s = co.grad_step(s, H, y, lr=10.0)


def test_seed_keys_follow_extractor_identity():
    X = np.ones((5, 3))
    small = [ex.fit_bank(ex.make_bank([], 0), X), ex.fit_bank(ex.make_bank([], 1), X)]
    big = [ex.fit_bank(ex.make_bank([1, 2], 0), X), ex.fit_bank(ex.make_bank([2], 1), X)]
    assert co.student_seed_keys(small, (1, 1)) == co.student_seed_keys(big, (3, 2))
    assert co.student_seed_keys(big, (1, 0)) != co.student_seed_keys(big, (2, 0))
