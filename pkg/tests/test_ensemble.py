import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metafusion import ensemble as en
from metafusion.cohort import REGRESSION, Task
from metafusion.errors import EmptyPool, FormatError, MethodTaskMismatch
from metafusion.numerics import make_rng

CLS = Task("classification", 3)


def col(v):
    return np.asarray(v, float).reshape(-1, 1)


def test_identical_students_stop_immediately():
    y = np.arange(6.0)
    P = col(y + 1.0)
    preds = {(i,): P.copy() for i in range(1, 7)}
    c = en.ensemble_select(preds, y, en.SelectionConfig(p_prune=0.5, n_init=2))
    assert c.members == [(1,), (2,)]
    assert c.val_loss == pytest.approx(1.0)


def test_complementary_pair_beats_members():
    rng = make_rng(0)
    y = rng.standard_normal(20)
    e = rng.standard_normal(20)
    preds = {(1,): col(y + e), (2,): col(y - e), (3,): col(y + 3 * e)}
    c = en.ensemble_select(preds, y, en.SelectionConfig(p_prune=0.0, n_init=1))
    assert set(c.members[:2]) == {(1,), (2,)}
    assert c.val_loss < min(np.mean(e**2), np.mean(e**2))


def test_prune_count_and_empty_pool():
    y = np.zeros(4)
    preds = {(i,): col(np.full(4, float(i))) for i in range(1, 9)}
    c = en.ensemble_select(preds, y, en.SelectionConfig(p_prune=0.5, n_init=4, n_c=8))
    assert set(c.members) <= {(1,), (2,), (3,), (4,)}
    with pytest.raises(EmptyPool):
        en.ensemble_select(preds, y, en.SelectionConfig(p_prune=0.5, n_init=5))


@given(st.integers(0, 10_000), st.integers(4, 12))
@settings(max_examples=40, deadline=None)
def test_committee_never_worse_than_seed(seed, P):
    rng = make_rng(seed)
    y = rng.standard_normal(15)
    preds = {(i,): col(y + rng.standard_normal(15) * rng.uniform(0.1, 3)) for i in range(P)}
    cfg = en.SelectionConfig()
    c = en.ensemble_select(preds, y, cfg)
    losses = {I: np.mean((p.ravel() - y) ** 2) for I, p in preds.items()}
    seed_members = en.sort_by_loss(losses)[:cfg.n_init]
    seed_loss = np.mean((np.mean([preds[I] for I in seed_members], axis=0).ravel() - y) ** 2)
    assert c.val_loss <= seed_loss + 1e-12
    assert len(c.members) == len(set(c.members)) <= min(10, P)
    assert c.val_loss == pytest.approx(np.mean((c.predict(preds).ravel() - y) ** 2))


def test_committee_text_round_trip():
    c = en.Committee([(1, 0), (0, 2)], "weighted-average", [0.25, 0.75], 1.5)
    back = en.Committee.from_text(c.to_text())
    assert back == c
    with pytest.raises(FormatError):
        en.Committee.from_text('{"format": "committee", "version": 9}')
    with pytest.raises(FormatError):
        en.Committee.from_text("not json")


def test_simple_average_of_constants():
    out = en.aggregate([col([2.0, 2.0]), col([4.0, 4.0])], "simple-average")
    assert np.all(out == 3.0)


def test_identical_average_is_exact():
    p = col(make_rng(1).standard_normal(7))
    assert np.array_equal(en.aggregate([p] * 3, "simple-average"), p)


def test_majority_vote_and_ties():
    one_hot = np.eye(3)
    votes = [one_hot[[1]], one_hot[[1]], one_hot[[2]]]
    assert np.argmax(en.aggregate(votes, "majority-vote", CLS)) == 1
    tie = [one_hot[[2]], one_hot[[0]]]
    assert np.argmax(en.aggregate(tie, "majority-vote", CLS)) == 0
    wtie = [one_hot[[2]], one_hot[[1]]]
    assert np.argmax(en.aggregate(wtie, "weighted-vote", CLS, [0.5, 0.5])) == 1
    assert np.argmax(en.aggregate(wtie, "weighted-vote", CLS, [0.6, 0.4])) == 2


def test_votes_need_classification():
    with pytest.raises(MethodTaskMismatch):
        en.aggregate([col([1.0])], "majority-vote", REGRESSION)
    with pytest.raises(MethodTaskMismatch):
        en.fit_aggregator("weighted-vote", {(1,): col([1.0])}, np.array([1.0]))


def test_weighted_average_weights():
    y = np.zeros(4)
    w = en.performance_weights([col(np.full(4, 1.0)), col(np.full(4, np.sqrt(3)))], y, REGRESSION)
    assert np.allclose(w, [0.75, 0.25])


def test_fitted_aggregators():
    rng = make_rng(2)
    y = rng.standard_normal(40)
    preds = {(1,): col(y + 0.1 * rng.standard_normal(40)), (2,): col(2 * y + 1.0)}
    best = en.fit_aggregator("best-single", preds, y)
    assert best.members == [(1,)]
    stack = en.fit_aggregator("stacking", preds, y)
    # the second member is an exact affine map of y, so stacking recovers y
    assert np.max(np.abs(stack.predict(preds).ravel() - y)) < 1e-5
    wa = en.fit_aggregator("weighted-average", preds, y)
    assert np.isclose(wa.weights.sum(), 1.0)


def test_classification_stacking_and_best():
    rng = make_rng(3)
    y = rng.integers(0, 3, 60)
    good = np.eye(3)[y] * 4 + rng.standard_normal((60, 3))
    bad = rng.standard_normal((60, 3))
    preds = {(1,): bad, (2,): good}
    assert en.fit_aggregator("best-single", preds, y, CLS).members == [(2,)]
    out = en.fit_aggregator("stacking", preds, y, CLS).predict(preds)
    assert np.mean(np.argmax(out, 1) == y) > 0.9
