import numpy as np
import pytest

from metafusion import extractors as ex
from metafusion.datagen import generate_synthetic
from metafusion.errors import InvalidRank, NotFitted, ShapeMismatch
from metafusion.experiments import preset_config
from metafusion.numerics import make_rng, solve_least_squares


def test_null_and_identity():
    X = make_rng(0).standard_normal((7, 3))
    null = ex.fit(ex.Extractor("null"), X)
    ident = ex.fit(ex.Extractor("identity"), X)
    assert ex.transform(null, X).shape == (7, 0)
    assert ex.transform(ident, X) is X or np.array_equal(ex.transform(ident, X), X)
    assert ident.width() == 3 and null.width() == 0


def test_pca_transform_requires_fit():
    with pytest.raises(NotFitted):
        ex.transform(ex.Extractor("pca", k=2), np.ones((3, 3)))
    with pytest.raises(InvalidRank):
        ex.fit(ex.Extractor("pca", k=5), np.ones((3, 4)))


def test_full_rank_pca_is_lossless():
    X = make_rng(1).standard_normal((20, 6)) + 3.0
    e = ex.fit(ex.Extractor("pca", k=6), X)
    H = ex.transform(e, X)
    rec = H @ e.projection.T + e.means
    assert np.max(np.abs(rec - X)) <= 1e-8


def test_pca_scores_centred_on_train_rows():
    X = make_rng(2).standard_normal((40, 8)) * 5 + 2
    e = ex.fit(ex.Extractor("pca", k=3), X)
    assert np.max(np.abs(ex.transform(e, X).mean(axis=0))) <= 1e-8
    with pytest.raises(ShapeMismatch):
        ex.transform(e, X[:, :5])


def test_default_bank_ladder():
    assert ex.default_ranks(500, 320) == [8, 16, 32]
    assert ex.default_ranks(25, 320) == [6, 12, 25]
    assert ex.default_ranks(3, 320) == [1, 3]
    bank = ex.default_bank(500, 320)
    assert [e.label() for e in bank] == ["null", "pca8", "pca16", "pca32", "identity"]


def test_more_components_capture_more_signal():
    cfg = preset_config("1.1-desk", seed=0)
    d = generate_synthetic(cfg)
    (Xt, _), yt = d.part("train")
    (Xv, _), yv = d.part("val")
    mse = {}
    for k in (5, 20):
        e = ex.fit(ex.Extractor("pca", k=k), Xt)
        A = np.hstack([ex.transform(e, Xt), np.ones((len(yt), 1))])
        w = solve_least_squares(A, yt)
        Av = np.hstack([ex.transform(e, Xv), np.ones((len(yv), 1))])
        mse[k] = np.mean((Av @ w - yv) ** 2)
    assert mse[5] > mse[20]
