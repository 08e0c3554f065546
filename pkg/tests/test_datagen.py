from dataclasses import replace

import numpy as np
import pytest

from metafusion.datagen import (SynthConfig, export_dataset, generate_synthetic,
                                generate_theory_instance, read_dataset, row_kron)
from metafusion.errors import InvalidConfig, InvalidDims
from metafusion.experiments import preset_config


def small(**kw):
    base = dict(n=400, px_latent=5, pz_latent=4, ps_latent=3, p_x=12, p_z=10,
                c_x=1.0, c_z=1.0, c_s=1.0, c_u=0.5, r_x=0.3, r_z=0.3, seed=3)
    base.update(kw)
    return SynthConfig(**base)


def test_same_seed_bit_identical():
    a, b = generate_synthetic(small()), generate_synthetic(small())
    assert all(np.array_equal(x, y) for x, y in zip(a.modalities, b.modalities))
    assert np.array_equal(a.labels, b.labels)
    c = generate_synthetic(small(seed=4))
    assert not np.array_equal(a.labels, c.labels)


def test_shapes_and_split():
    d = generate_synthetic(small())
    assert d.modalities[0].shape == (400, 12) and d.modalities[1].shape == (400, 10)
    counts = {t: len(d.rows(t)) for t in ("train", "val", "test")}
    assert counts == {"train": 256, "val": 64, "test": 80}
    assert d.without_test().n == 320


def test_label_model_from_latents():
    # noiseless label model: OLS on the true latent features has zero residual
    d = generate_synthetic(small(c_u=0.0))
    lat = np.hstack([d.latents["X*"], d.latents["Z*"], d.latents["S*"]])
    w, *_ = np.linalg.lstsq(lat, d.labels, rcond=None)
    assert np.max(np.abs(lat @ w - d.labels)) < 1e-10
    d = generate_synthetic(small())
    U = row_kron(d.latents["X*"], d.latents["Z*"])
    assert U.shape[1] == 20
    assert np.allclose(U[:, 4 * 2 + 3], d.latents["X*"][:, 2] * d.latents["Z*"][:, 3])


def test_pure_noise_modality():
    for seed in range(3):
        d = generate_synthetic(small(r_x=1.0, seed=seed, n=2000))
        X, y = d.modalities[0], d.labels
        r = [abs(np.corrcoef(X[:, j], y)[0, 1]) for j in range(X.shape[1])]
        assert max(r) <= 4 / np.sqrt(2000)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        small(r_x=1.5).validate()
    with pytest.raises(InvalidConfig):
        small(px_latent=0).validate()  # c_u != 0 needs both latent blocks
    with pytest.raises(InvalidConfig):
        small(f_x="cubic").validate()
    with pytest.raises(InvalidConfig):
        SynthConfig.from_dict({"n": 10, "typo": 1})
    assert SynthConfig.from_dict(small().to_dict()) == small()


def test_setting_presets_match_published_parameters():
    c = preset_config("1.1")
    assert (c.c_x, c.c_z, c.c_s, c.c_u) == (1, 1, 0, 0)
    assert (c.px_latent, c.pz_latent, c.p_x, c.p_z, c.r_x, c.r_z) == (20, 30, 500, 400, 0.4, 0.4)
    assert c.f_x == c.f_z == "identity"


def test_export_round_trip():
    d = generate_synthetic(small(n=50))
    text = export_dataset(d)
    assert text.splitlines()[0].startswith("x0,x1") and text.splitlines()[0].endswith("label,split")
    back = read_dataset(text)
    assert [m.shape for m in back.modalities] == [m.shape for m in d.modalities]
    for a, b in zip(back.modalities, d.modalities):
        assert np.allclose(a, b, rtol=1e-11, atol=1e-300)
    assert np.array_equal(back.split, d.split)
    assert export_dataset(back) == text


# ---- theory instances

def test_theory_instance_invariants():
    inst = generate_theory_instance(4000, 6, 3, 4, 0.7, 1.3, seed=0)
    for T in (inst.T_I, inst.T_J):
        G = T.T @ T
        assert np.max(np.abs(G - np.diag(np.diag(G)))) <= 1e-10
    assert np.max(np.abs(inst.V.mean(axis=0))) <= 4 / np.sqrt(inst.n)
    assert np.array_equal(inst.Y, inst.V @ inst.theta)
    gram = inst.V_I.T @ inst.V_I / inst.n
    target = inst.T_I.T @ inst.T_I + inst.sigma_I**2 * np.eye(3)
    assert np.max(np.abs(gram - target)) <= 5 / np.sqrt(inst.n) * max(1.0, np.max(target))


def test_theory_instance_one_dimensional():
    inst = generate_theory_instance(10, 1, 1, 1, 1.0, 1.0, seed=1)
    assert inst.T_I.shape == (1, 1) and inst.V_I.shape == (10, 1)


def test_theory_noise_limit():
    lo = generate_theory_instance(3000, 2, 2, 2, 0.1, 1.0, seed=2)
    hi = replace(lo)
    # same latents, inflated noise on block I
    rng = np.random.default_rng(0)
    hi_VI = lo.V @ lo.T_I + 50.0 * rng.standard_normal(lo.V_I.shape)
    c_lo = abs(np.corrcoef(lo.V_I[:, 0], lo.Y)[0, 1])
    c_hi = abs(np.corrcoef(hi_VI[:, 0], hi.Y)[0, 1])
    assert c_hi < c_lo and c_hi < 0.1


def test_theory_invalid_dims():
    with pytest.raises(InvalidDims):
        generate_theory_instance(10, 2, 3, 1, 1.0, 1.0, seed=0)
