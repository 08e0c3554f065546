"""Synthetic multimodal datasets and latent-factor instances for the theory checks."""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import InvalidConfig, InvalidDims
from .numerics import make_rng

TRANSFORMS = ("identity", "quadratic-minus-linear")
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.64, 0.16, 0.20)


def apply_transform(name: str, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return a
    if name == "quadratic-minus-linear":
        return a * a - a
    raise InvalidConfig(f"unknown transform {name!r}")


@dataclass(frozen=True)
class SynthConfig:
    n: int = 500
    px_latent: int = 20
    pz_latent: int = 20
    ps_latent: int = 0
    p_x: int = 100
    p_z: int = 100
    c_x: float = 0.0
    c_z: float = 0.0
    c_s: float = 0.0
    c_u: float = 0.0
    f_x: str = "identity"
    f_z: str = "identity"
    f_s: str = "identity"
    r_x: float = 0.0
    r_z: float = 0.0
    seed: int = 0

    def validate(self) -> "SynthConfig":
        for name in ("n", "px_latent", "pz_latent", "ps_latent", "p_x", "p_z"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise InvalidConfig(f"{name} must be a nonnegative integer, got {v}")
        if self.n < 5:
            raise InvalidConfig("need at least 5 samples for a three-way split")
        if self.p_x < 1 or self.p_z < 1:
            raise InvalidConfig("observed dimensions must be positive")
        if self.c_u != 0 and (self.px_latent < 1 or self.pz_latent < 1):
            raise InvalidConfig("interaction term needs both latent blocks")
        for name in ("r_x", "r_z"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1], got {v}")
        for name in ("f_x", "f_z", "f_s"):
            if getattr(self, name) not in TRANSFORMS:
                raise InvalidConfig(f"{name} must be one of {TRANSFORMS}")
        return self

    @classmethod
    def from_dict(cls, d: Dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidConfig(f"unknown synth keys: {sorted(extra)}")
        return cls(**d).validate()

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class MultimodalDataset:
    modalities: List[np.ndarray]
    labels: np.ndarray
    split: np.ndarray  # array of "train" / "val" / "test"
    task: str = "regression"
    n_classes: int = 0
    latents: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = self.labels.shape[0]
        for m in self.modalities:
            if m.shape[0] != n:
                raise InvalidConfig("modalities disagree on the number of rows")
        if self.split.shape[0] != n or not set(np.unique(self.split)) <= set(SPLITS):
            raise InvalidConfig("split tags must label every row with train/val/test")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def rows(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == tag)

    def part(self, tag: str):
        """(list of modality blocks, labels) restricted to one split."""
        idx = self.rows(tag)
        return [m[idx] for m in self.modalities], self.labels[idx]

    def without_test(self) -> "MultimodalDataset":
        idx = np.flatnonzero(self.split != "test")
        return MultimodalDataset([m[idx] for m in self.modalities], self.labels[idx],
                                 self.split[idx], self.task, self.n_classes)


def split_tags(n: int) -> np.ndarray:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    tags = np.empty(n, dtype=object)
    tags[:n_train] = "train"
    tags[n_train:n_train + n_val] = "val"
    tags[n_train + n_val:] = "test"
    return tags.astype(str)


def row_kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: row i is ``a[i] (x) b[i]``."""
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


def generate_synthetic(config: SynthConfig) -> MultimodalDataset:
    """Signal-plus-noise generator built on shared and modality-specific latents.

    Draw order from the seeded stream is fixed: latents X*, Z*, S*, the
    coefficient vectors, the mixing maps T_x, T_z, then the noise blocks.
    """
    cfg = config.validate()
    rng = make_rng(cfg.seed)
    n = cfg.n
    xs = rng.standard_normal((n, cfg.px_latent))
    zs = rng.standard_normal((n, cfg.pz_latent))
    ss = rng.standard_normal((n, cfg.ps_latent))
    us = row_kron(xs, zs)
    beta_x = rng.standard_normal(cfg.px_latent)
    beta_z = rng.standard_normal(cfg.pz_latent)
    beta_s = rng.standard_normal(cfg.ps_latent)
    beta_u = rng.standard_normal(us.shape[1])
    y = (cfg.c_x * apply_transform(cfg.f_x, xs) @ beta_x
         + cfg.c_z * apply_transform(cfg.f_z, zs) @ beta_z
         + cfg.c_s * apply_transform(cfg.f_s, ss) @ beta_s
         + cfg.c_u * us @ beta_u)
    lat_x = np.hstack([xs, ss])
    lat_z = np.hstack([zs, ss])
    t_x = rng.standard_normal((lat_x.shape[1], cfg.p_x))
    t_z = rng.standard_normal((lat_z.shape[1], cfg.p_z))
    eps_x = rng.standard_normal((n, cfg.p_x))
    eps_z = rng.standard_normal((n, cfg.p_z))
    x = (1 - cfg.r_x) * lat_x @ t_x + cfg.r_x * eps_x
    z = (1 - cfg.r_z) * lat_z @ t_z + cfg.r_z * eps_z
    latents = {"X*": xs, "Z*": zs, "S*": ss, "U*": us}
    return MultimodalDataset([x, z], y, split_tags(n), latents=latents)


def export_dataset(dataset: MultimodalDataset, names: Optional[Sequence[str]] = None) -> str:
    """Columnar text: header ``x0,...,z0,...,label,split``; 12 significant digits."""
    names = list(names) if names is not None else ["x", "z", "w", "v"][: len(dataset.modalities)]
    if len(names) < len(dataset.modalities):
        names += [f"m{i}_" for i in range(len(names), len(dataset.modalities))]
    header = []
    for name, m in zip(names, dataset.modalities):
        header += [f"{name}{j}" for j in range(m.shape[1])]
    header += ["label", "split"]
    block = np.hstack(list(dataset.modalities) + [dataset.labels[:, None].astype(float)])
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row, tag in zip(block, dataset.split):
        buf.write(",".join(format(v, ".12g") for v in row) + "," + tag + "\n")
    return buf.getvalue()


def read_dataset(text: str) -> MultimodalDataset:
    """Inverse of :func:`export_dataset` (values are rounded to 12 digits)."""
    lines = text.strip("\n").split("\n")
    header = lines[0].split(",")
    body = [ln.split(",") for ln in lines[1:]]
    values = np.array([[float(v) for v in r[:-1]] for r in body])
    tags = np.array([r[-1] for r in body])
    prefixes = [h.rstrip("0123456789") for h in header[:-2]]
    mods, start = [], 0
    while start < len(prefixes):
        stop = start
        while stop < len(prefixes) and prefixes[stop] == prefixes[start]:
            stop += 1
        mods.append(values[:, start:stop])
        start = stop
    return MultimodalDataset(mods, values[:, -1], tags)


# ---------------------------------------------------------------- latent factor instances

@dataclass
class TheoryInstance:
    n: int
    p: int
    p_I: int
    p_J: int
    V: np.ndarray
    theta: np.ndarray
    T_I: np.ndarray
    T_J: np.ndarray
    sigma_I: float
    sigma_J: float
    V_I: np.ndarray
    V_J: np.ndarray
    Y: np.ndarray

    def with_observations(self, V, V_I, V_J) -> "TheoryInstance":
        return replace(self, n=V.shape[0], V=V, V_I=V_I, V_J=V_J, Y=V @ self.theta)


def _orthogonal_columns(rng, p, q):
    g = rng.standard_normal((p, q))
    Q, R = np.linalg.qr(g)
    Q = Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))
    scales = rng.uniform(0.5, 2.0, size=q)
    return Q * scales


def generate_theory_instance(n: int, p: int, p_I: int, p_J: int,
                             sigma_I: float, sigma_J: float, seed: int) -> TheoryInstance:
    """Latent factor model: ``Y = V theta`` and ``V_m = V T_m + eps_m``.

    Columns of each ``T`` are orthogonal with scales iid Uniform(0.5, 2).
    """
    if p_I > p or p_J > p or min(p_I, p_J, p) < 1:
        raise InvalidDims(f"need 1 <= p_I, p_J <= p, got p={p}, p_I={p_I}, p_J={p_J}")
    if n < max(p_I, p_J):
        raise InvalidDims("n must be at least max(p_I, p_J)")
    if sigma_I <= 0 or sigma_J <= 0:
        raise InvalidDims("noise scales must be positive")
    rng = make_rng(seed)
    T_I = _orthogonal_columns(rng, p, p_I)
    T_J = _orthogonal_columns(rng, p, p_J)
    theta = rng.standard_normal(p)
    V = rng.standard_normal((n, p))
    V_I = V @ T_I + sigma_I * rng.standard_normal((n, p_I))
    V_J = V @ T_J + sigma_J * rng.standard_normal((n, p_J))
    return TheoryInstance(n, p, p_I, p_J, V, theta, T_I, T_J, float(sigma_I),
                          float(sigma_J), V_I, V_J, V @ theta)
