"""Per-modality feature extractors.

Each modality gets a bank ordered as ``[null, learned..., identity]`` so
that index 0 drops the modality and the last index keeps the raw features.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from .errors import InvalidRank, NotFitted, ShapeMismatch
from .numerics import pca_fit

KINDS = ("null", "identity", "pca")


@dataclass(frozen=True)
class Extractor:
    kind: str
    k: int = 0
    modality: int = 0
    projection: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    n_features: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "pca" and self.k < 1:
            raise InvalidRank("pca extractor needs k >= 1")

    @property
    def fitted(self) -> bool:
        return self.kind != "pca" or self.projection is not None

    def width(self, n_features: Optional[int] = None) -> int:
        if self.kind == "null":
            return 0
        if self.kind == "pca":
            return self.k
        p = self.n_features if n_features is None else n_features
        if p is None:
            raise NotFitted("identity width unknown before fit")
        return p

    def label(self) -> str:
        return f"pca{self.k}" if self.kind == "pca" else self.kind


def fit(extractor: Extractor, train_data) -> Extractor:
    """Fit on training rows only; null and identity just record the width."""
    X = np.asarray(train_data, dtype=float)
    if extractor.kind != "pca":
        return replace(extractor, n_features=X.shape[1])
    if extractor.k > min(X.shape):
        raise InvalidRank(f"pca({extractor.k}) on {X.shape} data")
    res = pca_fit(X, extractor.k)
    return replace(extractor, projection=res.projection, means=res.means,
                   n_features=X.shape[1])


def transform(extractor: Extractor, data) -> np.ndarray:
    if not extractor.fitted:
        raise NotFitted(f"{extractor.label()} used before fit")
    X = np.asarray(data, dtype=float)
    if extractor.n_features is not None and X.shape[1] != extractor.n_features:
        raise ShapeMismatch(f"expected {extractor.n_features} columns, got {X.shape[1]}")
    if extractor.kind == "null":
        return np.zeros((X.shape[0], 0))
    if extractor.kind == "identity":
        return X
    return (X - extractor.means) @ extractor.projection


def default_ranks(p_m: int, n_train: int, max_rank: int = 32) -> List[int]:
    """Ladder ``k/4, k/2, k`` with ``k = min(max_rank, p_m, n_train - 1)``."""
    k = min(max_rank, p_m, n_train - 1)
    ranks = []
    for r in (k // 4, k // 2, k):
        if r >= 1 and r not in ranks:
            ranks.append(r)
    return ranks


def make_bank(ranks, modality: int = 0) -> List[Extractor]:
    bank = [Extractor("null", modality=modality)]
    bank += [Extractor("pca", k=int(r), modality=modality) for r in ranks]
    bank.append(Extractor("identity", modality=modality))
    return bank


def default_bank(p_m: int, n_train: int, modality: int = 0, max_rank: int = 32) -> List[Extractor]:
    return make_bank(default_ranks(p_m, n_train, max_rank), modality)


def fit_bank(bank, train_data) -> List[Extractor]:
    return [fit(e, train_data) for e in bank]
