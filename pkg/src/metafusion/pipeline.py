"""End-to-end Meta Fusion: extractors, cohort, adaptive mutual learning, committee."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import cohort as co
from . import extractors as ex
from . import mutual as mu
from .cohort import Cohort, Pairing, Student, Task
from .datagen import MultimodalDataset
from .ensemble import Committee, SelectionConfig
from .errors import FormatError, MetaFusionError, ShapeMismatch

FORMAT_VERSION = 1


@dataclass(frozen=True)
class FitConfig:
    """Everything :meth:`MetaFusionModel.fit` needs besides the data.

    ``ranks`` overrides the per-modality PCA ladder (one list per modality);
    ``pairings`` restricts the cohort to a subset of the full pairing set.
    """
    train: mu.TrainConfig = mu.TrainConfig()
    selection: SelectionConfig = SelectionConfig()
    rho_grid: Sequence[float] = mu.DEFAULT_RHO_GRID
    weights_mode: str = "learn-from-top"
    max_rank: int = 32
    ranks: Optional[Sequence[Sequence[int]]] = None
    pairings: Optional[Sequence[Pairing]] = None


class _Stage:
    """Re-raise module errors with the pipeline stage prefixed."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if isinstance(exc, MetaFusionError) and not str(exc).startswith("["):
            raise type(exc)(f"[{self.name}] {exc}") from exc
        return False


def _check_no_test(dataset: MultimodalDataset):
    """Training code receives a copy with the test rows removed."""
    fit_data = dataset.without_test()
    assert not np.any(fit_data.split == "test")
    return fit_data


def build_banks(dataset: MultimodalDataset, max_rank: int = 32, ranks=None):
    mods, _ = dataset.part("train")
    n_train = mods[0].shape[0]
    banks = []
    for m, X in enumerate(mods):
        r = ranks[m] if ranks is not None else ex.default_ranks(X.shape[1], n_train, max_rank)
        banks.append(ex.fit_bank(ex.make_bank(r, m), X))
    return banks


@dataclass
class MetaFusionModel:
    banks: List[List[ex.Extractor]]
    cohort: Cohort
    committee: Committee
    rho: float
    report: Optional[mu.ScreeningReport] = None
    weights: Optional[mu.DivergenceWeights] = None
    rho_table: List = field(default_factory=list)

    def __post_init__(self):
        if not set(self.committee.members) <= set(self.cohort.pairings):
            raise ShapeMismatch("committee members must be cohort pairings")

    @classmethod
    def fit(cls, dataset: MultimodalDataset, config: FitConfig = FitConfig(),
            task: Task = co.REGRESSION) -> "MetaFusionModel":
        data = _check_no_test(dataset)
        with _Stage("extractors"):
            banks = build_banks(data, config.max_rank, config.ranks)
        with _Stage("cohort"):
            pairings = (list(map(tuple, config.pairings)) if config.pairings is not None
                        else co.build_pairings([len(b) - 2 for b in banks]))
            cohort = Cohort(banks, pairings, {I: None for I in pairings}, task)
            fused = mu.prepare(cohort, data)
        with _Stage("screening"):
            report = mu.initial_screening(cohort, fused, config.train)
        with _Stage("mutual learning"):
            search = mu.select_rho(cohort, fused, config.rho_grid, config.train,
                                   config.selection, config.weights_mode, report)
        return cls(banks, search.cohort, search.committee, search.rho, report,
                   search.weights, search.table)

    def member_predictions(self, modalities) -> Dict[Pairing, np.ndarray]:
        if len(modalities) != len(self.banks):
            raise ShapeMismatch(f"expected {len(self.banks)} modalities, got {len(modalities)}")
        reps = co.representations(self.banks, modalities)
        return {I: co.predict(self.cohort.students[I], co.fuse_reps(I, reps))
                for I in self.committee.members}

    def predict(self, modalities) -> np.ndarray:
        """Committee average of member outputs (logits for classification)."""
        return self.committee.predict(self.member_predictions(modalities))

    # ------------------------------------------------------------ serialization

    def to_text(self) -> str:
        """Versioned JSON holding everything :meth:`predict` reads."""
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        banks = [[{"kind": e.kind, "k": e.k, "modality": e.modality,
                   "projection": arr(e.projection), "means": arr(e.means),
                   "n_features": e.n_features} for e in bank] for bank in self.banks]
        students = []
        for I in self.cohort.pairings:
            s = self.cohort.students[I]
            students.append({"pairing": list(map(int, I)), "kind": s.kind,
                             "weights": [arr(w) for w in s.weights],
                             "biases": [arr(b) for b in s.biases],
                             "ridge": s.ridge, "fit_intercept": s.fit_intercept})
        return json.dumps({
            "format": "metafusion-model", "version": FORMAT_VERSION,
            "task": asdict(self.cohort.task), "rho": self.rho,
            "banks": banks, "students": students,
            "committee": json.loads(self.committee.to_text()),
        }, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "MetaFusionModel":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(str(exc)) from exc
        if d.get("format") != "metafusion-model" or d.get("version") != FORMAT_VERSION:
            raise FormatError("not a version-1 metafusion model record")

        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        try:
            banks = [[ex.Extractor(e["kind"], e["k"], e["modality"], arr(e["projection"]),
                                   arr(e["means"]), e["n_features"]) for e in bank]
                     for bank in d["banks"]]
            students = {}
            for s in d["students"]:
                I = tuple(s["pairing"])
                students[I] = Student(I, s["kind"], tuple(arr(w) for w in s["weights"]),
                                      tuple(arr(b) for b in s["biases"]),
                                      s["ridge"], s["fit_intercept"])
            task = Task(**{f.name: d["task"][f.name] for f in fields(Task)})
            committee = Committee.from_text(json.dumps(d["committee"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed model record: {exc}") from exc
        cohort = Cohort(banks, list(students), students, task)
        return cls(banks, cohort, committee, float(d["rho"]))
