"""Preset synthetic settings, experiment configs and the repetition runner."""
from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import baselines as bl
from . import cohort as co
from . import ensemble as en
from . import mutual as mu
from .datagen import SynthConfig, generate_synthetic
from .ensemble import SelectionConfig
from .errors import InvalidConfig, MethodTaskMismatch, NonFiniteLoss, UnknownPreset
from .pipeline import build_banks

METHOD_NAMES = ("modality-1", "modality-2", "early", "late", "coop", "meta-fusion",
                "best-single", "best-single-independent", "stacking", "simple-avg",
                "weighted-avg", "majority-vote", "weighted-vote")
BENCHMARKS = ("modality-1", "modality-2", "early", "late", "coop")
ENSEMBLE_METHODS = ("best-single-independent", "best-single", "meta-fusion", "stacking",
                    "simple-avg", "weighted-avg")
ABLATION_MODES = ("ensembles", "weights")
DESK_REPS = 20

_QML = "quadratic-minus-linear"
PRESETS: Dict[str, dict] = {
    "1.1": dict(px_latent=20, pz_latent=30, p_x=500, p_z=400, c_x=1.0, c_z=1.0,
                r_x=0.4, r_z=0.4),
    "1.2": dict(px_latent=20, pz_latent=20, p_x=2000, p_z=100, c_x=1.0, c_z=1.0, c_u=1.0,
                f_x=_QML, r_x=0.1, r_z=0.1),
    "1.3": dict(px_latent=20, pz_latent=20, p_x=2000, p_z=100, c_x=1.0, c_z=1.0, c_u=1.0,
                f_x=_QML, r_x=0.5, r_z=0.1),
    "2.1": dict(px_latent=50, pz_latent=30, ps_latent=20, p_x=500, p_z=400, c_s=1.0,
                r_x=0.4, r_z=0.4),
    "2.2": dict(px_latent=50, pz_latent=30, ps_latent=20, p_x=2000, p_z=400, c_s=1.0,
                f_s=_QML, r_x=0.3, r_z=0.3),
    # stated as "same as 1.2"; read as 2.2 with a noisier first modality
    "2.3": dict(px_latent=50, pz_latent=30, ps_latent=20, p_x=2000, p_z=400, c_s=1.0,
                f_s=_QML, r_x=0.5, r_z=0.3),
}
PRESET_NOTES = {
    "1.1": "linear, complementary modalities",
    "1.2": "nonlinear X part plus interaction, unbalanced dimensions",
    "1.3": "as 1.2 with a noisier first modality (r_x=0.5)",
    "2.1": "linear, shared latent only",
    "2.2": "nonlinear shared latent",
    "2.3": "as 2.2 with a noisier first modality (r_x=0.5)",
}
FULL_N = 2000
DESK_N = 500


def preset_config(name: str, seed: int = 0) -> SynthConfig:
    """``"1.2"`` gives full scale (n=2000); ``"1.2-desk"`` has n=500 and observed dims / 4."""
    base, _, suffix = name.partition("-")
    if base not in PRESETS or suffix not in ("", "desk"):
        raise UnknownPreset(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = dict(PRESETS[base])
    if suffix == "desk":
        d["p_x"] //= 4
        d["p_z"] //= 4
        d["n"] = DESK_N
    else:
        d["n"] = FULL_N
    return SynthConfig(seed=seed, **d).validate()


def list_presets() -> List[dict]:
    out = []
    for name in PRESETS:
        for variant in (name, name + "-desk"):
            cfg = preset_config(variant).to_dict()
            cfg.pop("seed")
            out.append({"name": variant, "note": PRESET_NOTES[name],
                        "repetitions": DESK_REPS if variant.endswith("desk") else 100, **cfg})
    return out


def presets_csv() -> str:
    rows = list_presets()
    keys = list(rows[0])
    return _csv([keys] + [[_fmt(r[k]) for k in keys] for r in rows])


# ---------------------------------------------------------------- configs

@dataclass(frozen=True)
class CoopConfig:
    rho_grid: Tuple[float, ...] = bl.COOP_RHO_GRID
    # ridge values relative to the mean squared column norm of the centred design
    ridge_grid: Tuple[float, ...] = (0.0, 1e-3, 1e-2, 1e-1, 1.0)
    max_iter: int = 500
    tol: float = 1e-8


@dataclass(frozen=True)
class AblationConfig:
    mode: str = "ensembles"
    rho: float = 1.0  # fixed coupling for the weights comparison
    weight_modes: Tuple[str, ...] = mu.WEIGHT_MODES

    def __post_init__(self):
        if self.mode not in ABLATION_MODES:
            raise InvalidConfig(f"ablation mode must be one of {ABLATION_MODES}")
        bad = set(self.weight_modes) - set(mu.WEIGHT_MODES)
        if bad:
            raise InvalidConfig(f"unknown weight modes {sorted(bad)}")


@dataclass(frozen=True)
class ExperimentConfig:
    setting: str = "2.3-desk"
    synth: Optional[SynthConfig] = None  # replaces the preset when given
    methods: Tuple[str, ...] = ("modality-1", "modality-2", "early", "late", "coop",
                                "meta-fusion")
    repetitions: int = 1
    seed: int = 0
    train: mu.TrainConfig = mu.TrainConfig()
    selection: SelectionConfig = SelectionConfig()
    rho_grid: Tuple[float, ...] = mu.DEFAULT_RHO_GRID
    weights_mode: str = "learn-from-top"
    max_rank: int = 32
    coop: CoopConfig = CoopConfig()
    ablation: AblationConfig = AblationConfig()
    jobs: int = 1
    output: Optional[str] = None

    def validate(self) -> "ExperimentConfig":
        if self.repetitions < 1:
            raise InvalidConfig("repetitions must be at least 1")
        if not self.methods:
            raise InvalidConfig("method list must be nonempty")
        bad = [m for m in self.methods if m not in METHOD_NAMES]
        if bad:
            raise InvalidConfig(f"unknown methods {bad}")
        votes = [m for m in self.methods if m.endswith("vote")]
        if votes:
            raise MethodTaskMismatch(f"{votes} need a classification task; synthetic "
                                     "settings are regression")
        if self.weights_mode not in mu.WEIGHT_MODES:
            raise InvalidConfig(f"weights_mode must be one of {mu.WEIGHT_MODES}")
        if self.synth is None:
            preset_config(self.setting)
        else:
            self.synth.validate()
        return self

    def synth_for(self, rep: int) -> SynthConfig:
        base = self.synth if self.synth is not None else preset_config(self.setting)
        return replace(base, seed=self.seed + rep)

    def desk(self) -> "ExperimentConfig":
        """Switch a full-scale preset to its desk variant."""
        if self.synth is not None or self.setting.endswith("-desk"):
            return self
        return replace(self, setting=self.setting + "-desk")


_NESTED = {"train": mu.TrainConfig, "selection": SelectionConfig, "synth": SynthConfig,
           "coop": CoopConfig, "ablation": AblationConfig}
_TUPLES = {"methods", "rho_grid", "ridge_grid", "hidden", "weight_modes"}


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise InvalidConfig(f"{where or 'config'} must be a mapping")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise InvalidConfig(f"unknown keys in {where or 'config'}: {sorted(extra)}")
    kw = {}
    for k, v in d.items():
        if k in _NESTED and cls is ExperimentConfig:
            kw[k] = _build(_NESTED[k], v, k)
        elif k in _TUPLES:
            kw[k] = tuple(v if isinstance(v, (list, tuple)) else [v])
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{where or 'config'}: {exc}") from exc


def config_from_dict(d: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, d or {}, "")
    if cfg.synth is not None:
        cfg.synth.validate()
    return cfg.validate()


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        try:
            d = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"{path}: {exc}") from exc
    return config_from_dict(d or {})


# ---------------------------------------------------------------- rows and CSV

@dataclass(frozen=True)
class ResultRow:
    setting: str
    method: str
    repetition: int
    seed: int
    metric: str
    value: float
    wall_time: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise NonFiniteLoss(f"{self.method} at seed {self.seed}: {self.metric} = {self.value}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _sorted(rows: Sequence[ResultRow]) -> List[ResultRow]:
    return sorted(rows, key=lambda r: (r.setting, r.method, r.repetition, r.metric))


def rows_csv(rows: Sequence[ResultRow]) -> str:
    """Deterministic result table; wall times live in :func:`timing_csv`."""
    head = ["setting", "method", "repetition", "seed", "metric", "value"]
    return _csv([head] + [[r.setting, r.method, r.repetition, r.seed, r.metric, _fmt(r.value)]
                          for r in _sorted(rows)])


def timing_csv(rows: Sequence[ResultRow]) -> str:
    head = ["setting", "method", "repetition", "metric", "wall_time"]
    return _csv([head] + [[r.setting, r.method, r.repetition, r.metric, _fmt(r.wall_time)]
                          for r in _sorted(rows)])


def summarize(rows: Sequence[ResultRow]) -> List[dict]:
    """Mean and standard error (sample sd / sqrt(reps)) per setting, method, metric."""
    groups: Dict[tuple, List[float]] = {}
    for r in _sorted(rows):
        groups.setdefault((r.setting, r.method, r.metric), []).append(r.value)
    out = []
    for (s, m, k), vals in sorted(groups.items()):
        v = np.asarray(vals)
        se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
        out.append({"setting": s, "method": m, "metric": k, "n": int(v.size),
                    "mean": float(v.mean()), "se": se})
    return out


def summary_csv(rows: Sequence[ResultRow]) -> str:
    summ = summarize(rows)
    head = ["setting", "method", "metric", "n", "mean", "se"]
    return _csv([head] + [[d[k] if not isinstance(d[k], float) else _fmt(d[k]) for k in head]
                          for d in summ])


def paired_values(rows: Sequence[ResultRow], method: str, metric: str = "mse",
                  setting: Optional[str] = None) -> np.ndarray:
    sel = [r for r in _sorted(rows) if r.method == method and r.metric == metric
           and (setting is None or r.setting == setting)]
    return np.array([r.value for r in sel])


# ---------------------------------------------------------------- runner

def _mse(pred, y) -> float:
    return float(np.mean((np.asarray(pred).ravel() - np.asarray(y).ravel()) ** 2))


def _relative_ridges(dataset, grid):
    (X, Z), _ = dataset.part("train")
    Xc, Zc = X - X.mean(0), Z - Z.mean(0)
    scale = (np.sum(Xc**2) + np.sum(Zc**2)) / (X.shape[1] + Z.shape[1])
    return [float(g * scale) for g in grid]


class _Rep:
    """Lazily computed artifacts of one repetition, shared across methods."""

    def __init__(self, cfg: ExperimentConfig, rep: int):
        self.cfg, self.rep = cfg, rep
        self.seed = cfg.seed + rep
        self.dataset = generate_synthetic(cfg.synth_for(rep))
        self.fit_data = self.dataset.without_test()
        self.test_mods, self.y_test = self.dataset.part("test")
        self.tc = replace(cfg.train, seed=self.seed)
        self._cache = {}

    def get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def cohort(self) -> co.Cohort:
        def make():
            banks = build_banks(self.fit_data, self.cfg.max_rank)
            P = co.build_pairings([len(b) - 2 for b in banks])
            return co.Cohort(banks, P, {I: None for I in P})
        return self.get("cohort", make)

    @property
    def fused(self):
        return self.get("fused", lambda: mu.prepare(self.cohort, self.fit_data))

    @property
    def report(self) -> mu.ScreeningReport:
        return self.get("report", lambda: mu.initial_screening(self.cohort, self.fused, self.tc))

    @property
    def search(self) -> mu.RhoSearch:
        return self.get("search", lambda: mu.select_rho(
            self.cohort, self.fused, self.cfg.rho_grid, self.tc, self.cfg.selection,
            self.cfg.weights_mode, self.report))

    def test_outputs(self, which: str):
        c = self.report.cohort if which == "independent" else self.search.cohort
        return self.get(("test", which), lambda: c.predict_all(self.test_mods))

    def val_outputs(self, which: str):
        c = self.report.cohort if which == "independent" else self.search.cohort
        return self.get(("val", which), lambda: mu.validation_outputs(c, self.fused))

    def raw(self, m: Optional[int]):
        banks = self.cohort.banks
        if m is None:
            return bl.early_pairing(banks)
        return bl.unimodal_pairing(banks, m)


def _method_outputs(state: _Rep, method: str):
    """(test predictions, validation predictions) for one method."""
    y_val = state.fused.y_val
    if method in ("modality-1", "modality-2", "early", "late"):
        pairs = {"modality-1": [state.raw(0)], "modality-2": [state.raw(1)],
                 "early": [state.raw(None)], "late": [state.raw(0), state.raw(1)]}[method]
        t, v = state.test_outputs("independent"), state.val_outputs("independent")
        return np.mean([t[I] for I in pairs], axis=0), np.mean([v[I] for I in pairs], axis=0)
    if method == "coop":
        cc = state.cfg.coop
        sel = bl.coop_select_rho(state.fit_data, cc.rho_grid,
                                 _relative_ridges(state.fit_data, cc.ridge_grid),
                                 cc.max_iter, cc.tol)
        (Xv, Zv), _ = state.fit_data.part("val")
        return sel.state.predict(*state.test_mods[:2]), sel.state.predict(Xv, Zv)
    if method == "meta-fusion":
        com = state.search.committee
        return com.predict(state.test_outputs("mutual")), com.predict(state.val_outputs("mutual"))
    if method in ("best-single", "best-single-independent"):
        which = "independent" if method.endswith("independent") else "mutual"
        v = state.val_outputs(which)
        agg = en.fit_aggregator("best-single", v, y_val)
        return agg.predict(state.test_outputs(which)), agg.predict(v)
    name = {"stacking": "stacking", "simple-avg": "simple-average",
            "weighted-avg": "weighted-average"}[method]
    v = state.val_outputs("mutual")
    agg = en.fit_aggregator(name, v, y_val)
    return agg.predict(state.test_outputs("mutual")), agg.predict(v)


def _run_rep(cfg: ExperimentConfig, rep: int, setting: str) -> List[ResultRow]:
    state = _Rep(cfg, rep)
    rows = []
    for method in cfg.methods:
        t0 = time.perf_counter()
        try:
            test, val = _method_outputs(state, method)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(f"{method} failed at seed {state.seed}: {exc}") from exc
        dt = time.perf_counter() - t0
        rows.append(ResultRow(setting, method, rep, state.seed, "mse", _mse(test, state.y_test), dt))
        rows.append(ResultRow(setting, method, rep, state.seed, "val_mse",
                              _mse(val, state.fused.y_val), dt))
    return rows


def _setting_label(cfg: ExperimentConfig) -> str:
    return "custom" if cfg.synth is not None else cfg.setting


def _map_reps(fn, cfg, extra=()):
    reps = range(cfg.repetitions)
    label = _setting_label(cfg)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            parts = list(pool.map(fn, [cfg] * len(reps), reps, [label] * len(reps)))
    else:
        parts = [fn(cfg, r, label) for r in reps]
    return _sorted([row for part in parts for row in part])


def run_experiment(config: ExperimentConfig) -> Tuple[List[ResultRow], List[dict]]:
    """Every method on a fresh dataset per repetition (seed = base seed + r)."""
    cfg = config.validate()
    rows = _map_reps(_run_rep, cfg)
    return rows, summarize(rows)


# ---------------------------------------------------------------- ablations

def _weights_rep(cfg: ExperimentConfig, rep: int, setting: str) -> List[ResultRow]:
    """Per-student test MSE change against independent training, averaged over students."""
    state = _Rep(cfg, rep)
    indep = state.test_outputs("independent")
    base = np.array([_mse(indep[I], state.y_test) for I in state.cohort.pairings])
    rows = [ResultRow(setting, "weights:independent", rep, state.seed, "delta_mse", 0.0)]
    for mode in cfg.ablation.weight_modes:
        t0 = time.perf_counter()
        w = mu.divergence_weights(state.report, mode)
        trained, _ = mu.train(state.cohort, state.fused, w, state.tc, rho=cfg.ablation.rho)
        outs = trained.predict_all(state.test_mods)
        mse = np.array([_mse(outs[I], state.y_test) for I in state.cohort.pairings])
        dt = time.perf_counter() - t0
        # positive = improvement over independent training
        rows.append(ResultRow(setting, f"weights:{mode}", rep, state.seed, "delta_mse",
                              float(np.mean(base - mse)), dt))
    return rows


def run_ablation(config: ExperimentConfig) -> Tuple[List[ResultRow], List[dict]]:
    """``ensembles``: every aggregator on one trained cohort; ``weights``: weight modes."""
    cfg = config
    if cfg.ablation.mode == "ensembles":
        cfg = replace(cfg, methods=ENSEMBLE_METHODS)
        return run_experiment(cfg)
    cfg.validate()
    rows = _map_reps(_weights_rep, cfg)
    return rows, summarize(rows)
