"""Evaluation protocols and metrics.

* ``run_model1``: leave-one-subject-out SVM baseline.
* ``run_personalized``: per subject, seed an ABOD model with ADL windows
  drawn from every other subject, personalise it with the subject's own ADL
  training folds and test on the held-out fold plus all of the subject's
  falls.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import abod
from .dataset import Dataset, validate
from .signal import trace_features
from .svm import TrainConfig, grid_search, predict, train_smo

log = logging.getLogger(__name__)


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0  # falls detected as falls
    fn: int = 0  # falls detected as ADL
    tn: int = 0  # ADL detected as ADL
    fp: int = 0  # ADL detected as falls

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ExperimentError("confusion counts must be >= 0")

    @classmethod
    def from_predictions(cls, is_fall: Sequence[bool], pred_fall: Sequence[bool]) -> "ConfusionCounts":
        t = np.asarray(is_fall, dtype=bool)
        p = np.asarray(pred_fall, dtype=bool)
        return cls(int(np.sum(t & p)), int(np.sum(t & ~p)), int(np.sum(~t & ~p)), int(np.sum(~t & p)))


@dataclass(frozen=True)
class MetricTriple:
    sensitivity: float
    specificity: float
    gm: float


def metrics(c: ConfusionCounts) -> MetricTriple:
    if c.tp + c.fn == 0:
        raise ExperimentError("no fall instances: sensitivity undefined")
    if c.tn + c.fp == 0:
        raise ExperimentError("no ADL instances: specificity undefined")
    se = c.tp / (c.tp + c.fn)
    sp = c.tn / (c.tn + c.fp)
    return MetricTriple(se, sp, math.sqrt(sp * se))


def gm_from_rates(specificity: float, sensitivity: float) -> MetricTriple:
    """Triple from already-computed rates (e.g. values read off a results table)."""
    for name, v in (("specificity", specificity), ("sensitivity", sensitivity)):
        if not 0.0 <= v <= 1.0:
            raise ExperimentError(f"{name} must lie in [0, 1]")
    return MetricTriple(sensitivity, specificity, math.sqrt(specificity * sensitivity))


def aggregate(rows: Sequence[MetricTriple]) -> MetricTriple:
    """Column-wise arithmetic mean; GM is the mean of the row GMs."""
    if not rows:
        raise ExperimentError("nothing to aggregate")
    n = len(rows)
    return MetricTriple(sum(r.sensitivity for r in rows) / n,
                        sum(r.specificity for r in rows) / n,
                        sum(r.gm for r in rows) / n)


@dataclass(frozen=True)
class PersonalizedConfig:
    folds: int = 10
    seeds_per_other_subject: int = 50
    repetitions: int = 10
    seed: int = 0
    quantile: float = 0.01
    safety: float = 0.5
    cap: int = 2000
    recal_interval: int = 10
    knn_k: Optional[int] = None
    mode: str = "batch"
    workers: int = 1
    audit: bool = False

    def __post_init__(self):
        if self.folds < 2:
            raise ExperimentError("folds must be >= 2")
        if self.repetitions < 1:
            raise ExperimentError("repetitions must be >= 1")
        if self.seeds_per_other_subject < 1:
            raise ExperimentError("seeds_per_other_subject must be >= 1")
        if self.mode not in ("batch", "replay-loop"):
            raise ExperimentError(f"unknown personalisation mode {self.mode!r}")

    def model_params(self) -> dict:
        return {"quantile": self.quantile, "safety": self.safety, "cap": self.cap,
                "recal_interval": self.recal_interval, "knn_k": self.knn_k}


@dataclass
class SubjectRow:
    subject: str
    specificity: float
    sensitivity: float
    gm: float
    specificity_std: float = 0.0
    sensitivity_std: float = 0.0
    gm_std: float = 0.0
    n_adl: int = 0
    n_fall: int = 0

    @property
    def triple(self) -> MetricTriple:
        return MetricTriple(self.sensitivity, self.specificity, self.gm)


@dataclass
class EvalReport:
    protocol: str
    rows: list
    aggregate: MetricTriple
    config: dict
    seed: int
    extra: dict = field(default_factory=dict)
    audit: Optional[list] = None

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "config": self.config,
            "subjects": [asdict(r) for r in self.rows],
            "aggregate": asdict(self.aggregate),
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        show_std = self.protocol == "personalized"
        head = f"{'Person':<8}{'SP(%)':>16}{'SE(%)':>16}{'Geometric mean (%)':>22}"
        out = [head, "-" * len(head)]

        def cell(v, s):
            return f"{100 * v:.2f} ± {100 * s:.2f}" if show_std else f"{100 * v:.2f}"

        for r in self.rows:
            out.append(f"{r.subject:<8}{cell(r.specificity, r.specificity_std):>16}"
                       f"{cell(r.sensitivity, r.sensitivity_std):>16}{cell(r.gm, r.gm_std):>22}")
        a = self.aggregate
        out.append(f"{'Mean':<8}{100 * a.specificity:>16.2f}{100 * a.sensitivity:>16.2f}{100 * a.gm:>22.2f}")
        return "\n".join(out) + "\n"


@dataclass(frozen=True)
class FeatureTable:
    X: np.ndarray
    subject: np.ndarray
    is_fall: np.ndarray
    ids: tuple

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "FeatureTable":
        X = np.array([trace_features(r.trace) for r in ds.records])
        return cls(X, np.array([r.subject for r in ds.records]),
                   np.array([r.is_fall for r in ds.records], dtype=bool),
                   tuple(r.record_id or str(i) for i, r in enumerate(ds.records)))


def _dataset_echo(ds: Dataset) -> dict:
    return {"provenance": ds.provenance, "records": len(ds), "subjects": ds.subjects}


# -- Model 1 ----------------------------------------------------------------

def run_model1(ds: Dataset, cfg: TrainConfig = TrainConfig(), grid: bool = False,
               features: Optional[FeatureTable] = None) -> EvalReport:
    subjects = ds.subjects
    if len(subjects) < 2:
        raise ExperimentError("leave-one-subject-out needs at least 2 subjects")
    ft = features or FeatureTable.from_dataset(ds)
    y = np.where(ft.is_fall, -1.0, 1.0)
    rows, audit, chosen = [], [], {}
    for p in subjects:
        test = ft.subject == p
        train = ~test
        if not (ft.is_fall[train].any() and (~ft.is_fall[train]).any()):
            raise ExperimentError(f"training split without subject {p} lacks a class")
        run_cfg = cfg
        if grid:
            run_cfg = grid_search(ft.X[train], y[train], ft.subject[train], cfg)
            chosen[p] = {"C": run_cfg.C, "gamma": run_cfg.gamma}
        model = train_smo(ft.X[train], y[train], run_cfg)
        pred_fall = predict(model, ft.X[test]) < 0
        c = ConfusionCounts.from_predictions(ft.is_fall[test], pred_fall)
        m = metrics(c)
        rows.append(SubjectRow(p, m.specificity, m.sensitivity, m.gm,
                               n_adl=c.tn + c.fp, n_fall=c.tp + c.fn))
        audit.append({"subject": p, "train": np.flatnonzero(train).tolist(),
                      "test": np.flatnonzero(test).tolist()})
    config = {"train": asdict(cfg), "grid_search": grid, "dataset": _dataset_echo(ds),
              "resolved_gamma": cfg.resolved_gamma(ft.X.shape[1])}
    extra = {"grid_choice": chosen} if grid else {}
    return EvalReport("model1", rows, aggregate([r.triple for r in rows]), config, cfg.seed,
                      extra, audit)


# -- personalised protocol --------------------------------------------------

_SHARED: dict = {}


def _init_worker(ft: FeatureTable, cfg: PersonalizedConfig, subjects: list):
    _SHARED.update(ft=ft, cfg=cfg, subjects=subjects)


def _draw_seed_set(ft: FeatureTable, p: str, subjects: list, k: int,
                   rng: np.random.Generator) -> np.ndarray:
    picks = []
    for o in subjects:
        if o == p:
            continue
        pool = np.flatnonzero((ft.subject == o) & ~ft.is_fall)
        if len(pool) == 0:
            continue
        if len(pool) < k:
            log.warning("subject %s has %d ADL records (< %d); sampling with replacement", o, len(pool), k)
            picks.append(rng.choice(pool, size=k, replace=True))
        else:
            picks.append(rng.choice(pool, size=k, replace=False))
    return np.concatenate(picks)


def _personalize_loop(model: abod.AbodModel, vectors: np.ndarray) -> tuple[abod.AbodModel, int]:
    alarms = 0
    for v in vectors:
        label, _ = abod.classify(v, model)
        if label == abod.FALL:
            alarms += 1  # user presses "false alarm"; the window is learned either way
        model = abod.retrain(model, v, "user")
    return model, alarms


def _run_subject(si: int) -> dict:
    ft: FeatureTable = _SHARED["ft"]
    cfg: PersonalizedConfig = _SHARED["cfg"]
    subjects: list = _SHARED["subjects"]
    p = subjects[si]
    own_adl = np.flatnonzero((ft.subject == p) & ~ft.is_fall)
    own_fall = np.flatnonzero((ft.subject == p) & ft.is_fall)
    per_rep, audit, alarms, seed_sizes, seed_only = [], [], [], set(), []
    for rep in range(cfg.repetitions):
        rng = np.random.default_rng([cfg.seed, si, rep])
        folds = np.array_split(rng.permutation(own_adl), cfg.folds)
        fold_metrics = []
        for k in range(cfg.folds):
            frng = np.random.default_rng([cfg.seed, si, rep, k])
            seeds = _draw_seed_set(ft, p, subjects, cfg.seeds_per_other_subject, frng)
            seed_sizes.add(len(seeds))
            train = np.concatenate([f for i, f in enumerate(folds) if i != k])
            test = np.concatenate([folds[k], own_fall])
            if np.intersect1d(test, np.concatenate([seeds, train])).size:
                raise ExperimentError(f"test record leaked into training for subject {p}")
            model = abod.AbodModel.fit(ft.X[seeds], "external", **cfg.model_params())
            seed_pred = np.array([lab == abod.FALL for lab in abod.classify_many(ft.X[test], model)])
            seed_only.append(metrics(ConfusionCounts.from_predictions(ft.is_fall[test], seed_pred)))
            if cfg.mode == "batch":
                model = abod.extend(model, ft.X[train], "user")
            else:
                model, n_alarm = _personalize_loop(model, ft.X[train])
                alarms.append(n_alarm)
            labels = abod.classify_many(ft.X[test], model)
            pred_fall = np.array([lab == abod.FALL for lab in labels])
            c = ConfusionCounts.from_predictions(ft.is_fall[test], pred_fall)
            fold_metrics.append(metrics(c))
            if cfg.audit:
                audit.append({"subject": p, "rep": rep, "fold": k, "seed": seeds.tolist(),
                              "personal": train.tolist(), "test": test.tolist()})
        per_rep.append(aggregate(fold_metrics))
    arr = np.array([[m.specificity, m.sensitivity, m.gm] for m in per_rep])
    mean, std = arr.mean(axis=0), arr.std(axis=0)
    row = SubjectRow(p, float(mean[0]), float(mean[1]), float(mean[2]),
                     float(std[0]), float(std[1]), float(std[2]),
                     n_adl=int(len(own_adl)), n_fall=int(len(own_fall)))
    return {"row": row, "audit": audit, "alarms": alarms, "seed_sizes": sorted(seed_sizes),
            "seed_only": aggregate(seed_only)}


def run_personalized(ds: Dataset, cfg: PersonalizedConfig = PersonalizedConfig(),
                     features: Optional[FeatureTable] = None) -> EvalReport:
    subjects = ds.subjects
    if len(subjects) < 2:
        raise ExperimentError("personalised protocol needs at least 2 subjects")
    report = validate(ds, folds=cfg.folds)
    if not report.passed:
        raise ExperimentError("dataset not usable: " + "; ".join(report.problems))
    ft = features or FeatureTable.from_dataset(ds)
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker,
                                 initargs=(ft, cfg, subjects)) as ex:
            results = list(ex.map(_run_subject, range(len(subjects))))
    else:
        _init_worker(ft, cfg, subjects)
        try:
            results = [_run_subject(i) for i in range(len(subjects))]
        finally:
            _SHARED.clear()
    rows = [r["row"] for r in results]
    seed_sizes = sorted({s for r in results for s in r["seed_sizes"]})
    echo = {k: v for k, v in asdict(cfg).items() if k != "workers"}
    config = {"personalized": echo, "dataset": _dataset_echo(ds),
              "seed_set_size": seed_sizes[0] if len(seed_sizes) == 1 else seed_sizes}
    # same cells scored before personalisation, for comparison only
    seed_rows = [r["seed_only"] for r in results]
    extra = {"seed_only": {"subjects": {r["row"].subject: asdict(r["seed_only"]) for r in results},
                           "aggregate": asdict(aggregate(seed_rows))}}
    if cfg.mode == "replay-loop":
        extra["false_alarms_during_personalization"] = {
            r["row"].subject: float(np.mean(r["alarms"])) for r in results}
    audit = [a for r in results for a in r["audit"]] if cfg.audit else None
    return EvalReport("personalized", rows, aggregate([r.triple for r in rows]), config,
                      cfg.seed, extra, audit)
