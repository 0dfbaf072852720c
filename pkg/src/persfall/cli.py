"""Command-line entry point: ``persfall <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import abod, container, dataset, detector, experiments, svm
from .signal import TiltConfig, trace_features

log = logging.getLogger("persfall")


@contextmanager
def atomic_outputs(*paths):
    """Yield temp paths; move them over ``paths`` only if the block succeeds."""
    temps = []
    try:
        for p in paths:
            if p is None:
                temps.append(None)
                continue
            d = os.path.dirname(os.path.abspath(p))
            fd, tmp = tempfile.mkstemp(prefix=".partial-", dir=d)
            os.close(fd)
            temps.append(tmp)
        yield temps
        for tmp, p in zip(temps, paths):
            if tmp is not None:
                os.replace(tmp, p)
        temps = []
    finally:
        for tmp in temps:
            if tmp is not None and os.path.exists(tmp):
                os.remove(tmp)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_text(path, text: str) -> None:
    with atomic_outputs(path) as (tmp,):
        Path(tmp).write_text(text, encoding="utf-8")


def _emit(text: str, out) -> None:
    if out:
        _write_text(out, text)
    else:
        sys.stdout.write(text)


# -- subcommands ------------------------------------------------------------

def cmd_synth(a) -> None:
    spec = dataset.SynthSpec(subjects=a.subjects, adl_per_subject=a.adl, falls_per_subject=a.falls,
                             seed=a.seed)
    _write_text(a.out, dataset.dumps_canonical(dataset.generate_synthetic(spec)))


def cmd_import_tfall(a) -> None:
    ds = dataset.import_tfall(a.directory, rate_hz=a.rate)
    _write_text(a.out, dataset.dumps_canonical(ds))


def cmd_validate(a) -> int:
    rep = dataset.validate(dataset.load_canonical(a.data), folds=a.folds)
    body = rep.to_dict()
    body["config"] = {"data": a.data, "folds": a.folds}
    if a.out:
        _write_text(a.out, json.dumps(body, sort_keys=True, indent=2) + "\n")
    print(rep.to_text())
    return 1 if (a.strict and not rep.passed) else 0


def _select(ds: dataset.Dataset, subjects, exclude) -> list:
    recs = list(ds.records)
    if subjects:
        recs = [r for r in recs if r.subject in set(subjects)]
    if exclude:
        recs = [r for r in recs if r.subject not in set(exclude)]
    return recs


def cmd_train_abod(a) -> None:
    ds = dataset.load_canonical(a.data)
    recs = [r for r in _select(ds, a.subject, a.exclude_subject) if not r.is_fall]
    if len(recs) > a.cap:
        idx = np.sort(np.random.default_rng(a.seed).choice(len(recs), a.cap, replace=False))
        recs = [recs[i] for i in idx]
    X = np.array([trace_features(r.trace) for r in recs]).reshape(-1, 303)
    meta = {"data": a.data, "provenance": ds.provenance, "subjects": a.subject,
            "exclude_subjects": a.exclude_subject, "records": [r.record_id for r in recs],
            "seed": a.seed}
    model = abod.AbodModel.fit(X, "external", quantile=a.quantile, safety=a.safety, cap=a.cap,
                               recal_interval=a.recal_interval, knn_k=a.knn_k, meta=meta)
    with atomic_outputs(a.out) as (tmp,):
        container.save_model(model, tmp)


def _train_config(a) -> svm.TrainConfig:
    return svm.TrainConfig(C=a.C, gamma=a.gamma, kkt_tol=a.kkt_tol, max_passes=a.max_passes,
                           seed=a.seed)


def cmd_train_svm(a) -> None:
    ds = dataset.load_canonical(a.data)
    recs = _select(ds, a.subject, a.exclude_subject)
    X = np.array([trace_features(r.trace) for r in recs]).reshape(-1, 303)
    y = np.array([svm.FALL_LABEL if r.is_fall else svm.ADL_LABEL for r in recs], dtype=float)
    cfg = _train_config(a)
    if a.grid_search:
        cfg = svm.grid_search(X, y, [r.subject for r in recs], cfg)
    model = svm.train_smo(X, y, cfg)
    model.meta.update({"data": a.data, "provenance": ds.provenance, "config": asdict(cfg),
                       "grid_search": a.grid_search})
    with atomic_outputs(a.out) as (tmp,):
        container.save_model(model, tmp)


def cmd_score(a) -> None:
    model = container.load_model(a.model)
    ds = dataset.load_canonical(a.data)
    recs = list(ds.records) if a.index is None else [ds.records[a.index]]
    kind = "abod" if isinstance(model, abod.AbodModel) else "svm"
    lines = [_dump_json({"type": "config", "model": a.model, "model_kind": kind, "data": a.data,
                         "index": a.index, "seed": a.seed})]
    for r in recs:
        v = trace_features(r.trace)
        out = {"type": "score", "record_id": r.record_id, "subject": r.subject, "label": r.label}
        if kind == "abod":
            label, s = abod.classify(v, model)
            out.update(predicted=label, score=s.value, pairs_used=s.pairs_used,
                       threshold=model.threshold)
        else:
            f = svm.decision(model, v)
            out.update(predicted="ADL" if f >= 0 else "Fall", decision=f)
        lines.append(_dump_json(out))
    _emit("\n".join(lines) + "\n", a.out)


def _write_report(rep: experiments.EvalReport, a) -> None:
    with atomic_outputs(a.out, a.table) as (tmp, tmp_table):
        Path(tmp).write_text(rep.to_json(), encoding="utf-8")
        if tmp_table:
            Path(tmp_table).write_text(rep.to_table(), encoding="utf-8")
    sys.stdout.write(rep.to_table())


def cmd_eval_model1(a) -> None:
    ds = dataset.load_canonical(a.data)
    rep = experiments.run_model1(ds, _train_config(a), grid=a.grid_search)
    rep.config["data"] = a.data
    _write_report(rep, a)


def cmd_eval_personalized(a) -> None:
    ds = dataset.load_canonical(a.data)
    cfg = experiments.PersonalizedConfig(
        folds=a.folds, seeds_per_other_subject=a.seeds_per_subject, repetitions=a.reps,
        seed=a.seed, quantile=a.quantile, safety=a.safety, cap=a.cap,
        recal_interval=a.recal_interval, knn_k=a.knn_k, mode=a.mode, workers=a.workers)
    rep = experiments.run_personalized(ds, cfg)
    rep.config["data"] = a.data
    _write_report(rep, a)


def _read_script(path) -> list:
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        return list(json.loads(text))
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


def cmd_replay(a) -> None:
    model = container.load_model(a.model)
    if not isinstance(model, abod.AbodModel):
        raise ValueError("replay needs an ABOD model")
    ds = dataset.load_canonical(a.data)
    if a.policy == "scripted":
        if not a.script:
            raise ValueError("--script is required with --policy scripted")
        policy = detector.ScriptedPolicy(_read_script(a.script))
    else:
        policy = detector.ground_truth_policy
    cfg = detector.DetectorConfig(
        smv_threshold=a.smv_threshold, tilt_threshold=a.tilt_threshold,
        tilt=TiltConfig(settle_delay_s=a.settle_delay, avg_window_s=a.avg_window))
    res = detector.replay(list(ds.records), model, cfg, policy)
    res.config.update({"data": a.data, "model": a.model, "policy": a.policy,
                       "script": a.script, "seed": a.seed})
    with atomic_outputs(a.out, a.model_out) as (tmp, tmp_model):
        Path(tmp).write_text(res.to_ndjson(), encoding="utf-8")
        if tmp_model:
            container.save_model(res.model, tmp_model)


# -- parser -----------------------------------------------------------------

def _abod_flags(p):
    p.add_argument("--quantile", type=float, default=0.01)
    p.add_argument("--safety", type=float, default=0.5)
    p.add_argument("--cap", type=int, default=2000)
    p.add_argument("--recal-interval", type=int, default=10)
    p.add_argument("--knn-k", type=int, default=None)


def _svm_flags(p):
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=None, help="default 1/n_features")
    p.add_argument("--kkt-tol", type=float, default=1e-3)
    p.add_argument("--max-passes", type=int, default=100)
    p.add_argument("--grid-search", action="store_true")


def _subject_flags(p):
    p.add_argument("--subject", action="append", help="restrict to subject (repeatable)")
    p.add_argument("--exclude-subject", action="append", help="drop subject (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="persfall", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--subjects", type=int, default=9)
    p.add_argument("--adl", type=int, default=200)
    p.add_argument("--falls", type=int, default=24)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import-tfall", parents=[common], help="convert a tFall directory")
    p.add_argument("directory")
    p.add_argument("--rate", type=float, default=50.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_tfall)

    p = sub.add_parser("validate", parents=[common], help="check a canonical dataset")
    p.add_argument("data")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", help="exit 1 when validation fails")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train-abod", parents=[common], help="fit an ABOD model on ADL records")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    _abod_flags(p)
    _subject_flags(p)
    p.set_defaults(func=cmd_train_abod)

    p = sub.add_parser("train-svm", parents=[common], help="fit the SVM baseline")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    _svm_flags(p)
    _subject_flags(p)
    p.set_defaults(func=cmd_train_svm)

    p = sub.add_parser("score", parents=[common], help="classify records with a model")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--index", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval-model1", parents=[common], help="leave-one-subject-out SVM")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--table")
    _svm_flags(p)
    p.set_defaults(func=cmd_eval_model1)

    p = sub.add_parser("eval-personalized", parents=[common], help="personalised ABOD protocol")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--table")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seeds-per-subject", type=int, default=50)
    p.add_argument("--mode", choices=("batch", "replay-loop"), default="batch")
    p.add_argument("--workers", type=int, default=1)
    _abod_flags(p)
    p.set_defaults(func=cmd_eval_personalized)

    p = sub.add_parser("replay", parents=[common], help="stream records through the detector")
    p.add_argument("data")
    p.add_argument("model")
    p.add_argument("--out", required=True, help="event log (NDJSON)")
    p.add_argument("--model-out", help="write the personalised model here")
    p.add_argument("--policy", choices=("ground-truth", "scripted"), default="ground-truth")
    p.add_argument("--script", help="verdicts, one per line or a JSON list")
    p.add_argument("--smv-threshold", type=float, default=14.7)
    p.add_argument("--tilt-threshold", type=float, default=55.0)
    p.add_argument("--settle-delay", type=float, default=2.0)
    p.add_argument("--avg-window", type=float, default=1.0)
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError, IndexError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"persfall {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
