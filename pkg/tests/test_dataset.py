import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persfall.dataset import (ADL, FALL, Dataset, DatasetError, LabeledRecord, SynthSpec,
                              dumps_canonical, generate_synthetic, import_tfall, infer_units,
                              load_canonical, loads_canonical, save_canonical, validate)
from persfall.signal import STANDARD_GRAVITY, AccelTrace, find_peak, smv_series, tilt_angle

HEADER = '{"format":"persfall-dataset","version":1,"provenance":"t"}'


def _line(n=300, subject="A", label="ADL", units="m/s^2", y=9.8, **kw):
    obj = {"subject": subject, "label": label, "hz": 50, "units": units,
           "x": [0.0] * n, "y": [y] * n, "z": [0.0] * n}
    obj.update(kw)
    return json.dumps(obj)


# -- canonical format
def test_single_record_file():
    ds = loads_canonical(HEADER + "\n" + _line() + "\n")
    assert len(ds) == 1 and ds.records[0].label == ADL and ds.provenance == "t"


def test_axis_length_mismatch_rejected():
    bad = _line(x=[0.0] * 299)
    with pytest.raises(DatasetError, match="axis lengths differ"):
        loads_canonical(bad)


def test_g_units_scaled():
    ds = loads_canonical(_line(units="g", y=1.0))
    rec = ds.records[0]
    assert rec.trace.units == "m/s^2"
    assert rec.trace.y[0] == pytest.approx(STANDARD_GRAVITY)


def test_short_trace_rejected_with_line_number():
    with pytest.raises(DatasetError, match="line 2: trace too short"):
        loads_canonical(HEADER + "\n" + _line(n=100))


def test_bad_label_and_json():
    with pytest.raises(DatasetError, match="unknown label"):
        loads_canonical(_line(label="maybe"))
    with pytest.raises(DatasetError, match="line 1: malformed JSON"):
        loads_canonical("{nope")


def test_round_trip_identity(small_ds, tmp_path):
    p = tmp_path / "d.ndjson"
    save_canonical(small_ds, p)
    back = load_canonical(p)
    assert back == small_ds
    assert dumps_canonical(back) == p.read_text()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["A", "B", "s 3"]), st.sampled_from([ADL, FALL]),
                          st.integers(101, 140), st.integers(0, 2 ** 31)), min_size=0, max_size=4),
       st.text(max_size=20))
def test_round_trip_property(specs, prov):
    recs = []
    for i, (subj, lab, n, seed) in enumerate(specs):
        xyz = np.random.default_rng(seed).normal(0, 20, size=(n, 3))
        recs.append(LabeledRecord(subj, lab, AccelTrace(xyz), None, f"r{i}"))
    ds = Dataset(tuple(recs), prov)
    assert loads_canonical(dumps_canonical(ds)) == ds


# -- tFall adapter
def _write_tfall(root, subjects=9, units_scale=1.0, header=False):
    rng = np.random.default_rng(0)
    for s in range(subjects):
        for folder, n in (("adl", 3), ("fall", 2)):
            d = root / f"sub{s + 1}" / folder
            d.mkdir(parents=True)
            for i in range(n):
                xyz = np.column_stack([rng.normal(0, 0.3, 300), 9.8 + rng.normal(0, 0.3, 300),
                                       rng.normal(0, 0.3, 300)]) * units_scale
                text = "x,y,z\n" if header else ""
                text += "\n".join(",".join(f"{v:.5f}" for v in row) for row in xyz)
                (d / f"rec{i}.csv").write_text(text + "\n")


def test_tfall_nine_subjects(tmp_path):
    _write_tfall(tmp_path)
    ds = import_tfall(tmp_path)
    assert len(ds.subjects) == 9
    fall = [r for r in ds if r.is_fall][0]
    assert len(fall.trace) == 300 and fall.trace.rate_hz == 50.0


def test_tfall_g_units_detected(tmp_path):
    _write_tfall(tmp_path, subjects=2, units_scale=0.99 / 9.8, header=True)
    ds = import_tfall(tmp_path)
    med = np.median(smv_series(ds.records[0].trace))
    assert 9.0 < med < 10.5


def test_infer_units_refuses_ambiguity():
    with pytest.raises(DatasetError, match="cannot infer units"):
        infer_units([np.full((10, 3), 3.0)])


def test_tfall_empty_subject_skipped(tmp_path, caplog):
    _write_tfall(tmp_path, subjects=2)
    (tmp_path / "ghost").mkdir()
    ds = import_tfall(tmp_path)
    assert ds.subjects == ["sub1", "sub2"]
    assert "ghost" in caplog.text


# -- synthetic generator
def test_synthetic_deterministic():
    spec = SynthSpec(subjects=2, adl_per_subject=5, falls_per_subject=3, seed=7)
    assert dumps_canonical(generate_synthetic(spec)) == dumps_canonical(generate_synthetic(spec))


def test_synthetic_seed_matters():
    a = SynthSpec(subjects=1, adl_per_subject=2, falls_per_subject=1, seed=1)
    b = SynthSpec(subjects=1, adl_per_subject=2, falls_per_subject=1, seed=2)
    assert generate_synthetic(a) != generate_synthetic(b)


def test_synthetic_class_guarantees(full_ds):
    # pipeline oracle: signal_core over every generated record
    assert len(full_ds.subjects) == 9 and len(full_ds) == 9 * 224
    for rec in full_ds:
        peak_smv = smv_series(rec.trace).max()
        if rec.is_fall:
            assert peak_smv >= 25.0
            assert tilt_angle(rec.trace, find_peak(rec.trace)) >= 55.0
        else:
            assert peak_smv < 14.7


def test_spec_validation():
    with pytest.raises(DatasetError):
        SynthSpec(subjects=0)
    with pytest.raises(DatasetError):
        SynthSpec(fall_peak_range=(10.0, 20.0))


# -- validate
def test_validate_passes(full_ds):
    rep = validate(full_ds, folds=10)
    assert rep.passed, rep.problems
    assert 8.0 <= rep.unit_sanity["median_resting_smv"] <= 12.0


def test_validate_fold_shortfall():
    ds = generate_synthetic(SynthSpec(subjects=2, adl_per_subject=9, falls_per_subject=2))
    rep = validate(ds, folds=10)
    assert not rep.passed
    assert any("9 ADL records, fewer than the 10 folds" in p for p in rep.problems)


def test_validate_empty():
    rep = validate(Dataset(()))
    assert not rep.passed and rep.problems == ["no records"]


def test_validate_unit_sanity():
    ds = loads_canonical(_line(y=1.0))  # g-valued data mislabelled as m/s^2
    rep = validate(ds)
    assert not rep.passed and "outside" in rep.problems[0]
