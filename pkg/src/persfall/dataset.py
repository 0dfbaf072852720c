"""Labelled accelerometer records: canonical file format, tFall adapter,
synthetic generator and validation.

Canonical file (see docs/formats.md): UTF-8, one JSON object per line.
An optional first line carries ``{"format": "persfall-dataset", ...}``
with the provenance string; every other line is one record.
"""
from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .signal import (STANDARD_GRAVITY, UNITS, UNITS_G, UNITS_MS2, WINDOW_LEN,
                     AccelTrace, SignalError, convert_units, smv_series)

log = logging.getLogger(__name__)

FORMAT_NAME = "persfall-dataset"
FORMAT_VERSION = 1

ADL = "ADL"
FALL = "Fall"
LABELS = (ADL, FALL)

# activity vocabulary with the numeric codes used in the original trial list
ADL_ACTIVITIES = {
    "walking_fw": 1, "walking_bw": 2, "jogging": 3, "stairs_up": 4, "stairs_down": 5,
    "sit_chair": 6, "sit_sofa": 7, "sit_bed": 8, "lying_bed": 9, "pick_object": 10,
    "reach_object": 11, "cough": 12, "jumping": 13,
}
FALL_ACTIVITIES = {
    "front_lying": 41, "back_lying": 42, "rolling_out_bed": 43, "back_sitting": 44,
    "front_knees_lying": 45, "right_side": 46, "left_side": 47,
}
ACTIVITIES = {**ADL_ACTIVITIES, **FALL_ACTIVITIES}


class DatasetError(ValueError):
    pass


def _norm_label(label: str) -> str:
    key = str(label).strip().lower()
    if key in ("adl", "adls", "+1", "1"):
        return ADL
    if key in ("fall", "falls", "-1"):
        return FALL
    raise DatasetError(f"unknown label {label!r}")


@dataclass(frozen=True, eq=False)
class LabeledRecord:
    subject: str
    label: str
    trace: AccelTrace
    activity: Optional[str] = None
    record_id: str = ""

    def __post_init__(self):
        if not str(self.subject):
            raise DatasetError("subject must be non-empty")
        object.__setattr__(self, "subject", str(self.subject))
        object.__setattr__(self, "label", _norm_label(self.label))
        if self.activity is not None and self.activity not in ACTIVITIES:
            raise DatasetError(f"unknown activity code {self.activity!r}")
        if len(self.trace) < WINDOW_LEN:
            raise DatasetError(f"trace too short ({len(self.trace)} < {WINDOW_LEN} samples)")

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledRecord):
            return NotImplemented
        return (self.subject, self.label, self.activity, self.record_id) == (
            other.subject, other.label, other.activity, other.record_id) and self.trace == other.trace

    @property
    def is_fall(self) -> bool:
        return self.label == FALL


@dataclass(frozen=True, eq=False)
class Dataset:
    records: tuple
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.provenance == other.provenance and self.records == other.records

    @property
    def subjects(self) -> list[str]:
        seen = dict.fromkeys(r.subject for r in self.records)
        return list(seen)

    def by_subject(self, subject: str) -> list[LabeledRecord]:
        return [r for r in self.records if r.subject == subject]


# -- canonical format -------------------------------------------------------

def _record_to_json(rec: LabeledRecord) -> str:
    obj = {
        "id": rec.record_id,
        "subject": rec.subject,
        "label": rec.label,
        "activity": rec.activity,
        "hz": rec.trace.rate_hz,
        "units": rec.trace.units,
        "x": rec.trace.x.tolist(),
        "y": rec.trace.y.tolist(),
        "z": rec.trace.z.tolist(),
    }
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def dumps_canonical(ds: Dataset) -> str:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "provenance": ds.provenance}
    lines = [json.dumps(header, separators=(",", ":"))]
    lines.extend(_record_to_json(r) for r in ds.records)
    return "\n".join(lines) + "\n"


def save_canonical(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_canonical(ds), encoding="utf-8")


def _parse_record(obj: dict, lineno: int) -> LabeledRecord:
    try:
        x, y, z = obj["x"], obj["y"], obj["z"]
        subject = obj["subject"]
        label = obj["label"]
    except KeyError as e:
        raise DatasetError(f"line {lineno}: missing field {e.args[0]!r}") from None
    if not (len(x) == len(y) == len(z)):
        raise DatasetError(
            f"line {lineno}: axis lengths differ (x={len(x)}, y={len(y)}, z={len(z)})")
    units = obj.get("units", UNITS_MS2)
    if units not in UNITS:
        raise DatasetError(f"line {lineno}: unknown units {units!r}")
    try:
        trace = AccelTrace.from_axes(x, y, z, rate_hz=float(obj.get("hz", 50.0)), units=units)
        return LabeledRecord(subject, label, convert_units(trace), obj.get("activity"),
                             str(obj.get("id") or f"r{lineno}"))
    except (SignalError, DatasetError, TypeError, ValueError) as e:
        raise DatasetError(f"line {lineno}: {e}") from None


def loads_canonical(text: str) -> Dataset:
    provenance = ""
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"line {lineno}: malformed JSON ({e.msg})") from None
        if not isinstance(obj, dict):
            raise DatasetError(f"line {lineno}: expected a JSON object")
        if "format" in obj:
            if obj["format"] != FORMAT_NAME or obj.get("version") != FORMAT_VERSION:
                raise DatasetError(f"line {lineno}: unsupported header {obj}")
            provenance = obj.get("provenance", "")
            continue
        records.append(_parse_record(obj, lineno))
    return Dataset(tuple(records), provenance)


def load_canonical(path) -> Dataset:
    return loads_canonical(Path(path).read_text(encoding="utf-8"))


# -- tFall adapter ----------------------------------------------------------

_ADL_DIRS = {"adl", "adls"}
_FALL_DIRS = {"fall", "falls"}


def _read_columns(path: Path) -> np.ndarray:
    rows = []
    for i, line in enumerate(path.read_text().splitlines()):
        parts = line.replace(",", " ").replace(";", " ").split()
        if not parts:
            continue
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            if not rows:
                continue  # header line
            raise DatasetError(f"{path}:{i + 1}: non-numeric row") from None
        if len(vals) != 3:
            raise DatasetError(f"{path}:{i + 1}: expected 3 columns, got {len(vals)}")
        rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def infer_units(arrays: Iterable[np.ndarray]) -> str:
    """Classify raw data as m/s^2 or g from the median of per-record median SMV."""
    meds = [float(np.median(np.sqrt((a * a).sum(axis=1)))) for a in arrays if len(a)]
    if not meds:
        raise DatasetError("cannot infer units")
    level = float(np.median(meds))
    if 8.5 <= level <= 11.0:
        return UNITS_MS2
    if 0.85 <= level <= 1.15:
        return UNITS_G
    raise DatasetError(f"cannot infer units (median resting SMV {level:.3f})")


def import_tfall(root, rate_hz: float = 50.0) -> Dataset:
    """Read ``<root>/<subject>/{adl,fall}/<record>.{txt,csv}`` (see docs/tfall_adapter.md)."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    raw = []
    for sdir in sorted(p for p in root.iterdir() if p.is_dir()):
        found = 0
        for cdir in sorted(p for p in sdir.iterdir() if p.is_dir()):
            key = cdir.name.lower()
            if key in _ADL_DIRS:
                label = ADL
            elif key in _FALL_DIRS:
                label = FALL
            else:
                log.warning("ignoring unrecognised folder %s", cdir)
                continue
            for f in sorted(cdir.iterdir()):
                if f.is_file() and f.suffix.lower() in (".txt", ".csv", ".dat"):
                    raw.append((sdir.name, label, f, _read_columns(f)))
                    found += 1
        if not found:
            log.warning("subject folder %s holds no records; skipped", sdir)
    if not raw:
        raise DatasetError(f"no records found under {root}")
    units = infer_units(a for *_, a in raw)
    records = []
    for subject, label, f, arr in raw:
        trace = convert_units(AccelTrace(arr, rate_hz, units))
        rid = f"{subject}/{label.lower()}/{f.stem}"
        try:
            records.append(LabeledRecord(subject, label, trace, None, rid))
        except DatasetError as e:
            raise DatasetError(f"{f}: {e}") from None
    return Dataset(tuple(records), f"tfall import of {root.name} ({units}, {rate_hz} Hz)")


# -- synthetic generator ----------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    subjects: int = 9
    adl_per_subject: int = 200
    falls_per_subject: int = 24
    seed: int = 0
    fall_peak_range: tuple = (25.0, 40.0)
    adl_peak_ceiling: float = 13.0
    samples: int = 300
    rate_hz: float = 50.0
    gait_freq_range: tuple = (1.5, 2.1)
    gait_amp_range: tuple = (1.2, 2.2)
    orientation_jitter_deg: float = 25.0
    record_orientation_jitter_deg: float = 6.0
    freq_jitter: float = 0.05
    amp_jitter: float = 0.10
    noise_sd: float = 0.15

    def __post_init__(self):
        if min(self.subjects, self.adl_per_subject, self.falls_per_subject) < 1:
            raise DatasetError("synthetic counts must be >= 1")
        lo, hi = self.fall_peak_range
        if not (self.adl_peak_ceiling < lo <= hi):
            raise DatasetError("fall peak range must sit above the ADL ceiling")
        if self.samples < 3 * self.rate_hz + WINDOW_LEN // 2 + 1:
            raise DatasetError("records too short for post-impact tilt measurement")


# per-activity (frequency factor, amplitude factor, style)
_ADL_STYLE = {
    "walking_fw": (1.0, 1.0, "gait"), "walking_bw": (0.85, 0.8, "gait"),
    "jogging": (1.45, 1.6, "gait"), "stairs_up": (0.8, 1.1, "gait"),
    "stairs_down": (0.9, 1.25, "gait"), "sit_chair": (0.5, 1.3, "transition"),
    "sit_sofa": (0.45, 1.5, "transition"), "sit_bed": (0.5, 1.2, "transition"),
    "lying_bed": (0.4, 1.2, "transition"), "pick_object": (0.6, 1.4, "transition"),
    "reach_object": (0.5, 0.8, "transition"), "cough": (3.0, 0.6, "burst"),
    "jumping": (1.6, 1.9, "gait"),
}


def _rotation(roll: float, pitch: float) -> np.ndarray:
    cr, sr, cp, sp = math.cos(roll), math.sin(roll), math.cos(pitch), math.sin(pitch)
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return rz @ rx


@dataclass
class _Subject:
    rot: np.ndarray
    freq: float
    amp: float
    axis_w: np.ndarray
    phase: np.ndarray
    harmonic: float


def _make_subject(spec: SynthSpec, rng: np.random.Generator) -> _Subject:
    j = math.radians(spec.orientation_jitter_deg)
    return _Subject(
        rot=_rotation(rng.uniform(-j, j), rng.uniform(-j, j)),
        freq=rng.uniform(*spec.gait_freq_range),
        amp=rng.uniform(*spec.gait_amp_range),
        axis_w=rng.uniform(0.4, 1.0, size=3),
        phase=rng.uniform(0, 2 * math.pi, size=3),
        harmonic=rng.uniform(0.2, 0.6),
    )


def _record_rotation(spec: SynthSpec, subj: _Subject, rng: np.random.Generator) -> np.ndarray:
    # the phone shifts a little in the pocket between recordings
    j = math.radians(spec.record_orientation_jitter_deg)
    return subj.rot @ _rotation(rng.uniform(-j, j), rng.uniform(-j, j))


def _cap_peak(gravity: np.ndarray, motion: np.ndarray, ceiling: float) -> np.ndarray:
    # shrink the dynamic part until the peak SMV sits below the ceiling
    scale = 1.0
    for _ in range(60):
        sig = gravity + scale * motion
        if np.sqrt((sig * sig).sum(axis=1)).max() < ceiling:
            return sig
        scale *= 0.9
    return gravity + 0.0 * motion


def _adl_record(spec: SynthSpec, subj: _Subject, activity: str,
                rng: np.random.Generator) -> np.ndarray:
    n, fs = spec.samples, spec.rate_hz
    t = np.arange(n) / fs
    ff, af, style = _ADL_STYLE[activity]
    f = subj.freq * ff * (1 + rng.uniform(-spec.freq_jitter, spec.freq_jitter))
    a = subj.amp * af * (1 + rng.uniform(-spec.amp_jitter, spec.amp_jitter))
    ph = subj.phase + rng.uniform(0, 2 * math.pi)
    if style == "gait":
        base = (np.sin(2 * math.pi * f * t[:, None] + ph)
                + subj.harmonic * np.sin(4 * math.pi * f * t[:, None] + 2 * ph))
        motion = a * subj.axis_w * base
    elif style == "transition":
        centre = rng.uniform(1.0, t[-1] - 1.0)
        width = 0.35 / ff
        bump = np.exp(-0.5 * ((t - centre) / width) ** 2)
        osc = np.sin(2 * math.pi * f * (t - centre))
        motion = a * subj.axis_w * (bump * osc)[:, None] * np.array([1.0, -1.0, 0.7])
    else:  # burst
        centre = rng.uniform(1.0, t[-1] - 1.0)
        env = np.exp(-np.abs(t - centre) / 0.15)
        motion = a * subj.axis_w * (env * np.sin(2 * math.pi * 6.0 * (t - centre)))[:, None]
    rot = _record_rotation(spec, subj, rng)
    motion = motion @ rot.T
    motion += rng.normal(0.0, spec.noise_sd, size=(n, 3))
    gravity = rot @ np.array([0.0, STANDARD_GRAVITY, 0.0])
    return _cap_peak(gravity, motion, spec.adl_peak_ceiling - 0.2)


def _final_gravity(activity: str, rng: np.random.Generator) -> np.ndarray:
    """Resting gravity direction (device frame) after a fall; always tilted >= 55 deg."""
    g = STANDARD_GRAVITY
    if activity in ("right_side", "left_side", "rolling_out_bed"):
        sign = 1.0 if activity == "right_side" else (-1.0 if activity == "left_side"
                                                     else rng.choice([-1.0, 1.0]))
        beta = math.radians(rng.uniform(0, 30))
        delta = math.radians(rng.uniform(-10, 10))
        v = np.array([sign * math.cos(beta) * math.cos(delta), math.sin(delta),
                      rng.choice([-1.0, 1.0]) * math.sin(beta) * math.cos(delta)])
    else:
        # face up / face down: gravity on z, y nearly zero
        zsign = -1.0 if activity in ("front_lying", "front_knees_lying") else 1.0
        xs = g * rng.uniform(-0.12, 0.12)
        ys = g * rng.uniform(-0.025, 0.025)
        v = np.array([xs, ys, zsign * math.sqrt(max(g * g - xs * xs - ys * ys, 0.0))]) / g
    return g * v / np.linalg.norm(v)


def _fall_record(spec: SynthSpec, subj: _Subject, activity: str,
                 rng: np.random.Generator) -> np.ndarray:
    n, fs = spec.samples, spec.rate_hz
    peak = int(rng.integers(int(1.7 * fs), int(2.7 * fs) + 1))
    up = _record_rotation(spec, subj, rng) @ np.array([0.0, STANDARD_GRAVITY, 0.0])
    down = _final_gravity(activity, rng)
    sig = np.empty((n, 3))
    # quiet stance with slight sway before the fall
    pre = np.arange(peak)
    sway = 0.3 * np.sin(2 * math.pi * 0.7 * pre / fs + rng.uniform(0, 6.3))[:, None]
    sig[:peak] = up + sway * subj.axis_w
    # ~0.3 s of partial free fall before impact
    ff = int(0.3 * fs)
    k = np.linspace(0.0, 1.0, ff)[:, None]
    sig[peak - ff:peak] = up * (1.0 - 0.7 * k)
    # impact spike
    mag = rng.uniform(*spec.fall_peak_range)
    direction = rng.normal(size=3) + down / STANDARD_GRAVITY
    direction /= np.linalg.norm(direction)
    spike_len = 4
    for off in range(-spike_len, spike_len + 1):
        i = peak + off
        if 0 <= i < n:
            sig[i] = direction * mag * (1.0 - abs(off) / (spike_len + 1)) ** 2
    sig[peak] = direction * mag
    # settling rotation with decaying bounce, then stillness
    post = np.arange(peak + spike_len + 1, n)
    tt = (post - post[0]) / fs
    blend = np.clip(tt / 0.4, 0.0, 1.0)[:, None]
    bounce = (3.0 * np.exp(-tt / 0.15) * np.sin(2 * math.pi * 4.0 * tt))[:, None]
    sig[post] = (1 - blend) * up + blend * down + bounce * direction
    sig += rng.normal(0.0, spec.noise_sd / 3.0, size=(n, 3))
    # the impact must stay the unique SMV maximum
    sig[peak] = direction * mag
    return sig


def generate_synthetic(spec: SynthSpec = SynthSpec()) -> Dataset:
    records = []
    adl_codes = list(ADL_ACTIVITIES)
    fall_codes = list(FALL_ACTIVITIES)
    for s in range(spec.subjects):
        rng = np.random.default_rng([spec.seed, s])
        subj = _make_subject(spec, rng)
        sid = f"S{s + 1:02d}"
        for i in range(spec.adl_per_subject):
            act = adl_codes[int(rng.integers(len(adl_codes)))]
            sig = np.round(_adl_record(spec, subj, act, rng), 4)
            records.append(LabeledRecord(sid, ADL, AccelTrace(sig, spec.rate_hz), act,
                                         f"{sid}-adl-{i:04d}"))
        for i in range(spec.falls_per_subject):
            act = fall_codes[i % len(fall_codes)]
            sig = np.round(_fall_record(spec, subj, act, rng), 4)
            records.append(LabeledRecord(sid, FALL, AccelTrace(sig, spec.rate_hz), act,
                                         f"{sid}-fall-{i:04d}"))
    prov = "synthetic " + json.dumps(asdict(spec), sort_keys=True, separators=(",", ":"))
    return Dataset(tuple(records), prov)


# -- validation -------------------------------------------------------------

@dataclass
class ValidationReport:
    passed: bool
    problems: list = field(default_factory=list)
    subjects: dict = field(default_factory=dict)
    length_histogram: dict = field(default_factory=dict)
    unit_sanity: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [f"status: {'PASS' if self.passed else 'FAIL'}"]
        for sid, c in self.subjects.items():
            lines.append(f"  {sid}: ADL={c['ADL']} Fall={c['Fall']}")
        lines.append(f"  lengths: {self.length_histogram}")
        lines.append(f"  unit sanity: {self.unit_sanity}")
        lines.extend(f"  problem: {p}" for p in self.problems)
        return "\n".join(lines)


def validate(ds: Dataset, folds: Optional[int] = None, sanity_band=(8.0, 12.0)) -> ValidationReport:
    """Per-subject counts and sanity checks; ``folds`` enables the personalised-protocol rule."""
    rep = ValidationReport(passed=True)
    if len(ds) == 0:
        rep.passed = False
        rep.problems.append("no records")
        return rep
    counts: dict = {}
    for r in ds.records:
        c = counts.setdefault(r.subject, {ADL: 0, FALL: 0})
        c[r.label] += 1
    rep.subjects = counts
    rep.length_histogram = {str(k): v for k, v in sorted(Counter(len(r.trace) for r in ds).items())}
    resting = np.array([float(np.median(smv_series(r.trace))) for r in ds.records])
    outside = int(np.count_nonzero((resting < sanity_band[0]) | (resting > sanity_band[1])))
    rep.unit_sanity = {"median_resting_smv": round(float(np.median(resting)), 4),
                       "records_outside_band": outside, "band": list(sanity_band)}
    if outside:
        rep.problems.append(f"{outside} record(s) have median SMV outside {list(sanity_band)} m/s^2")
        rep.passed = False
    for sid, c in counts.items():
        if c[ADL] == 0:
            rep.problems.append(f"subject {sid} has no ADL records")
            rep.passed = False
        if folds is not None:
            if c[ADL] < folds:
                rep.problems.append(
                    f"subject {sid} has {c[ADL]} ADL records, fewer than the {folds} folds requested")
                rep.passed = False
            if c[FALL] == 0:
                rep.problems.append(f"subject {sid} has no fall records")
                rep.passed = False
    return rep
