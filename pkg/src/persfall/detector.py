"""Streaming fall detector with the personalisation feedback loop.

Per sample:

    Monitoring      SMV > smv_threshold            -> ImpactPending (peak = sample)
    ImpactPending   larger SMV                     -> peak moves to the new sample
                    settle + averaging interval    -> tilt <= tilt_threshold: CandidateSuppressed
                    elapsed since the peak            else window -> ABOD:
                                                        ADL  -> retrain, AdlLearned
                                                        Fall -> FallAlert, AwaitingVerdict
    AwaitingVerdict samples are buffered only; apply_verdict() returns to Monitoring

Time is the sample index; ``t`` on events is index / rate_hz.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import abod
from .abod import AbodModel, AbodScore
from .dataset import LabeledRecord
from .signal import HALF_WIDTH, WINDOW_LEN, TiltConfig, Window, flatten, tilt_from_means

log = logging.getLogger(__name__)

MONITORING = "Monitoring"
IMPACT_PENDING = "ImpactPending"
AWAITING_VERDICT = "AwaitingVerdict"

NONE = "None"
SUPPRESSED = "CandidateSuppressed"
FALL_ALERT = "FallAlert"
ADL_LEARNED = "AdlLearned"

VERDICT_FALL = "fall"
VERDICT_FALSE_ALARM = "false_alarm"


class DetectorError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    smv_threshold: float = 14.7
    tilt_threshold: float = 55.0
    tilt: TiltConfig = TiltConfig()
    half_width: int = HALF_WIDTH
    rate_hz: float = 50.0
    buffer_capacity: int = 300

    def __post_init__(self):
        if not (self.smv_threshold > 0 and self.tilt_threshold > 0):
            raise DetectorError("thresholds must be > 0")
        if self.half_width != HALF_WIDTH:
            raise DetectorError(f"window half-width is fixed at {HALF_WIDTH}")
        _, stop = self.tilt.interval(0, self.rate_hz)
        if self.buffer_capacity < max(300, stop + self.half_width + 1):
            raise DetectorError("buffer too small for the window plus tilt interval")


@dataclass(frozen=True)
class DetectorEvent:
    kind: str
    index: int
    t: float
    score: Optional[AbodScore] = None
    peak_index: Optional[int] = None
    peak_smv: Optional[float] = None
    tilt: Optional[float] = None
    model_size: Optional[int] = None
    user_refs: Optional[int] = None
    detail: str = ""

    def __post_init__(self):
        if self.kind == FALL_ALERT and self.score is None:
            raise DetectorError("FallAlert requires a score")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "index": self.index, "t": self.t}
        for k in ("peak_index", "peak_smv", "tilt", "model_size", "user_refs"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        if self.score is not None:
            d["score"] = self.score.value
            d["pairs_used"] = self.score.pairs_used
        if self.detail:
            d["detail"] = self.detail
        return d


class FallDetector:
    """One detector per sample stream. Not thread-safe; use one instance per stream."""

    def __init__(self, model: AbodModel, cfg: DetectorConfig = DetectorConfig()):
        self.cfg = cfg
        self.model = model
        self.mode = MONITORING
        self.buffer: deque = deque(maxlen=cfg.buffer_capacity)
        self.count = 0  # samples seen so far; next sample gets this index
        self.peak: Optional[int] = None
        self.peak_smv = 0.0
        self.pending_vector: Optional[np.ndarray] = None
        self.classifier_calls = 0
        self.alerts: list = []

    # -- helpers
    def _event(self, kind: str, index: int, **kw) -> DetectorEvent:
        return DetectorEvent(kind, index, index / self.cfg.rate_hz, **kw)

    def _buffered(self, start: int, stop: int) -> Optional[np.ndarray]:
        first = self.count - len(self.buffer)
        if start < first or stop > self.count:
            return None
        rows = [self.buffer[i - first] for i in range(start, stop)]
        return np.array(rows, dtype=np.float64)

    def reset_stream(self) -> Optional[DetectorEvent]:
        """Drop buffered samples (record boundary). A pending candidate is suppressed."""
        ev = None
        if self.mode == IMPACT_PENDING:
            ev = self._event(SUPPRESSED, self.count - 1, peak_index=self.peak,
                             peak_smv=self.peak_smv, detail="insufficient post-peak data")
            self.mode = MONITORING
        self.buffer.clear()
        self.peak = None
        return ev

    # -- transitions
    def step(self, sample) -> DetectorEvent:
        if hasattr(sample, "x"):
            x, y, z = float(sample.x), float(sample.y), float(sample.z)
        else:
            x, y, z = map(float, sample)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise DetectorError("non-finite sample")
        idx = self.count
        self.buffer.append((x, y, z))
        self.count += 1
        mag = math.sqrt(x * x + y * y + z * z)

        if self.mode == AWAITING_VERDICT:
            return self._event(NONE, idx)
        if self.mode == MONITORING:
            if mag > self.cfg.smv_threshold:
                self.mode = IMPACT_PENDING
                self.peak, self.peak_smv = idx, mag
            return self._event(NONE, idx)
        # ImpactPending
        if mag > self.peak_smv:
            self.peak, self.peak_smv = idx, mag
        start, stop = self.cfg.tilt.interval(self.peak, self.cfg.rate_hz)
        if self.count < stop:
            return self._event(NONE, idx)
        return self._resolve(idx, start, stop)

    def _resolve(self, idx: int, start: int, stop: int) -> DetectorEvent:
        peak, peak_smv = self.peak, self.peak_smv
        self.mode = MONITORING
        self.peak = None
        seg = self._buffered(start, stop)
        if seg is None:
            return self._event(SUPPRESSED, idx, peak_index=peak, peak_smv=peak_smv,
                               detail="insufficient history for tilt interval")
        tilt = tilt_from_means(float(seg[:, 0].mean()), float(seg[:, 1].mean()), self.cfg.tilt)
        if tilt <= self.cfg.tilt_threshold:
            return self._event(SUPPRESSED, idx, peak_index=peak, peak_smv=peak_smv, tilt=tilt,
                               detail="tilt below threshold")
        rows = self._buffered(peak - HALF_WIDTH, peak + HALF_WIDTH + 1)
        if rows is None:
            return self._event(SUPPRESSED, idx, peak_index=peak, peak_smv=peak_smv, tilt=tilt,
                               detail="insufficient history for window")
        vec = flatten(Window(rows, peak_index=peak, start=peak - HALF_WIDTH))
        self.classifier_calls += 1
        label, score = abod.classify(vec, self.model)
        if label == abod.ADL:
            self.model = abod.retrain(self.model, vec, "user")
            return self._event(ADL_LEARNED, idx, score=score, peak_index=peak, peak_smv=peak_smv,
                               tilt=tilt, model_size=self.model.size,
                               user_refs=self.model.user_count)
        self.mode = AWAITING_VERDICT
        self.pending_vector = vec
        return self._event(FALL_ALERT, idx, score=score, peak_index=peak, peak_smv=peak_smv,
                           tilt=tilt, model_size=self.model.size, user_refs=self.model.user_count)

    def apply_verdict(self, verdict: str) -> None:
        if self.mode != AWAITING_VERDICT:
            raise DetectorError("no pending alert")
        if verdict == VERDICT_FALSE_ALARM:
            self.model = abod.retrain(self.model, self.pending_vector, "user")
        elif verdict == VERDICT_FALL:
            self.alerts.append(self.count - 1)
        else:
            raise DetectorError(f"unknown verdict {verdict!r}")
        self.pending_vector = None
        self.mode = MONITORING


# -- replay -----------------------------------------------------------------

def ground_truth_policy(record: LabeledRecord, event: DetectorEvent) -> str:
    return VERDICT_FALL if record.is_fall else VERDICT_FALSE_ALARM


class ScriptedPolicy:
    """Answers alerts from a fixed list, in order."""

    def __init__(self, verdicts: Sequence[str]):
        bad = [v for v in verdicts if v not in (VERDICT_FALL, VERDICT_FALSE_ALARM)]
        if bad:
            raise DetectorError(f"unknown verdict(s) in script: {bad}")
        self.verdicts = list(verdicts)
        self.used = 0

    def __call__(self, record: LabeledRecord, event: DetectorEvent) -> str:
        if self.used >= len(self.verdicts):
            raise DetectorError(
                f"verdict script exhausted: unanswered alert for record {record.record_id!r} "
                f"at sample {event.index}")
        v = self.verdicts[self.used]
        self.used += 1
        return v


@dataclass
class ReplayResult:
    events: list
    outcomes: list
    model: AbodModel
    classifier_calls: int
    config: dict = field(default_factory=dict)

    def log_lines(self) -> list[str]:
        head = {"type": "config", **self.config}
        lines = [json.dumps(head, sort_keys=True, separators=(",", ":"))]
        lines.extend(json.dumps(e, sort_keys=True, separators=(",", ":")) for e in self.events)
        lines.extend(json.dumps({"type": "outcome", **o}, sort_keys=True, separators=(",", ":"))
                     for o in self.outcomes)
        return lines

    def to_ndjson(self) -> str:
        return "\n".join(self.log_lines()) + "\n"


def replay(records: Sequence[LabeledRecord], model: AbodModel,
           cfg: DetectorConfig = DetectorConfig(),
           policy: Callable[[LabeledRecord, DetectorEvent], str] = ground_truth_policy,
           keep_none: bool = False) -> ReplayResult:
    """Stream every record through a detector; each record starts a fresh buffer."""
    if not records:
        raise DetectorError("nothing to replay")
    det = FallDetector(model, cfg)
    events, outcomes = [], []
    for ri, rec in enumerate(records):
        if rec.trace.rate_hz != cfg.rate_hz:
            raise DetectorError(f"record {rec.record_id!r} sampled at {rec.trace.rate_hz} Hz, "
                                f"detector expects {cfg.rate_hz} Hz")
        first = det.count
        calls_before = det.classifier_calls
        kinds = []
        for row in rec.trace.xyz:
            ev = det.step(row)
            if ev.kind == NONE and not keep_none:
                continue
            entry = {"type": "event", "record": ri, "record_id": rec.record_id,
                     "subject": rec.subject, "label": rec.label, **ev.to_dict(),
                     "offset": ev.index - first}
            kinds.append(ev.kind)
            if ev.kind == FALL_ALERT:
                verdict = policy(rec, ev)
                det.apply_verdict(verdict)
                entry["verdict"] = verdict
                entry["model_size_after"] = det.model.size
            events.append(entry)
        tail = det.reset_stream()
        if tail is not None:
            kinds.append(tail.kind)
            events.append({"type": "event", "record": ri, "record_id": rec.record_id,
                           "subject": rec.subject, "label": rec.label, **tail.to_dict(),
                           "offset": tail.index - first})
        outcomes.append({"record": ri, "record_id": rec.record_id, "subject": rec.subject,
                         "label": rec.label, "predicted": "Fall" if FALL_ALERT in kinds else "ADL",
                         "alerts": kinds.count(FALL_ALERT), "learned": kinds.count(ADL_LEARNED),
                         "suppressed": kinds.count(SUPPRESSED),
                         "classifier_calls": det.classifier_calls - calls_before,
                         "model_size": det.model.size})
    conf = {"smv_threshold": cfg.smv_threshold, "tilt_threshold": cfg.tilt_threshold,
            "settle_delay_s": cfg.tilt.settle_delay_s, "avg_window_s": cfg.tilt.avg_window_s,
            "tilt_epsilon": cfg.tilt.epsilon, "tilt_strategy": cfg.tilt.strategy,
            "rate_hz": cfg.rate_hz, "records": len(records)}
    return ReplayResult(events, outcomes, det.model, det.classifier_calls, conf)
