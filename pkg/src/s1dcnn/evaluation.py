"""Utterance scoring, false-alarm counting and DET curves."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .frontend import AudioBuffer, extract_mfcc
from .network import Model
from .streaming import DEFAULT_SUPPRESSION_MS, Stream, batch_scores, trigger_frames
from .training import Utterance

THRESHOLD_GRID = np.linspace(0.0, 1.0, 1001)


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    frr: float
    fa_per_hour: float


@dataclass
class EvalReport:
    det: list[DetPoint]
    frr_at_1fa: float
    pos_count: int
    neg_hours: float

    def summary(self) -> str:
        return f"frr_at_1fa={self.frr_at_1fa:.9g} pos={self.pos_count} neg_hours={self.neg_hours:.9g}"


def score_positive(model: Model, utt: Utterance | AudioBuffer) -> float:
    """Highest smoothed target score anywhere in the utterance (streaming path)."""
    audio = utt.audio if isinstance(utt, Utterance) else utt
    scores = Stream(model).run(extract_mfcc(audio))
    return float(scores.max()) if len(scores) else 0.0


def count_false_alarms(model: Model, audio: AudioBuffer, threshold: float,
                       suppression_ms: float = DEFAULT_SUPPRESSION_MS) -> int:
    frames = extract_mfcc(audio).T
    return sum(1 for _ in Stream(model).detect(frames, threshold, suppression_ms))


class AlarmCounter:
    """Counts trigger events on precomputed score traces for any threshold.

    Traces are joined with ``suppression`` frames of ``-inf`` between them so
    suppression never carries from one recording into the next.
    """

    def __init__(self, traces: Sequence[np.ndarray], suppression_frames: int):
        gap = np.full(max(suppression_frames, 1), -np.inf)
        parts = []
        for tr in traces:
            parts += [np.asarray(tr, dtype=np.float64), gap]
        self.scores = np.concatenate(parts) if parts else np.zeros(0)
        self.suppression_frames = suppression_frames

    def __call__(self, threshold: float) -> int:
        return len(trigger_frames(self.scores, threshold, self.suppression_frames))


def negative_traces(model: Model, clips: Sequence[AudioBuffer]) -> list[np.ndarray]:
    """Smoothed score traces for keyword-free clips.

    Uses the whole-sequence path, which reproduces the streaming scores to
    within float32 summation error and is much faster on long audio.
    """
    return [batch_scores(model, extract_mfcc(c)) for c in clips]


def det_curve(pos_scores: Sequence[float], alarms: Callable[[float], int] | Mapping[float, int],
              neg_hours: float, thresholds: Sequence[float] | None = None) -> list[DetPoint]:
    """FRR and false alarms per hour at each threshold, sorted by threshold.

    Default thresholds: the distinct positive scores plus 1001 points on [0, 1].
    ``frr(t)`` is the share of positives scoring below ``t``.
    """
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    if len(pos) == 0:
        raise DataError("need at least one positive score")
    if neg_hours <= 0:
        raise DataError("negative audio duration must be positive")
    if thresholds is None:
        thresholds = np.union1d(pos, THRESHOLD_GRID)
    count = alarms.__getitem__ if isinstance(alarms, Mapping) else alarms
    points = []
    for th in np.unique(np.asarray(thresholds, dtype=np.float64)):
        frr = np.searchsorted(pos, th, side="left") / len(pos)
        points.append(DetPoint(float(th), float(frr), count(th) / neg_hours))
    return points


def frr_at_fa(det: Sequence[DetPoint], target_fa_per_hour: float = 1.0) -> float:
    """FRR at ``target_fa_per_hour``, interpolated linearly in FA rate between
    the nearest points on either side.

    If every point is below the target, the lowest-threshold FRR is returned;
    if every point is above it, the highest-threshold FRR.
    """
    if not det:
        raise DataError("empty DET curve")
    exact = [p.frr for p in det if p.fa_per_hour == target_fa_per_hour]
    if exact:
        return min(exact)
    below = [p for p in det if p.fa_per_hour < target_fa_per_hour]
    above = [p for p in det if p.fa_per_hour > target_fa_per_hour]
    if not above:
        return min(det, key=lambda p: p.threshold).frr
    if not below:
        return max(det, key=lambda p: p.threshold).frr
    lo = min(below, key=lambda p: (-p.fa_per_hour, p.frr))
    hi = min(above, key=lambda p: (p.fa_per_hour, p.frr))
    w = (target_fa_per_hour - lo.fa_per_hour) / (hi.fa_per_hour - lo.fa_per_hour)
    return lo.frr + w * (hi.frr - lo.frr)


def evaluate(model: Model, positives: Sequence[Utterance | AudioBuffer], negatives: Sequence[AudioBuffer],
             suppression_ms: float = DEFAULT_SUPPRESSION_MS, target_fa_per_hour: float = 1.0) -> EvalReport:
    pos_scores = [score_positive(model, u) for u in positives]
    hours = sum(c.duration_s for c in negatives) / 3600
    counter = AlarmCounter(negative_traces(model, negatives),
                           int(round(suppression_ms / model.config.hop_ms)))
    det = det_curve(pos_scores, counter, hours)
    return EvalReport(det, frr_at_fa(det, target_fa_per_hour), len(pos_scores), hours)


def emit_det(report: EvalReport, path: str | Path) -> None:
    """CSV ``threshold,frr,fa_per_hour`` (9 significant digits) and a trailing
    ``# frr_at_1fa=...`` summary comment."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "frr", "fa_per_hour"])
        for p in report.det:
            w.writerow([f"{p.threshold:.9g}", f"{p.frr:.9g}", f"{p.fa_per_hour:.9g}"])
        fh.write(f"# {report.summary()}\n")


def read_det(path: str | Path) -> list[DetPoint]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows or rows[0] != ["threshold", "frr", "fa_per_hour"]:
        raise DataError(f"{path}: missing DET header")
    return [DetPoint(float(a), float(b), float(c)) for a, b, c in rows[1:]]
