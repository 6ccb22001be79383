"""Checkup feature vectors and per-driver normalisation."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InsufficientData, TooFewCheckups
from .probe import ProbeTrain
from .telemetry import Trace, clean_trace

SACCADE_VELOCITY = 30.0  # deg/s
MERGE_GAP_S = 0.020
RESPONSE_MIN_S = 0.080
RESPONSE_MAX_S = 0.800
MISS_LATENCY_MS = 800.0
LANDING_RADIUS = 5.0  # deg, also the dwell radius
BLINK_LID = 0.5
PUPIL_BASE_WINDOW = 0.5
PUPIL_RESPONSE_WINDOW = 2.0
SD_FLOOR = 1e-6
MIN_BASELINE_CHECKUPS = 5

FEATURE_NAMES = (
    "first_saccade_latency",
    "hit_rate",
    "pupil_amp",
    "pupil_latency",
    "blink_rate",
    "blink_duration",
    "gaze_dispersion",
    "dwell_fraction",
    "latency_variability",
    "anticipation_slope",
)
N_FEATURES = len(FEATURE_NAMES)
CSV_COLUMNS = ("subject", "shift", "checkup", "label") + tuple(f"f{i + 1}" for i in range(N_FEATURES))


@dataclass(frozen=True)
class FeatureVector:
    first_saccade_latency: float  # ms
    hit_rate: float
    pupil_amp: float  # mm
    pupil_latency: float  # ms
    blink_rate: float  # per min
    blink_duration: float  # ms
    gaze_dispersion: float  # deg RMS
    dwell_fraction: float
    latency_variability: float  # ms IQR
    anticipation_slope: float  # ms/event

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, arr) -> "FeatureVector":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} values, got shape {arr.shape}")
        return cls(*(float(x) for x in arr))


@dataclass(frozen=True)
class BaselineStats:
    mean: np.ndarray
    sd: np.ndarray
    n_checkups: int

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist(), "n_checkups": self.n_checkups}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineStats":
        return cls(np.array(d["mean"], dtype=float), np.array(d["sd"], dtype=float), int(d["n_checkups"]))


class Saccade(NamedTuple):
    onset: float
    peak_velocity: float
    landing_x: float
    landing_y: float


def detect_saccades(trace: Trace) -> list[Saccade]:
    """Velocity-threshold saccade detection.

    A saccade is a run of at least two consecutive inter-sample speeds above
    30 deg/s. Onset is the sample where the first fast interval starts and
    landing is the gaze at the end of the last one. Runs separated by less
    than 20 ms are merged.
    """
    t = trace.t
    if len(t) < 3:
        return []
    ok = trace.usable
    dt = np.diff(t)
    with np.errstate(invalid="ignore"):
        speed = np.hypot(np.diff(trace.gaze_x), np.diff(trace.gaze_y)) / dt
    fast = (speed > SACCADE_VELOCITY) & ok[1:] & ok[:-1]
    edges = np.diff(np.concatenate([[0], fast.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    runs = [(a, b) for a, b in zip(starts, stops) if b - a >= 2]
    merged: list[list[int]] = []
    for a, b in runs:
        # interval j spans samples j..j+1
        if merged and t[a] - t[merged[-1][1]] < MERGE_GAP_S:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    out = []
    for a, b in merged:
        seg = speed[a:b]
        out.append(Saccade(float(t[a]), float(np.nanmax(seg)), float(trace.gaze_x[b]), float(trace.gaze_y[b])))
    return out


def _runs(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)


def _iqr(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    q75, q25 = np.percentile(x, [75, 25])
    return float(q75 - q25)


def _slope(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 3:
        return 0.0
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0:
        return 0.0
    return float(xc @ (y - y.mean()) / sxx)


def extract_features(trace: Trace, train: ProbeTrain, onset: float | None = None) -> FeatureVector:
    """Summarise one checkup's ocular response to its probe train.

    ``onset`` is the session time of the train start; it defaults to the
    first sample time of the trace.
    """
    if len(trace) == 0:
        raise InsufficientData("empty trace")
    trace = clean_trace(trace)
    if onset is None:
        onset = float(trace.t[0])
    t = trace.t
    usable = trace.usable
    if usable.mean() < 0.5:
        raise InsufficientData(f"only {usable.mean():.0%} usable samples")

    change_t = onset + train.times
    # a change counts only if its whole response window lies inside the trace
    covered = (change_t >= t[0]) & (change_t + RESPONSE_MAX_S <= t[-1])
    if covered.sum() < 5:
        raise InsufficientData(f"only {int(covered.sum())} LED changes inside the trace")
    change_t = change_t[covered]
    targets = train.led_positions()[covered]
    deviant = train.deviant_mask[covered]
    streak = train.standard_streaks()[covered]
    n_changes = len(change_t)

    # response matching: first saccade landing on the new LED within (80, 800] ms
    sacc = detect_saccades(trace)
    latency = np.full(n_changes, np.nan)
    if sacc:
        s_on = np.array([s.onset for s in sacc])
        s_land = np.array([[s.landing_x, s.landing_y] for s in sacc])
        owner = np.searchsorted(change_t, s_on, side="left") - 1  # nearest preceding change
        for j in np.flatnonzero(owner >= 0):
            i = owner[j]
            if not np.isnan(latency[i]):
                continue
            delay = s_on[j] - change_t[i]
            if RESPONSE_MIN_S < delay <= RESPONSE_MAX_S and np.hypot(*(s_land[j] - targets[i])) <= LANDING_RADIUS:
                latency[i] = delay * 1000.0
    answered = ~np.isnan(latency)
    f1 = float(np.where(answered, latency, MISS_LATENCY_MS).mean())
    f2 = float(answered.mean())
    f9 = _iqr(latency[answered])
    std_ans = answered & ~deviant
    f10 = _slope(streak[std_ans].astype(float), latency[std_ans])

    # deviant-evoked pupil response
    pupil = trace.pupil
    amps, lats = [], []
    for te in change_t[deviant]:
        b0, b1 = np.searchsorted(t, [te - PUPIL_BASE_WINDOW, te], side="left")
        w0, w1 = np.searchsorted(t, [te, te + PUPIL_RESPONSE_WINDOW], side="right")
        base = pupil[b0:b1][usable[b0:b1]]
        win_idx = np.flatnonzero(usable[w0:w1]) + w0
        if base.size == 0 or win_idx.size == 0:
            continue
        k = win_idx[np.argmax(pupil[win_idx])]
        amps.append(pupil[k] - base.mean())
        lats.append((t[k] - te) * 1000.0)
    f3 = float(np.mean(amps)) if amps else 0.0
    f4 = float(np.mean(lats)) if lats else 0.0

    # blinks from the eyelid channel
    duration_s = float(t[-1] - t[0]) + 1.0 / trace.rate
    b_start, b_stop = _runs(trace.eyelid < BLINK_LID)
    f5 = len(b_start) / (duration_s / 60.0)
    f6 = float(np.mean((b_stop - b_start) / trace.rate * 1000.0)) if len(b_start) else 0.0

    # gaze dispersion about each fixation; fixations are split at saccades and tracking gaps
    valid = trace.valid
    keep = valid.copy()
    gap_start, _ = _runs(~valid)
    s_on = np.array([s.onset for s in sacc])
    if s_on.size:
        k = np.searchsorted(s_on, t, side="right")
        since = t - s_on[np.maximum(k - 1, 0)]
        keep &= ~((k > 0) & (since <= 0.1))
    bounds = np.sort(np.concatenate([s_on, t[gap_start]]))
    segment = np.searchsorted(bounds, t, side="right")
    seg = segment[keep]
    gx, gy = trace.gaze_x[keep], trace.gaze_y[keep]
    cnt = np.bincount(seg)
    good = cnt[seg] >= 2
    if good.any():
        cnt_safe = np.maximum(cnt, 1)
        mx = np.bincount(seg, weights=gx) / cnt_safe
        my = np.bincount(seg, weights=gy) / cnt_safe
        dev2 = (gx - mx[seg]) ** 2 + (gy - my[seg]) ** 2
        f7 = float(np.sqrt(dev2[good].mean()))
    else:
        f7 = 0.0

    # dwell on the currently lit LED
    active = np.searchsorted(change_t, t, side="right") - 1
    lit = valid & (active >= 0)
    if lit.any():
        d = np.hypot(trace.gaze_x[lit] - targets[active[lit], 0], trace.gaze_y[lit] - targets[active[lit], 1])
        f8 = float((d <= LANDING_RADIUS).sum() / valid.sum())
    else:
        f8 = 0.0

    return FeatureVector(f1, f2, f3, f4, f5, f6, f7, f8, f9, f10)


def baseline_stats(vectors) -> BaselineStats:
    X = np.array([v.as_array() if isinstance(v, FeatureVector) else np.asarray(v, dtype=float) for v in vectors])
    if len(X) < MIN_BASELINE_CHECKUPS:
        raise TooFewCheckups(f"need at least {MIN_BASELINE_CHECKUPS} checkups, got {len(X)}")
    mean = X.mean(axis=0)
    sd = np.maximum(X.std(axis=0), SD_FLOOR)
    return BaselineStats(mean, sd, len(X))


def normalize(fv, stats: BaselineStats):
    """z-score a FeatureVector (returns FeatureVector) or a matrix of rows."""
    if isinstance(fv, FeatureVector):
        return FeatureVector.from_array((fv.as_array() - stats.mean) / stats.sd)
    return (np.asarray(fv, dtype=float) - stats.mean) / stats.sd


def denormalize(z, stats: BaselineStats):
    if isinstance(z, FeatureVector):
        return FeatureVector.from_array(z.as_array() * stats.sd + stats.mean)
    return np.asarray(z, dtype=float) * stats.sd + stats.mean


class FeatureRow(NamedTuple):
    subject: str
    shift: int
    checkup: int
    label: str
    features: FeatureVector


def write_feature_csv(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.subject, r.shift, r.checkup, r.label] + [repr(float(x)) for x in r.features.as_array()])


def read_feature_csv(path: Path) -> list[FeatureRow]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected feature CSV header {header}")
        return [
            FeatureRow(row[0], int(row[1]), int(row[2]), row[3], FeatureVector.from_array([float(x) for x in row[4:]]))
            for row in rd
        ]


FEATURE_FIELDS = tuple(f.name for f in fields(FeatureVector))
assert FEATURE_FIELDS == FEATURE_NAMES
