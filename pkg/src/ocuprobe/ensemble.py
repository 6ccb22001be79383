"""Per-driver calibration, equal-weight voting, subject aggregation and stream fusion."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateLabels, EmptyInput, KeyMismatch, TooFewCheckups
from .features import BaselineStats, FeatureVector, baseline_stats, normalize
from .learners import (
    GbtConfig,
    GbtModel,
    IsoForestModel,
    LofModel,
    OcsvmModel,
    default_gamma,
    model_from_dict,
    model_to_dict,
    train_gbt,
    train_iforest,
    train_lof,
    train_ocsvm,
)

IMPAIRED = "Impaired"
SOBER_VERDICT = "Sober"
FUSED = "Fused"
MODEL_NAMES = ("ocsvm", "iforest", "lof", "gbt")
MIN_CALIBRATION_CHECKUPS = 10
NORM_CLAMP = 1.5
TRUTH_SEVERITY = 0.2

CORRECT = "Correct"
WRONG = "Wrong"
OMITTED = "Omitted"


def truth_from_severity(severity: float) -> bool:
    """Ground-truth impairment of a checkup from its simulated severity."""
    return severity > TRUTH_SEVERITY


@dataclass(frozen=True)
class ScoreRange:
    lo: float
    hi: float

    def apply(self, s):
        span = self.hi - self.lo
        if span <= 0:
            span = 1.0
        return np.clip((np.asarray(s, dtype=float) - self.lo) / span, 0.0, NORM_CLAMP)


@dataclass(frozen=True, eq=False)
class DriverBaseline:
    subject_id: str
    stats: BaselineStats
    ocsvm: OcsvmModel
    iforest: IsoForestModel
    lof: LofModel
    ranges: dict  # model name -> ScoreRange over calibration scores
    stream_id: str = ""
    ocsvm_threshold: float = 0.0  # vote cut on the OC-SVM score, from leave-one-out scores

    def one_class_models(self):
        return {"ocsvm": self.ocsvm, "iforest": self.iforest, "lof": self.lof}

    def thresholds(self) -> dict:
        return {"ocsvm": self.ocsvm_threshold, "iforest": self.iforest.threshold, "lof": self.lof.threshold}

    def to_dict(self) -> dict:
        return {
            "v": 1,
            "subject_id": self.subject_id,
            "stream_id": self.stream_id,
            "stats": self.stats.to_dict(),
            "ranges": {k: [r.lo, r.hi] for k, r in self.ranges.items()},
            "ocsvm_threshold": self.ocsvm_threshold,
            "ocsvm": model_to_dict(self.ocsvm),
            "iforest": model_to_dict(self.iforest),
            "lof": model_to_dict(self.lof),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DriverBaseline":
        if d.get("v") != 1:
            raise ValueError(f"unsupported baseline version {d.get('v')!r}")
        return cls(
            subject_id=d["subject_id"],
            stats=BaselineStats.from_dict(d["stats"]),
            ocsvm=model_from_dict(d["ocsvm"]),
            iforest=model_from_dict(d["iforest"]),
            lof=model_from_dict(d["lof"]),
            ranges={k: ScoreRange(float(v[0]), float(v[1])) for k, v in d["ranges"].items()},
            stream_id=d.get("stream_id", ""),
            ocsvm_threshold=float(d["ocsvm_threshold"]),
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: Path) -> "DriverBaseline":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_matrix(vectors) -> np.ndarray:
    rows = [v.as_array() if isinstance(v, FeatureVector) else np.asarray(v, dtype=float) for v in vectors]
    return np.array(rows, dtype=float).reshape(len(rows), -1)


def loo_ocsvm_threshold(Z: np.ndarray, nu: float, gamma: float) -> float:
    """(1 - nu) quantile of leave-one-out OC-SVM scores.

    In-sample the margin sits on the outermost calibration points, so a fresh
    sober checkup falls outside it far more often than nu. Scoring each point
    with a model that never saw it gives the rate the vote will see later, the
    same way the LOF threshold uses leave-self-out values.
    """
    n = len(Z)
    keep = np.ones(n, dtype=bool)
    scores = np.empty(n)
    for i in range(n):
        keep[i] = False
        scores[i] = train_ocsvm(Z[keep], nu=nu, gamma=gamma).score(Z[i : i + 1])[0]
        keep[i] = True
    return float(np.quantile(scores, 1.0 - nu))


def calibrate_driver(
    subject_id: str,
    sober_vectors,
    seed: int = 0,
    nu: float = 0.1,
    n_trees: int = 100,
    psi: int = 256,
    lof_k: int = 10,
    stream_id: str = "",
    gamma: float | None = None,
) -> DriverBaseline:
    """Fit the three one-class models on a driver's sober checkups (z-scored)."""
    X = _as_matrix(sober_vectors)
    if len(X) < MIN_CALIBRATION_CHECKUPS:
        raise TooFewCheckups(f"calibration needs at least {MIN_CALIBRATION_CHECKUPS} sober checkups, got {len(X)}")
    stats = baseline_stats(X)
    Z = normalize(X, stats)
    if gamma is None:
        gamma = default_gamma(Z)
    oc = train_ocsvm(Z, nu=nu, gamma=gamma)
    oc_thr = loo_ocsvm_threshold(Z, nu, gamma)
    iso = train_iforest(Z, n_trees=n_trees, psi=psi, seed=seed, nu=nu)
    lof = train_lof(Z, k=min(lof_k, len(Z) - 1), nu=nu)
    ranges = {}
    for name, model, train_scores in (
        ("ocsvm", oc, oc.score(Z)),
        ("iforest", iso, iso.score(Z)),
        ("lof", lof, lof.train_lof),
    ):
        ranges[name] = ScoreRange(float(np.min(train_scores)), float(np.max(train_scores)))
    return DriverBaseline(subject_id, stats, oc, iso, lof, ranges, stream_id, oc_thr)


def train_population(data: dict, holdout_subject: str, config: GbtConfig | None = None) -> GbtModel:
    """Leave-one-subject-out binary model.

    ``data`` maps subject id to ``(Z, y)``: z-scored feature rows and 0/1
    impairment labels. The holdout subject's rows never enter training.
    """
    others = [s for s in sorted(data) if s != holdout_subject]
    if len(others) < 2:
        raise DegenerateLabels(f"need at least 2 subjects besides {holdout_subject}, got {len(others)}")
    Z = np.vstack([np.asarray(data[s][0], dtype=float) for s in others])
    y = np.concatenate([np.asarray(data[s][1], dtype=float) for s in others])
    if len(np.unique(y)) < 2:
        raise DegenerateLabels(f"training labels without {holdout_subject} contain a single class")
    return train_gbt(Z, y, config)


def majority_verdict(votes: Sequence[bool]) -> str:
    """Equal-weight vote; an even split resolves to Impaired (fail safe)."""
    n_imp = sum(bool(v) for v in votes)
    return IMPAIRED if 2 * n_imp >= len(votes) else SOBER_VERDICT


@dataclass(frozen=True)
class CheckupVerdict:
    subject_id: str
    shift_index: int
    checkup_index: int
    stream_id: str
    votes: tuple  # True = Impaired, order follows MODEL_NAMES (twice when fused)
    mean_score: float
    score_threshold: float
    verdict: str
    truth: bool | None = None
    onset: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.subject_id, self.shift_index, self.checkup_index)

    @property
    def impaired(self) -> bool:
        return self.verdict == IMPAIRED

    @property
    def correct(self) -> bool:
        return self.impaired == bool(self.truth)


@dataclass(frozen=True)
class SubjectResult:
    subject_id: str
    condition: str
    n_correct: int
    n_wrong: int
    outcome: str


def run_checkups(F, baseline: DriverBaseline, population: GbtModel, meta: Iterable[dict] | None = None) -> list[CheckupVerdict]:
    """Score a batch of raw feature rows against one driver's models.

    ``meta`` gives per-row ``subject_id/shift_index/checkup_index/stream_id/
    truth/onset`` fields for the returned verdicts.
    """
    X = _as_matrix(F)
    Z = normalize(X, baseline.stats)
    raw = {
        "ocsvm": baseline.ocsvm.score(Z),
        "iforest": baseline.iforest.score(Z),
        "lof": baseline.lof.score(Z),
        "gbt": population.predict_proba(Z),
    }
    thresholds = {**baseline.thresholds(), "gbt": population.threshold}
    votes = np.stack([raw[m] > thresholds[m] for m in MODEL_NAMES], axis=1)
    norm = {m: baseline.ranges[m].apply(raw[m]) for m in ("ocsvm", "iforest", "lof")}
    norm["gbt"] = raw["gbt"]
    norm_thr = [float(baseline.ranges[m].apply(thresholds[m])) for m in ("ocsvm", "iforest", "lof")] + [thresholds["gbt"]]
    score_threshold = float(np.mean(norm_thr))
    mean_score = np.mean(np.stack([norm[m] for m in MODEL_NAMES], axis=1), axis=1)

    meta = list(meta) if meta is not None else [{} for _ in range(len(X))]
    if len(meta) != len(X):
        raise ValueError("meta length does not match feature rows")
    out = []
    for i, m in enumerate(meta):
        v = tuple(bool(x) for x in votes[i])
        out.append(
            CheckupVerdict(
                subject_id=m.get("subject_id", baseline.subject_id),
                shift_index=int(m.get("shift_index", 0)),
                checkup_index=int(m.get("checkup_index", i)),
                stream_id=m.get("stream_id", baseline.stream_id),
                votes=v,
                mean_score=float(mean_score[i]),
                score_threshold=score_threshold,
                verdict=majority_verdict(v),
                truth=m.get("truth"),
                onset=float(m.get("onset", 0.0)),
            )
        )
    return out


def run_checkup(fv, baseline: DriverBaseline, population: GbtModel, **meta) -> CheckupVerdict:
    return run_checkups([fv], baseline, population, [meta])[0]


def aggregate_subject(verdicts: Sequence[CheckupVerdict], condition: str = "", margin_tie_break: bool = False) -> SubjectResult:
    """Subject outcome by majority of correct checkups; equal counts are omitted.

    With ``margin_tie_break`` (used for fused streams) an equal count is settled
    by the summed signed distance of the scores from their thresholds, so only
    an exactly balanced score set stays omitted.
    """
    if not verdicts:
        raise EmptyInput("no checkups to aggregate")
    n_correct = sum(v.correct for v in verdicts)
    n_wrong = len(verdicts) - n_correct
    if n_correct > n_wrong:
        outcome = CORRECT
    elif n_correct < n_wrong:
        outcome = WRONG
    else:
        outcome = OMITTED
        if margin_tie_break:
            margin = sum((v.mean_score - v.score_threshold) * (1.0 if v.truth else -1.0) for v in verdicts)
            if margin > 0:
                outcome = CORRECT
            elif margin < 0:
                outcome = WRONG
    sid = verdicts[0].subject_id
    return SubjectResult(sid, condition, n_correct, n_wrong, outcome)


def fuse_pair(a: CheckupVerdict, b: CheckupVerdict) -> CheckupVerdict:
    score = 0.5 * (a.mean_score + b.mean_score)
    thr = 0.5 * (a.score_threshold + b.score_threshold)
    if a.verdict == b.verdict:
        verdict = a.verdict
    else:
        verdict = IMPAIRED if score >= thr else SOBER_VERDICT
    return CheckupVerdict(
        subject_id=a.subject_id,
        shift_index=a.shift_index,
        checkup_index=a.checkup_index,
        stream_id=FUSED,
        votes=tuple(a.votes) + tuple(b.votes),
        mean_score=score,
        score_threshold=thr,
        verdict=verdict,
        truth=a.truth,
        onset=a.onset,
    )


def fuse_streams(native: Sequence[CheckupVerdict], cloud: Sequence[CheckupVerdict]) -> list[CheckupVerdict]:
    """Combine the two DMS streams checkup by checkup.

    Streams that agree keep their verdict; on disagreement the averaged score
    is compared with the averaged threshold, reaching the threshold counting as
    Impaired.
    """
    by_key = {v.key: v for v in cloud}
    if len(by_key) != len(cloud):
        raise KeyMismatch("duplicate checkup keys in cloud stream")
    native_keys = [v.key for v in native]
    if len(set(native_keys)) != len(native_keys) or set(native_keys) != set(by_key):
        missing = set(native_keys) ^ set(by_key)
        raise KeyMismatch(f"streams cover different checkups, e.g. {sorted(missing)[:3]}")
    return [fuse_pair(v, by_key[v.key]) for v in native]


# ------------------------------------------------------------- interventions

LADDER = (
    (1, "Notify", "dispatcher"),
    (2, "Alert", "cabin"),
    (3, "Escalate", "escalation"),
)
SHIFT_SPAN_S = 86_400.0


@dataclass(frozen=True)
class InterventionEvent:
    seq: int
    t: float
    subject_id: str
    shift_index: int
    checkup_index: int
    level: int
    action: str
    target: str

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "t": self.t,
            "subject_id": self.subject_id,
            "shift_index": self.shift_index,
            "checkup_index": self.checkup_index,
            "level": self.level,
            "action": self.action,
            "target": self.target,
        }


class ListSink:
    def __init__(self):
        self.events: list[InterventionEvent] = []

    def write(self, event: InterventionEvent) -> None:
        self.events.append(event)


class JsonlSink:
    """Appends one JSON object per event to a file."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def write(self, event: InterventionEvent) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(event.to_dict(), separators=(",", ":")) + "\n")


@dataclass
class InterventionLadder:
    """Stateful escalation over one subject's ordered verdict stream."""

    sink: object = None
    run: int = 0
    shift: int | None = None
    seq: int = 0
    events: list = field(default_factory=list)

    def feed(self, v: CheckupVerdict) -> InterventionEvent | None:
        if v.shift_index != self.shift:
            self.shift = v.shift_index
            self.run = 0
        if not v.impaired:
            self.run = 0
            return None
        self.run += 1
        level, action, target = LADDER[min(self.run, len(LADDER)) - 1]
        ev = InterventionEvent(
            seq=self.seq,
            t=(v.shift_index - 1) * SHIFT_SPAN_S + v.onset if v.shift_index >= 1 else v.onset,
            subject_id=v.subject_id,
            shift_index=v.shift_index,
            checkup_index=v.checkup_index,
            level=level,
            action=action,
            target=target,
        )
        self.seq += 1
        self.events.append(ev)
        if self.sink is not None:
            self.sink.write(ev)
        return ev


def emit_intervention(verdicts: Iterable[CheckupVerdict], sink=None) -> list[InterventionEvent]:
    """Escalation ladder: 1 impaired checkup notifies the dispatcher, 2 in a row
    raise an in-cabin alert, 3 or more escalate. A sober checkup or a new shift
    resets the run.
    """
    ladder = InterventionLadder(sink=sink)
    for v in verdicts:
        ladder.feed(v)
    return ladder.events


# ------------------------------------------------------------------- export

VERDICT_COLUMNS = (
    "subject", "shift", "checkup", "stream", "onset",
    "vote_ocsvm", "vote_iforest", "vote_lof", "vote_gbt",
    "mean_score", "score_threshold", "verdict", "truth",
)


def write_verdict_csv(verdicts: Iterable[CheckupVerdict], dest) -> None:
    """Write verdict rows to a path or an open text stream."""
    if hasattr(dest, "write"):
        _write_verdicts(verdicts, dest)
        return
    with open(dest, "w", newline="") as fh:
        _write_verdicts(verdicts, fh)


def _write_verdicts(verdicts, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(VERDICT_COLUMNS)
    for v in verdicts:
        # fused rows carry both streams' votes: report the impaired count per model
        counts = Counter()
        for j, vote in enumerate(v.votes):
            counts[MODEL_NAMES[j % 4]] += int(vote)
        w.writerow([
            v.subject_id, v.shift_index, v.checkup_index, v.stream_id, repr(v.onset),
            *(counts[m] for m in MODEL_NAMES),
            repr(v.mean_score), repr(v.score_threshold), v.verdict,
            "" if v.truth is None else (IMPAIRED if v.truth else SOBER_VERDICT),
        ])
