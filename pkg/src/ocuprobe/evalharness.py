"""Synthetic cohort study: simulate, extract, calibrate, vote, fuse and tabulate.

Every random draw is keyed by ``(master seed, subject, shift, checkup)`` through
``numpy.random.SeedSequence`` so results do not depend on worker scheduling.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .ensemble import (
    CORRECT,
    FUSED,
    OMITTED,
    CheckupVerdict,
    JsonlSink,
    SubjectResult,
    aggregate_subject,
    calibrate_driver,
    emit_intervention,
    fuse_streams,
    run_checkups,
    train_population,
    write_verdict_csv,
)
from .errors import (
    ConfigError,
    DegenerateLabels,
    InsufficientCheckups,
    InsufficientData,
    InvariantViolation,
    NoDecidableSubjects,
    OcuprobeError,
    ParseError,
)
from .features import N_FEATURES, FeatureRow, FeatureVector, extract_features, normalize, write_feature_csv
from .learners import GbtConfig, GbtModel, save_model, train_gbt
from .probe import CheckupPolicy, ProbeConfig, generate_probe_train, schedule_checkups
from .synthdriver import ImpairmentSpec, sample_profile, severity_for, simulate_checkup
from .telemetry import ALCOHOL, CLOUD, FATIGUE, NATIVE, SOBER, STREAMS, THC, TIME_ON_TASK

log = logging.getLogger(__name__)

HOUR = 3600.0
COLUMNS = (NATIVE, CLOUD, FUSED)
ROWS = (
    ("Overall", "accuracy"),
    ("Baseline", "fp"),
    ("Alcohol", "accuracy"),
    ("THC", "accuracy"),
    ("Fatigue", "accuracy"),
    ("TimeOnTask (all data)", "accuracy"),
    ("TimeOnTask (high data)", "accuracy"),
)
CSV_HEADER = ("row", "metric") + tuple(f"{s.lower()}_{k}" for s in COLUMNS for k in ("n", "value"))
FOOTNOTES = (
    "Subjects with equal numbers of right and wrong checkups are omitted from single-stream accuracy.",
    "Fused scores average both streams, which breaks those ties; fused counts include them.",
    "TimeOnTask rows use binary classification of first-hour vs last-hour checkups.",
)

# spawn-key tags keeping independent draws apart
_TAG_PROFILE, _TAG_PLAN, _TAG_CHECKUP, _TAG_CALIB = 1, 2, 3, 4


# ------------------------------------------------------------------- config


@dataclass(frozen=True)
class StudyConfig:
    n_subjects: int = 31
    n_shifts: int = 10
    calibration_shifts: int = 2
    shift_hours: float = 8.0
    checkup_period: float = 1800.0
    checkup_phase: float = 0.0
    tot_checkup_period: float = 600.0
    seed: int = 7
    # scenario membership probabilities
    p_alcohol: float = 0.65
    p_thc: float = 0.45
    p_fatigue: float = 0.25
    p_driving: float = 0.3
    alcohol_shifts: int = 3
    thc_shifts: int = 3
    fatigue_shifts: int = 2
    max_driving_shifts: int = 4
    # doses
    alcohol_dose: float = 240.0
    thc_dose: str = "smoked"
    kss_start: int = 3
    kss_end: int = 9
    tot_peak: float = 1.0  # multiplies the time-on-task ramp; 0 gives a flat null ramp
    severity_scale: float = 1.0
    effect_deltas: dict = field(default_factory=dict)
    # learners
    nu: float = 0.1
    ocsvm_gamma: float | None = None
    n_trees: int = 100
    psi: int = 256
    lof_k: int = 10
    gbt: GbtConfig = field(default_factory=GbtConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    # evaluation
    truth_threshold: float = 0.2
    high_data_min: int = 12

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if not 1 <= self.n_shifts <= 10:
            raise ConfigError("n_shifts must be in 1..10")
        if not 1 <= self.calibration_shifts < self.n_shifts:
            raise ConfigError("calibration_shifts must be >= 1 and leave evaluation shifts")
        if not self.shift_hours * HOUR > self.probe.duration:
            raise ConfigError("shift_hours too short for one checkup")
        for name in ("p_alcohol", "p_thc", "p_fatigue", "p_driving"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be a probability")
        if not 0 <= self.severity_scale:
            raise ConfigError("severity_scale must be >= 0")
        if not 0 <= self.tot_peak:
            raise ConfigError("tot_peak must be >= 0")
        unknown = set(self.effect_deltas) - {"d_latency", "d_hit", "d_pupil", "d_blink", "d_anticip"}
        if unknown:
            raise ConfigError(f"unknown effect deltas {sorted(unknown)}")
        if not 0 < self.nu < 1:
            raise ConfigError("nu must be in (0, 1)")
        self.probe.validate()
        schedule_checkups(self.shift_seconds, self.policy, self.probe.duration)
        schedule_checkups(self.shift_seconds, self.tot_policy, self.probe.duration)

    @property
    def shift_seconds(self) -> float:
        return self.shift_hours * HOUR

    @property
    def policy(self) -> CheckupPolicy:
        return CheckupPolicy(self.checkup_period, self.checkup_phase)

    @property
    def tot_policy(self) -> CheckupPolicy:
        return CheckupPolicy(self.tot_checkup_period, 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["effect_deltas"] = dict(self.effect_deltas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown study config keys {sorted(unknown)}")
        try:
            if "gbt" in d and isinstance(d["gbt"], dict):
                d["gbt"] = GbtConfig(**d["gbt"])
            if "probe" in d and isinstance(d["probe"], dict):
                d["probe"] = ProbeConfig(**d["probe"])
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


def _seed(config: StudyConfig, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=config.seed, spawn_key=tuple(int(k) for k in key))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def subject_id(i: int) -> str:
    return f"S{i + 1:02d}"


# --------------------------------------------------------------- shift plan


class ShiftPlan(NamedTuple):
    shift_index: int
    condition: str
    onsets: tuple
    severities: tuple
    calibration: bool = False


def _impairment(config: StudyConfig, condition: str, severity: float) -> ImpairmentSpec:
    return ImpairmentSpec(condition, severity, **config.effect_deltas)


def _scaled(config: StudyConfig, lam: float) -> float:
    return float(min(1.0, lam * config.severity_scale))


def _severity_at(config: StudyConfig, condition: str, onset: float) -> float:
    hours = onset / HOUR
    if condition == SOBER:
        return 0.0
    if condition == ALCOHOL:
        return _scaled(config, severity_for(ALCOHOL, config.alcohol_dose))
    if condition == THC:
        return _scaled(config, severity_for(THC, config.thc_dose))
    if condition == FATIGUE:
        frac = hours / config.shift_hours
        kss = int(round(config.kss_start + frac * (config.kss_end - config.kss_start)))
        return _scaled(config, severity_for(FATIGUE, min(9, max(1, kss))))
    if condition == TIME_ON_TASK:
        return _scaled(config, config.tot_peak * severity_for(TIME_ON_TASK, hours))
    raise ConfigError(f"unknown condition {condition!r}")


def tot_windows(config: StudyConfig) -> tuple[list[float], list[float]]:
    """Checkup onsets in the first and in the last hour of a time-on-task shift."""
    onsets = schedule_checkups(config.shift_seconds, config.tot_policy, config.probe.duration)
    early = [o for o in onsets if o + config.probe.duration <= HOUR]
    late = [o for o in onsets if o >= config.shift_seconds - HOUR]
    return early, late


def plan_subject(config: StudyConfig, index: int) -> list[ShiftPlan]:
    """Condition and checkup schedule for every shift of one subject.

    Calibration shifts come first and are sober. Scenario membership decides
    which impaired shifts follow; at least one evaluation shift stays sober.
    Time-on-task shifts are probed densely but only in their first and last
    hour, the windows the binary evaluation compares.
    """
    rng = np.random.default_rng(_seed(config, index, _TAG_PLAN))
    u = rng.random(5)
    free = config.n_shifts - config.calibration_shifts
    conds: list[str] = []

    def take(cond, want):
        nonlocal free
        n = max(0, min(want, free - 1))
        conds.extend([cond] * n)
        free -= n

    if u[0] < config.p_alcohol:
        take(ALCOHOL, config.alcohol_shifts)
    if u[3] < config.p_driving:
        take(TIME_ON_TASK, 1 + int(u[4] * config.max_driving_shifts))
    if u[1] < config.p_thc:
        take(THC, config.thc_shifts)
    if u[2] < config.p_fatigue:
        take(FATIGUE, config.fatigue_shifts)
    conds.extend([SOBER] * free)
    order = rng.permutation(len(conds))
    conds = [conds[i] for i in order]

    regular = schedule_checkups(config.shift_seconds, config.policy, config.probe.duration)
    early, late = tot_windows(config)
    plan = []
    for s in range(config.n_shifts):
        if s < config.calibration_shifts:
            cond, calib = SOBER, True
        else:
            cond, calib = conds[s - config.calibration_shifts], False
        onsets = early + late if cond == TIME_ON_TASK else regular
        sev = tuple(_severity_at(config, cond, o) for o in onsets)
        plan.append(ShiftPlan(s + 1, cond, tuple(onsets), sev, calib))
    return plan


# ------------------------------------------------------- per-subject stage


@dataclass
class CheckupRecord:
    shift_index: int
    checkup_index: int
    condition: str
    onset: float
    severity: float
    calibration: bool
    features: dict  # stream id -> raw feature array

    def truth(self, threshold: float) -> bool:
        return self.severity > threshold


@dataclass
class SubjectData:
    index: int
    subject_id: str
    plan: list
    records: list  # CheckupRecord, only checkups usable on both streams
    dropped: int
    baselines: dict  # stream id -> DriverBaseline

    def rows(self, stream: str, where) -> tuple[list, np.ndarray]:
        recs = [r for r in self.records if where(r)]
        X = np.array([r.features[stream] for r in recs], dtype=float).reshape(len(recs), N_FEATURES)
        return recs, X


def iter_checkups(config: StudyConfig, index: int):
    """Yield ``(shift plan, checkup index, probe train, SimulatedCheckup)`` for one subject."""
    profile = sample_profile(_int_seed(_seed(config, index, _TAG_PROFILE)))
    for shift in plan_subject(config, index):
        for c, (onset, sev) in enumerate(zip(shift.onsets, shift.severities)):
            ss = _seed(config, index, _TAG_CHECKUP, shift.shift_index, c)
            train_seed, sim_seed = ss.spawn(2)
            train = generate_probe_train(config.probe, _int_seed(train_seed))
            imp = _impairment(config, shift.condition if sev > 0 else SOBER, sev)
            yield shift, c, train, simulate_checkup(profile, imp, train, _int_seed(sim_seed), onset=onset)


def calibrate_subject(config: StudyConfig, data: "SubjectData") -> "SubjectData":
    """Fit both streams' baselines on the calibration checkups (in place)."""
    calib_seed = _int_seed(_seed(config, data.index, _TAG_CALIB))
    for s in STREAMS:
        _, X = data.rows(s, lambda r: r.calibration)
        try:
            data.baselines[s] = calibrate_driver(
                data.subject_id, X, seed=calib_seed, nu=config.nu, n_trees=config.n_trees,
                psi=config.psi, lof_k=config.lof_k, stream_id=s, gamma=config.ocsvm_gamma,
            )
        except OcuprobeError as exc:
            raise type(exc)(f"{data.subject_id} stream {s}: {exc}") from exc
    return data


def _record(shift: ShiftPlan, c: int, traces: dict, train) -> CheckupRecord | None:
    try:
        feats = {s: extract_features(traces[s], train).as_array() for s in STREAMS}
    except InsufficientData:
        return None
    return CheckupRecord(shift.shift_index, c, shift.condition, shift.onsets[c], shift.severities[c], shift.calibration, feats)


def simulate_subject(config: StudyConfig, index: int) -> SubjectData:
    """Simulate every planned checkup of one subject and calibrate both streams.

    Checkups where either stream lacks usable data are dropped from both.
    """
    records, dropped = [], 0
    for shift, c, train, sim in iter_checkups(config, index):
        rec = _record(shift, c, {s: sim.stream(s) for s in STREAMS}, train)
        if rec is None:
            dropped += 1
        else:
            records.append(rec)
    data = SubjectData(index, subject_id(index), plan_subject(config, index), records, dropped, {})
    return calibrate_subject(config, data)


def subject_from_sessions(config: StudyConfig, index: int, sid: str, sessions: list) -> SubjectData:
    """Rebuild a subject's records from sessions read back from disk."""
    plan, records, dropped = [], [], 0
    for sess in sorted(sessions, key=lambda x: x.manifest.shift_index):
        m = sess.manifest
        missing = set(STREAMS) - set(sess.traces)
        if missing:
            raise InvariantViolation(f"{sid} shift {m.shift_index}: session lacks streams {sorted(missing)}")
        n = len(m.probe_train_refs)
        onsets = m.checkup_onsets or tuple(float(tr.t[0]) for tr in sess.traces[NATIVE])
        sev = m.checkup_severities or (m.severity,) * n
        shift = ShiftPlan(m.shift_index, m.condition, tuple(onsets), tuple(sev),
                          m.shift_index <= config.calibration_shifts and m.condition == SOBER)
        plan.append(shift)
        for c in range(n):
            rec = _record(shift, c, {s: sess.traces[s][c] for s in STREAMS}, sess.trains[c])
            if rec is None:
                dropped += 1
            else:
                records.append(rec)
    return SubjectData(index, sid, plan, records, dropped, {})


def _is_main(r: CheckupRecord) -> bool:
    return r.condition != TIME_ON_TASK


def _is_eval(r: CheckupRecord) -> bool:
    return r.condition != TIME_ON_TASK and not r.calibration


def population_rows(data: SubjectData, stream: str, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """z-scored main-study rows of one subject with 0/1 truth labels."""
    recs, X = data.rows(stream, _is_main)
    Z = normalize(X, data.baselines[stream].stats)
    y = np.array([float(r.truth(threshold)) for r in recs])
    return Z, y


class _AbstainModel:
    """Stand-in when the other subjects offer only one class: always votes Sober."""

    threshold = 0.5

    def predict_proba(self, X):
        return np.zeros(len(np.atleast_2d(X)))


@dataclass
class SubjectVerdicts:
    subject_id: str
    verdicts: dict  # stream id (incl. Fused) -> list[CheckupVerdict]
    models: dict  # stream id -> GbtModel or None
    tot: dict  # stream id (incl. Fused) -> list[CheckupVerdict]


def _meta(data: SubjectData, recs: list, stream: str, threshold: float) -> list[dict]:
    return [
        {
            "subject_id": data.subject_id,
            "shift_index": r.shift_index,
            "checkup_index": r.checkup_index,
            "stream_id": stream,
            "truth": r.truth(threshold),
            "onset": r.onset,
        }
        for r in recs
    ]


def tot_rows(data: SubjectData, stream: str, config: StudyConfig):
    """First-hour (label 0) and last-hour (label 1) rows, z-scored by the driver baseline."""
    late_from = config.shift_seconds - HOUR
    recs, X = data.rows(stream, lambda r: r.condition == TIME_ON_TASK)
    y = np.array([1.0 if r.onset >= late_from else 0.0 for r in recs])
    Z = normalize(X, data.baselines[stream].stats) if len(recs) else X
    return recs, Z, y


def check_tot_windows(y: np.ndarray, subject: str = "") -> None:
    n_late = int(np.sum(y == 1))
    n_early = int(np.sum(y == 0))
    if min(n_early, n_late) < 2:
        raise InsufficientCheckups(f"{subject}: time-on-task windows need >= 2 checkups each, got {n_early} early / {n_late} late")


def evaluate_subject(config: StudyConfig, all_data: list, i: int) -> SubjectVerdicts:
    data = all_data[i]
    thr = config.truth_threshold
    verdicts, models, tot = {}, {}, {}
    for s in STREAMS:
        pop = {d.subject_id: population_rows(d, s, thr) for d in all_data}
        try:
            model = train_population(pop, data.subject_id, config.gbt)
        except DegenerateLabels:
            model = None
        models[s] = model
        recs, X = data.rows(s, _is_eval)
        verdicts[s] = run_checkups(X, data.baselines[s], model or _AbstainModel(), _meta(data, recs, s, thr)) if recs else []

        recs, Z, y = tot_rows(data, s, config)
        tot[s] = []
        if len(recs):
            try:
                check_tot_windows(y, data.subject_id)
            except InsufficientCheckups as exc:
                log.info("%s", exc)
                continue
            tot_model = _tot_population(config, all_data, data.subject_id, s)
            if tot_model is None:
                continue
            p = tot_model.predict_proba(Z)
            for r, pr, label in zip(recs, p, y):
                tot[s].append(
                    CheckupVerdict(data.subject_id, r.shift_index, r.checkup_index, s, (bool(pr > 0.5),),
                                   float(pr), 0.5, "Impaired" if pr > 0.5 else "Sober", bool(label), r.onset)
                )
    verdicts[FUSED] = fuse_streams(verdicts[NATIVE], verdicts[CLOUD])
    tot[FUSED] = fuse_streams(tot[NATIVE], tot[CLOUD]) if tot[NATIVE] and tot[CLOUD] else []
    return SubjectVerdicts(data.subject_id, verdicts, models, tot)


def _tot_population(config: StudyConfig, all_data: list, holdout: str, stream: str) -> GbtModel | None:
    Zs, ys = [], []
    for d in all_data:
        if d.subject_id == holdout:
            continue
        _, Z, y = tot_rows(d, stream, config)
        if len(y) and min(np.sum(y == 0), np.sum(y == 1)) >= 2:
            Zs.append(Z)
            ys.append(y)
    if not Zs:
        return None
    y = np.concatenate(ys)
    try:
        return train_gbt(np.vstack(Zs), y, config.gbt)
    except OcuprobeError as exc:
        log.info("time-on-task model without %s unavailable: %s", holdout, exc)
        return None


# -------------------------------------------------------------- results table


@dataclass(frozen=True)
class Cell:
    n: int
    value: float | None  # None renders as N/A

    def __post_init__(self):
        if self.value is not None:
            object.__setattr__(self, "value", round(float(self.value), 6))


@dataclass(frozen=True)
class ResultsTable:
    rows: tuple  # ((name, metric, {stream: Cell}), ...)

    def cell(self, row: str, stream: str) -> Cell:
        for name, _, cells in self.rows:
            if name == row:
                return cells[stream]
        raise KeyError(row)

    def value(self, row: str, stream: str = FUSED) -> float | None:
        return self.cell(row, stream).value


def compute_metrics(subject_results, baseline_verdicts) -> tuple[float, float | None]:
    """Subject-level accuracy over decidable subjects and checkup-level FP rate."""
    decided = [r for r in subject_results if r.outcome != OMITTED]
    if not decided:
        raise NoDecidableSubjects("every subject is omitted")
    acc = sum(r.outcome == CORRECT for r in decided) / len(decided)
    sober = [v for v in baseline_verdicts if not v.truth]
    fp = sum(v.impaired for v in sober) / len(sober) if sober else None
    return acc, fp


def _accuracy_cell(results: list) -> Cell:
    try:
        acc, _ = compute_metrics(results, [])
    except NoDecidableSubjects:
        return Cell(0, None)
    return Cell(sum(r.outcome != OMITTED for r in results), acc)


def _subject_results(groups: dict, condition: str, fused: bool) -> list:
    return [aggregate_subject(v, condition, margin_tie_break=fused) for _, v in sorted(groups.items()) if v]


def build_table(config: StudyConfig, evaluated: list, high_data: set) -> ResultsTable:
    rows = []
    cells = {name: {} for name, _ in ROWS}
    for stream in COLUMNS:
        fused = stream == FUSED
        by_cond = {c: {} for c in ("Overall", ALCOHOL, THC, FATIGUE, "Baseline")}
        tot_all, tot_high = {}, {}
        for ev in evaluated:
            vs = ev.verdicts[stream]
            by_cond["Overall"][ev.subject_id] = vs
            sober = [v for v in vs if not v.truth]
            if sober:
                by_cond["Baseline"][ev.subject_id] = sober
            for cond in (ALCOHOL, THC, FATIGUE):
                shifts = {p.shift_index for p in ev.plan if p.condition == cond}
                sel = [v for v in vs if v.shift_index in shifts and v.truth]
                if sel:
                    by_cond[cond][ev.subject_id] = sel
            if ev.tot[stream]:
                tot_all[ev.subject_id] = ev.tot[stream]
                if ev.subject_id in high_data:
                    tot_high[ev.subject_id] = ev.tot[stream]
        cells["Overall"][stream] = _accuracy_cell(_subject_results(by_cond["Overall"], "Overall", fused))
        base = [v for vs in by_cond["Baseline"].values() for v in vs]
        _, fp = compute_metrics([SubjectResult("", "", 1, 0, CORRECT)], base)
        cells["Baseline"][stream] = Cell(len(by_cond["Baseline"]), fp)
        for cond in (ALCOHOL, THC, FATIGUE):
            cells[cond][stream] = _accuracy_cell(_subject_results(by_cond[cond], cond, fused))
        cells["TimeOnTask (all data)"][stream] = _accuracy_cell(_subject_results(tot_all, TIME_ON_TASK, fused))
        cells["TimeOnTask (high data)"][stream] = _accuracy_cell(_subject_results(tot_high, TIME_ON_TASK, fused))
    for name, metric in ROWS:
        rows.append((name, metric, cells[name]))
    return ResultsTable(tuple(rows))


# ----------------------------------------------------------------- rendering


def _fmt_value(v: float | None) -> str:
    return "N/A" if v is None else f"{v:.6f}"


def render_csv(table: ResultsTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for name, metric, cells in table.rows:
        out = [name, metric]
        for s in COLUMNS:
            out += [cells[s].n, _fmt_value(cells[s].value)]
        w.writerow(out)
    return buf.getvalue()


def render_text(table: ResultsTable) -> str:
    head = f"{'':30s}" + "".join(f"{s:>22s}" for s in COLUMNS)
    sub = f"{'':30s}" + "".join(f"{'n':>8s}{'value':>14s}" for _ in COLUMNS)
    lines = [head, sub]
    for name, metric, cells in table.rows:
        label = f"{name} ({'Acc' if metric == 'accuracy' else 'FP'})"
        line = f"{label:30s}"
        for s in COLUMNS:
            c = cells[s]
            v = "N/A" if c.value is None else f"{100 * c.value:.1f}%"
            line += f"{c.n:>8d}{v:>14s}"
        lines.append(line)
    lines.append("")
    lines += [f"* {note}" for note in FOOTNOTES]
    return "\n".join(lines) + "\n"


def render_report(table: ResultsTable) -> tuple[str, str]:
    """(text, csv) renderings of a results table."""
    return render_text(table), render_csv(table)


def parse_report_csv(text: str) -> ResultsTable:
    rd = csv.reader(io.StringIO(text))
    try:
        header = next(rd)
    except StopIteration:
        raise ParseError("empty report", line=1) from None
    if tuple(header) != CSV_HEADER:
        raise ParseError(f"unexpected header {header}", line=1)
    rows = []
    for lineno, rec in enumerate(rd, start=2):
        if len(rec) != len(CSV_HEADER):
            raise ParseError(f"expected {len(CSV_HEADER)} fields, got {len(rec)}", line=lineno)
        cells = {}
        try:
            for j, s in enumerate(COLUMNS):
                n, v = rec[2 + 2 * j], rec[3 + 2 * j]
                cells[s] = Cell(int(n), None if v == "N/A" else float(v))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        rows.append((rec[0], rec[1], cells))
    return ResultsTable(tuple(rows))


# ---------------------------------------------------------------- orchestration


@dataclass
class EvaluatedSubject:
    subject_id: str
    plan: list
    verdicts: dict
    tot: dict


@dataclass
class StudyResult:
    table: ResultsTable
    subjects: list  # SubjectData
    evaluated: list  # EvaluatedSubject
    models: list  # per subject: stream -> GbtModel | None
    high_data: set


def _simulate_job(args):
    config, index = args
    return simulate_subject(config, index)


_POOL_DATA: list | None = None


def _init_pool(all_data):
    global _POOL_DATA
    _POOL_DATA = all_data


def _evaluate_pooled(args):
    config, i = args
    return evaluate_subject(config, _POOL_DATA, i)


def _map(fn, items, jobs: int, initializer=None, initargs=()):
    if jobs <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=initializer, initargs=initargs) as ex:
        return list(ex.map(fn, items))


def high_data_subjects(config: StudyConfig, subjects: list) -> set:
    out = set()
    for d in subjects:
        _, _, y = tot_rows(d, NATIVE, config)
        if len(y) and min(np.sum(y == 0), np.sum(y == 1)) >= config.high_data_min:
            out.add(d.subject_id)
    return out


def run_study(config: StudyConfig, jobs: int = 1, out: Path | None = None) -> StudyResult:
    """Run the whole synthetic study; write the artifact tree when ``out`` is given."""
    config.validate()
    if config.n_subjects < 3:
        raise ConfigError("a study needs n_subjects >= 3 for leave-one-subject-out training")
    jobs = max(1, int(jobs))
    log.info("simulating %d subjects with %d worker(s)", config.n_subjects, jobs)
    subjects = _map(_simulate_job, [(config, i) for i in range(config.n_subjects)], jobs)
    n_dropped = sum(d.dropped for d in subjects)
    if n_dropped:
        log.info("dropped %d checkups with insufficient data", n_dropped)
    log.info("leave-one-subject-out evaluation")
    results = _map(
        _evaluate_pooled, [(config, i) for i in range(len(subjects))], jobs,
        initializer=_init_pool, initargs=(subjects,),
    )
    evaluated = [EvaluatedSubject(r.subject_id, d.plan, r.verdicts, r.tot) for r, d in zip(results, subjects)]
    high = high_data_subjects(config, subjects)
    table = build_table(config, evaluated, high)
    result = StudyResult(table, subjects, evaluated, [r.models for r in results], high)
    if out is not None:
        write_study(config, result, Path(out))
    return result


def time_on_task_eval(config: StudyConfig, jobs: int = 1) -> dict:
    """Time-on-task rows only: {stream: (all Cell, high-data Cell)} plus checkup accuracy."""
    early, late = tot_windows(config)
    if min(len(early), len(late)) < 2:
        raise InsufficientCheckups(f"policy yields {len(early)} early and {len(late)} late checkups per shift; need >= 2")
    result = run_study(config, jobs=jobs)
    out = {}
    for s in COLUMNS:
        vs = [v for ev in result.evaluated for v in ev.tot[s]]
        acc = sum(v.correct for v in vs) / len(vs) if vs else None
        out[s] = {
            "all": result.table.cell("TimeOnTask (all data)", s),
            "high": result.table.cell("TimeOnTask (high data)", s),
            "checkup_accuracy": acc,
            "n_checkups": len(vs),
        }
    return out


# -------------------------------------------------------------------- output


def write_study(config: StudyConfig, result: StudyResult, out: Path) -> None:
    """Artifact tree: sessions/, features/, models/, verdicts/, report.csv, report.txt."""
    for sub in ("sessions", "features", "models", "verdicts"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True, default=_json_default) + "\n")
    for d, ev, models in zip(result.subjects, result.evaluated, result.models):
        plan = {
            "subject_id": d.subject_id,
            "dropped_checkups": d.dropped,
            "shifts": [
                {
                    "shift_index": p.shift_index,
                    "condition": p.condition,
                    "calibration": p.calibration,
                    "checkup_onsets": list(p.onsets),
                    "checkup_severities": list(p.severities),
                }
                for p in d.plan
            ],
        }
        (out / "sessions" / f"{d.subject_id}.json").write_text(json.dumps(plan, indent=1) + "\n")
        mdir = out / "models" / d.subject_id
        mdir.mkdir(exist_ok=True)
        for s in STREAMS:
            rows = [
                FeatureRow(d.subject_id, r.shift_index, r.checkup_index,
                           "Impaired" if r.truth(config.truth_threshold) else "Sober",
                           FeatureVector.from_array(r.features[s]))
                for r in d.records
            ]
            write_feature_csv(rows, out / "features" / f"{d.subject_id}_{s}.csv")
            d.baselines[s].save(mdir / f"{s}_baseline.json")
            if models[s] is not None:
                save_model(models[s], mdir / f"{s}_gbt.json")
        write_verdict_csv(
            [v for s in COLUMNS for v in ev.verdicts[s]],
            out / "verdicts" / f"{d.subject_id}.csv",
        )
        ipath = out / "verdicts" / f"{d.subject_id}_interventions.jsonl"
        ipath.write_text("")
        ordered = sorted(ev.verdicts[FUSED], key=lambda v: (v.shift_index, v.checkup_index))
        emit_intervention(ordered, JsonlSink(ipath))
    text, csv_text = render_report(result.table)
    (out / "report.csv").write_text(csv_text)
    (out / "report.txt").write_text(text)


def _json_default(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serializable: {type(o).__name__}")
