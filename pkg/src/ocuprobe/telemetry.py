"""Ocular traces, session manifests, and their on-disk formats.

Traces are stored column-wise in numpy arrays; ``Trace.samples()`` yields
per-sample ``OcularSample`` records when row access is more convenient.

On disk a trace is JSONL: a header line ``{"rate": .., "stream_id": ..}``
followed by one object per sample with keys ``t, gx, gy, pupil, lid, valid``.
``valid`` is ``true``, ``false`` or ``"interp"`` (gap filled by
``clean_trace``). Floats are written with 9 significant digits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import EmptySession, InvariantViolation, MissingFile, ParseError
from .probe import ProbeTrain, read_probe_train, write_probe_train

NATIVE = "Native"
CLOUD = "Cloud"
STREAMS = (NATIVE, CLOUD)

SOBER = "Sober"
ALCOHOL = "Alcohol"
THC = "THC"
FATIGUE = "Fatigue"
TIME_ON_TASK = "TimeOnTask"
CONDITIONS = (SOBER, ALCOHOL, THC, FATIGUE, TIME_ON_TASK)

DEFAULT_RATE = 60.0
MAX_PUPIL_MM = 12.0
GAP_FILL_MAX_S = 0.2
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class OcularSample:
    t: float
    gaze_x: float
    gaze_y: float
    pupil: float
    eyelid: float
    valid: bool
    interpolated: bool = False


def _check_samples(t, pupil, eyelid, valid, rate) -> None:
    """Raise InvariantViolation naming the first offending sample index."""
    n = len(t)
    if n == 0:
        return
    if not np.all(np.isfinite(t)):
        raise InvariantViolation("non-finite timestamp", line=int(np.argmin(np.isfinite(t))))
    if t[0] < 0:
        raise InvariantViolation(f"negative timestamp {t[0]}", line=0)
    dt = np.diff(t)
    bad = np.flatnonzero(dt <= 0)
    if bad.size:
        i = int(bad[0]) + 1
        raise InvariantViolation(f"timestamp {t[i]} not after {t[i - 1]}", line=i)
    nominal = 1.0 / rate
    both_valid = valid[1:] & valid[:-1]
    off = np.flatnonzero(both_valid & ((dt > 2.0 * nominal * (1 + 1e-6)) | (dt < 0.5 * nominal * (1 - 1e-6))))
    if off.size:
        i = int(off[0]) + 1
        raise InvariantViolation(f"sample spacing {dt[i - 1]:.6g} s not within 2x of nominal {nominal:.6g} s", line=i)
    with np.errstate(invalid="ignore"):
        bad_pupil = valid & ~((pupil > 0) & (pupil < MAX_PUPIL_MM))
    if bad_pupil.any():
        i = int(np.flatnonzero(bad_pupil)[0])
        raise InvariantViolation(f"pupil {pupil[i]} mm outside (0, {MAX_PUPIL_MM})", line=i)
    with np.errstate(invalid="ignore"):
        bad_lid = ~((eyelid >= 0) & (eyelid <= 1))
    if bad_lid.any():
        i = int(np.flatnonzero(bad_lid)[0])
        raise InvariantViolation(f"eyelid {eyelid[i]} outside [0, 1]", line=i)


@dataclass(frozen=True, eq=False)
class Trace:
    t: np.ndarray
    gaze_x: np.ndarray
    gaze_y: np.ndarray
    pupil: np.ndarray
    eyelid: np.ndarray
    valid: np.ndarray
    interpolated: np.ndarray = None
    rate: float = DEFAULT_RATE
    stream_id: str = NATIVE

    def __post_init__(self):
        n = len(self.t)
        cols = {}
        for name in ("t", "gaze_x", "gaze_y", "pupil", "eyelid"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            cols[name] = arr
        valid = np.array(self.valid, dtype=bool)
        interp = np.zeros(n, dtype=bool) if self.interpolated is None else np.array(self.interpolated, dtype=bool)
        interp &= ~valid
        valid.setflags(write=False)
        interp.setflags(write=False)
        cols["valid"] = valid
        cols["interpolated"] = interp
        for name, arr in cols.items():
            if arr.shape != (n,):
                raise InvariantViolation(f"column {name} has shape {arr.shape}, expected ({n},)")
            object.__setattr__(self, name, arr)
        if self.stream_id not in STREAMS:
            raise InvariantViolation(f"unknown stream_id {self.stream_id!r}; expected one of {STREAMS}")
        if not self.rate > 0:
            raise InvariantViolation(f"rate must be positive, got {self.rate}")
        _check_samples(cols["t"], cols["pupil"], cols["eyelid"], valid, self.rate)

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        if self.rate != other.rate or self.stream_id != other.stream_id or len(self) != len(other):
            return False
        return all(
            np.array_equal(getattr(self, c), getattr(other, c), equal_nan=c not in ("valid", "interpolated"))
            for c in ("t", "gaze_x", "gaze_y", "pupil", "eyelid", "valid", "interpolated")
        )

    @property
    def usable(self) -> np.ndarray:
        """Samples carrying gaze/pupil values: tracked or gap-filled."""
        return self.valid | self.interpolated

    def samples(self) -> Iterator[OcularSample]:
        for i in range(len(self)):
            yield OcularSample(
                float(self.t[i]),
                float(self.gaze_x[i]),
                float(self.gaze_y[i]),
                float(self.pupil[i]),
                float(self.eyelid[i]),
                bool(self.valid[i]),
                bool(self.interpolated[i]),
            )

    @classmethod
    def from_samples(cls, samples, rate: float = DEFAULT_RATE, stream_id: str = NATIVE) -> "Trace":
        samples = list(samples)
        return cls(
            t=[s.t for s in samples],
            gaze_x=[s.gaze_x for s in samples],
            gaze_y=[s.gaze_y for s in samples],
            pupil=[s.pupil for s in samples],
            eyelid=[s.eyelid for s in samples],
            valid=[s.valid for s in samples],
            interpolated=[s.interpolated for s in samples],
            rate=rate,
            stream_id=stream_id,
        )

    def replace(self, **changes) -> "Trace":
        kw = {c: getattr(self, c) for c in ("t", "gaze_x", "gaze_y", "pupil", "eyelid", "valid", "interpolated", "rate", "stream_id")}
        kw.update(changes)
        return Trace(**kw)


def clean_trace(trace: Trace) -> Trace:
    """Fill short tracking gaps by linear interpolation of gaze and pupil.

    A gap is a run of untracked samples bounded by usable samples on both
    sides. Gaps spanning at most 200 ms between their bounding samples are
    filled and flagged as interpolated; longer or edge gaps stay untracked.
    """
    missing = ~trace.usable
    if not missing.any():
        return trace
    t = trace.t
    cols = {c: np.array(getattr(trace, c)) for c in ("gaze_x", "gaze_y", "pupil")}
    interp = np.array(trace.interpolated)

    edges = np.diff(np.concatenate([[0], missing.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)  # exclusive
    for a, b in zip(starts, stops):
        if a == 0 or b == len(t):
            continue
        lo, hi = a - 1, b
        span = t[hi] - t[lo]
        if span > GAP_FILL_MAX_S + 1e-9:
            continue
        w = (t[a:b] - t[lo]) / span
        for arr in cols.values():
            arr[a:b] = arr[lo] + w * (arr[hi] - arr[lo])
        interp[a:b] = True
    return trace.replace(interpolated=interp, **cols)


@dataclass(frozen=True)
class SessionManifest:
    subject_id: str
    shift_index: int
    condition: str
    severity: float
    probe_train_refs: tuple[str, ...]
    trace_refs: dict
    checkup_onsets: tuple[float, ...] = ()
    checkup_severities: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "probe_train_refs", tuple(self.probe_train_refs))
        object.__setattr__(self, "checkup_onsets", tuple(float(x) for x in self.checkup_onsets))
        object.__setattr__(self, "checkup_severities", tuple(float(x) for x in self.checkup_severities))
        object.__setattr__(self, "trace_refs", {k: tuple(v) for k, v in self.trace_refs.items()})
        self.validate()

    def validate(self) -> None:
        if self.condition not in CONDITIONS:
            raise InvariantViolation(f"unknown condition {self.condition!r}")
        if not 1 <= self.shift_index <= 10:
            raise InvariantViolation(f"shift_index {self.shift_index} outside 1..10")
        if not 0 <= self.severity <= 1:
            raise InvariantViolation(f"severity {self.severity} outside [0, 1]")
        if self.condition == SOBER and self.severity != 0:
            raise InvariantViolation(f"Sober session must have severity 0, got {self.severity}")
        if self.condition != SOBER and not self.severity > 0:
            raise InvariantViolation(f"{self.condition} session must have severity > 0")
        for s in self.checkup_severities:
            if not 0 <= s <= 1:
                raise InvariantViolation(f"checkup severity {s} outside [0, 1]")
        unknown = set(self.trace_refs) - set(STREAMS)
        if unknown:
            raise InvariantViolation(f"unknown stream ids {sorted(unknown)}")
        n = len(self.probe_train_refs)
        for sid, refs in self.trace_refs.items():
            if len(refs) != n:
                raise InvariantViolation(f"stream {sid} has {len(refs)} traces for {n} probe trains")
        if self.checkup_onsets and len(self.checkup_onsets) != n:
            raise InvariantViolation("checkup_onsets length does not match probe trains")
        if self.checkup_severities and len(self.checkup_severities) != n:
            raise InvariantViolation("checkup_severities length does not match probe trains")

    def to_dict(self) -> dict:
        return {
            "v": MANIFEST_VERSION,
            "subject_id": self.subject_id,
            "shift_index": self.shift_index,
            "condition": self.condition,
            "severity": self.severity,
            "checkup_onsets": list(self.checkup_onsets),
            "checkup_severities": list(self.checkup_severities),
            "probe_train_refs": list(self.probe_train_refs),
            "trace_refs": {k: list(v) for k, v in self.trace_refs.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionManifest":
        if d.get("v") != MANIFEST_VERSION:
            raise ParseError(f"unsupported manifest version {d.get('v')!r}")
        try:
            return cls(
                subject_id=str(d["subject_id"]),
                shift_index=int(d["shift_index"]),
                condition=str(d["condition"]),
                severity=float(d["severity"]),
                probe_train_refs=[str(x) for x in d["probe_train_refs"]],
                trace_refs={str(k): [str(x) for x in v] for k, v in d["trace_refs"].items()},
                checkup_onsets=d.get("checkup_onsets", ()),
                checkup_severities=d.get("checkup_severities", ()),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"malformed manifest: {exc}") from exc


class Session(NamedTuple):
    manifest: SessionManifest
    traces: dict  # stream id -> list[Trace], one per checkup
    trains: list  # ProbeTrain per checkup


# ---------------------------------------------------------------- trace files


def _fmt(x: float) -> str:
    return "null" if not np.isfinite(x) else f"{x:.9g}"


def quantize(trace: Trace) -> Trace:
    """The trace exactly as it will read back from disk."""
    q = {}
    for c in ("t", "gaze_x", "gaze_y", "pupil", "eyelid"):
        q[c] = np.array([float(_fmt(v)) if np.isfinite(v) else np.nan for v in getattr(trace, c)])
    return trace.replace(**q)


def write_trace(trace: Trace, path: Path) -> None:
    lines = [json.dumps({"rate": trace.rate, "stream_id": trace.stream_id})]
    for i in range(len(trace)):
        v = "true" if trace.valid[i] else ('"interp"' if trace.interpolated[i] else "false")
        lines.append(
            f'{{"t":{_fmt(trace.t[i])},"gx":{_fmt(trace.gaze_x[i])},"gy":{_fmt(trace.gaze_y[i])},'
            f'"pupil":{_fmt(trace.pupil[i])},"lid":{_fmt(trace.eyelid[i])},"valid":{v}}}'
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _num(rec: dict, key: str, lineno: int, path: str, nullable: bool) -> float:
    v = rec[key]
    if v is None:
        if nullable:
            return np.nan
        raise ParseError(f"field {key!r} may not be null", line=lineno, path=path)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"field {key!r} must be a number", line=lineno, path=path)
    return float(v)


def read_trace(path: Path) -> Trace:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    spath = str(path)
    with open(path) as fh:
        text = fh.read().splitlines()
    if not text:
        raise ParseError("empty trace file", line=1, path=spath)
    try:
        header = json.loads(text[0])
        rate = float(header["rate"])
        stream_id = str(header["stream_id"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad header: {exc}", line=1, path=spath) from exc

    n = len(text) - 1
    t = np.empty(n)
    gx = np.empty(n)
    gy = np.empty(n)
    pupil = np.empty(n)
    lid = np.empty(n)
    valid = np.zeros(n, dtype=bool)
    interp = np.zeros(n, dtype=bool)
    for i, line in enumerate(text[1:]):
        lineno = i + 2
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc.msg}", line=lineno, path=spath) from exc
        if not isinstance(rec, dict):
            raise ParseError("sample must be a JSON object", line=lineno, path=spath)
        try:
            v = rec["valid"]
            if v is True:
                valid[i] = True
            elif v == "interp":
                interp[i] = True
            elif v is not False:
                raise ParseError(f"bad valid flag {v!r}", line=lineno, path=spath)
            t[i] = _num(rec, "t", lineno, spath, nullable=False)
            gx[i] = _num(rec, "gx", lineno, spath, nullable=not valid[i])
            gy[i] = _num(rec, "gy", lineno, spath, nullable=not valid[i])
            pupil[i] = _num(rec, "pupil", lineno, spath, nullable=not valid[i])
            lid[i] = _num(rec, "lid", lineno, spath, nullable=False)
        except KeyError as exc:
            raise ParseError(f"missing field {exc}", line=lineno, path=spath) from exc
    try:
        return Trace(t, gx, gy, pupil, lid, valid, interp, rate=rate, stream_id=stream_id)
    except InvariantViolation as exc:
        # sample index -> file line (header is line 1)
        line = None if exc.line is None else exc.line + 2
        msg = str(exc).split(": ", 1)[-1] if exc.line is not None else str(exc)
        raise InvariantViolation(msg, line=line, path=spath) from exc


# -------------------------------------------------------------- session files


def write_session(manifest: SessionManifest, traces: dict, trains: list, directory: Path) -> list[Path]:
    """Write manifest.json, probe trains and traces into ``directory``.

    File names are taken from the manifest's refs (relative to ``directory``).
    Returns the written paths.
    """
    if not traces or not any(len(v) for v in traces.values()):
        raise EmptySession("session has no traces")
    if set(traces) != set(manifest.trace_refs):
        raise InvariantViolation(f"trace streams {sorted(traces)} do not match manifest {sorted(manifest.trace_refs)}")
    if len(trains) != len(manifest.probe_train_refs):
        raise InvariantViolation("probe train count does not match manifest")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for train, ref in zip(trains, manifest.probe_train_refs):
        p = directory / ref
        write_probe_train(train, p)
        written.append(p)
    for sid in STREAMS:
        if sid not in traces:
            continue
        refs = manifest.trace_refs[sid]
        if len(traces[sid]) != len(refs):
            raise InvariantViolation(f"stream {sid}: {len(traces[sid])} traces for {len(refs)} refs")
        for trace, ref in zip(traces[sid], refs):
            if trace.stream_id != sid:
                raise InvariantViolation(f"trace tagged {trace.stream_id} listed under {sid}")
            p = directory / ref
            write_trace(trace, p)
            written.append(p)
    mp = directory / "manifest.json"
    mp.write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")
    written.append(mp)
    return written


def read_session(manifest_path: Path) -> Session:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(str(manifest_path))
    try:
        d = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=str(manifest_path)) from exc
    try:
        manifest = SessionManifest.from_dict(d)
    except ParseError as exc:
        raise type(exc)(str(exc), path=str(manifest_path)) from exc
    base = manifest_path.parent
    trains: list[ProbeTrain] = []
    for ref in manifest.probe_train_refs:
        p = base / ref
        if not p.exists():
            raise MissingFile(str(p))
        trains.append(read_probe_train(p))
    traces = {}
    for sid in STREAMS:
        if sid not in manifest.trace_refs:
            continue
        out = []
        for ref in manifest.trace_refs[sid]:
            tr = read_trace(base / ref)
            if tr.stream_id != sid:
                raise InvariantViolation(f"trace header says {tr.stream_id}, manifest says {sid}", path=str(base / ref))
            out.append(tr)
        traces[sid] = out
    return Session(manifest, traces, trains)
