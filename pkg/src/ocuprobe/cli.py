"""Command-line entry point: simulate, calibrate, checkup, study, report.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 upstream data invariant violated (including a missing baseline).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import evalharness as eh
from .ensemble import DriverBaseline, fuse_streams, run_checkups, train_population, write_verdict_csv
from .errors import (
    ConfigError,
    DegenerateLabels,
    MissingBaseline,
    MissingFile,
    OcuprobeError,
)
from .learners import load_model, save_model
from .synthdriver import profile_to_dict, sample_profile
from .telemetry import CLOUD, NATIVE, SOBER, STREAMS, SessionManifest, read_session, write_session

log = logging.getLogger("ocuprobe")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4


# ---------------------------------------------------------------- config


def load_config(path: str | None, seed: int | None = None) -> eh.StudyConfig:
    """Read a YAML/JSON study config; ``seed`` from the command line wins."""
    d = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    if seed is not None:
        d["seed"] = seed
    return eh.StudyConfig.from_dict(d)


# --------------------------------------------------------------- commands


def _shift_manifest(sid: str, shift: eh.ShiftPlan, n: int) -> SessionManifest:
    sev = max(shift.severities, default=0.0)
    cond = shift.condition if sev > 0 else SOBER
    return SessionManifest(
        subject_id=sid,
        shift_index=shift.shift_index,
        condition=cond,
        severity=sev,
        probe_train_refs=[f"train_{c:03d}.json" for c in range(n)],
        trace_refs={s: [f"{s.lower()}_{c:03d}.jsonl" for c in range(n)] for s in STREAMS},
        checkup_onsets=shift.onsets,
        checkup_severities=shift.severities,
    )


def cmd_simulate(args, config: eh.StudyConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = {"config": config.to_dict(), "subjects": []}
    for i in range(config.n_subjects):
        sid = eh.subject_id(i)
        profile = sample_profile(eh._int_seed(eh._seed(config, i, eh._TAG_PROFILE)))
        cohort["subjects"].append({"subject_id": sid, "profile": profile_to_dict(profile)})
        by_shift: dict = {}
        for shift, c, train, sim in eh.iter_checkups(config, i):
            entry = by_shift.setdefault(shift.shift_index, (shift, [], {s: [] for s in STREAMS}))
            entry[1].append(train)
            for s in STREAMS:
                entry[2][s].append(sim.stream(s))
        for idx, (shift, trains, traces) in sorted(by_shift.items()):
            manifest = _shift_manifest(sid, shift, len(trains))
            write_session(manifest, traces, trains, out / sid / f"shift_{idx:02d}")
        log.info("simulated %s", sid)
    (out / "cohort.json").write_text(json.dumps(cohort, indent=1, sort_keys=True, default=eh._json_default) + "\n")
    return EXIT_OK


def _read_cohort(root: Path) -> list[tuple[str, list]]:
    subjects = sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("shift_*/manifest.json")))
    if not subjects:
        raise MissingFile(f"no subject session directories under {root}")
    out = []
    for sdir in subjects:
        sessions = [read_session(m) for m in sorted(sdir.glob("shift_*/manifest.json"))]
        out.append((sdir.name, sessions))
    return out


def cmd_calibrate(args, config: eh.StudyConfig) -> int:
    """Per-driver baselines and leave-one-subject-out population models from simulated sessions."""
    root = Path(args.sessions)
    if not root.exists():
        raise MissingFile(str(root))
    out = Path(args.out)
    cohort = _read_cohort(root)
    data = []
    for i, (sid, sessions) in enumerate(cohort):
        d = eh.subject_from_sessions(config, i, sid, sessions)
        data.append(eh.calibrate_subject(config, d))
    for d in data:
        mdir = out / d.subject_id
        mdir.mkdir(parents=True, exist_ok=True)
        for s in STREAMS:
            d.baselines[s].save(mdir / f"{s}_baseline.json")
            pop = {o.subject_id: eh.population_rows(o, s, config.truth_threshold) for o in data}
            try:
                model = train_population(pop, d.subject_id, config.gbt)
            except DegenerateLabels as exc:
                log.warning("%s %s: no population model (%s)", d.subject_id, s, exc)
                continue
            save_model(model, mdir / f"{s}_gbt.json")
        log.info("calibrated %s", d.subject_id)
    return EXIT_OK


def cmd_checkup(args, config: eh.StudyConfig) -> int:
    session = read_session(Path(args.session))
    m = session.manifest
    mdir = Path(args.models) / m.subject_id
    baselines, models = {}, {}
    for s in STREAMS:
        bpath = mdir / f"{s}_baseline.json"
        if not bpath.exists():
            raise MissingBaseline(f"no baseline for {m.subject_id} stream {s} at {bpath}; run calibrate first")
        baselines[s] = DriverBaseline.load(bpath)
        gpath = mdir / f"{s}_gbt.json"
        models[s] = load_model(gpath) if gpath.exists() else eh._AbstainModel()
    d = eh.subject_from_sessions(replace(config, calibration_shifts=0), 0, m.subject_id, [session])
    d.baselines.update(baselines)
    verdicts = {}
    for s in STREAMS:
        recs, X = d.rows(s, lambda r: True)
        verdicts[s] = run_checkups(X, baselines[s], models[s], eh._meta(d, recs, s, config.truth_threshold)) if recs else []
    fused = fuse_streams(verdicts[NATIVE], verdicts[CLOUD])
    rows = verdicts[NATIVE] + verdicts[CLOUD] + fused
    write_verdict_csv(rows, Path(args.out) if args.out else sys.stdout)
    if d.dropped:
        log.info("%d checkup(s) skipped for insufficient data", d.dropped)
    return EXIT_OK


def cmd_study(args, config: eh.StudyConfig) -> int:
    out = Path(args.out or f"study-seed{config.seed}")
    result = eh.run_study(config, jobs=args.jobs, out=out)
    sys.stdout.write(eh.render_text(result.table))
    return EXIT_OK


def cmd_report(args, config: eh.StudyConfig) -> int:
    src = Path(args.input)
    path = src / "report.csv" if src.is_dir() else src
    if not path.exists():
        raise MissingFile(str(path))
    table = eh.parse_report_csv(path.read_text())
    text, csv_text = eh.render_report(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "report.csv").write_text(csv_text)
    sys.stdout.write(text)
    return EXIT_OK


# ----------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, seed_required: bool = False, out_required: bool = False) -> None:
    p.add_argument("--seed", type=int, required=seed_required, help="master seed (overrides the config file)")
    p.add_argument("--config", help="YAML or JSON study configuration")
    p.add_argument("--out", required=out_required, help="output directory or file")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--verbose", "-v", action="count", default=0, help="more logging on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocuprobe", description="Ocular probe-response impairment screening.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate cohort sessions")
    _common(p, seed_required=True, out_required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit per-driver baselines and population models")
    p.add_argument("sessions", help="directory written by simulate")
    _common(p, out_required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("checkup", help="classify the checkups of one session")
    p.add_argument("session", help="session manifest.json")
    p.add_argument("--models", required=True, help="directory written by calibrate")
    _common(p)
    p.set_defaults(func=cmd_checkup)

    p = sub.add_parser("study", help="run the full synthetic study (default --out study-seed<SEED>)")
    _common(p, seed_required=True)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("report", help="render an existing results table")
    p.add_argument("input", help="study output directory or report.csv")
    _common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        config = load_config(args.config, args.seed)
        return args.func(args, config)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except (MissingFile, OSError) as exc:
        log.error("io: %s", exc)
        return EXIT_IO
    except OcuprobeError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
