"""Release acceptance suite: one test per criterion, each checked at its stated tolerance.

Every test records its outcome in ``ACCEPTANCE``; the terminal summary hook
in conftest prints one PASS/FAIL line per criterion.
"""

import itertools
import math
import time

import numpy as np
import pytest
from oracles import auc, brute_force_lof, ocsvm_qp_oracle
from strategies import random_session

from ocuprobe import cli
from ocuprobe import evalharness as eh
from ocuprobe.ensemble import (
    IMPAIRED,
    OMITTED,
    SOBER_VERDICT,
    CheckupVerdict,
    aggregate_subject,
    fuse_streams,
    majority_verdict,
)
from ocuprobe.errors import ParseError
from ocuprobe.learners import GbtConfig, train_gbt, train_iforest, train_lof, train_ocsvm
from ocuprobe.learners.iforest import c_factor, score_from_path_length
from ocuprobe.learners.ocsvm import kkt_residual, rbf_kernel
from ocuprobe.telemetry import read_session, read_trace, write_session, write_trace

ACCEPTANCE: dict = {}


class Criterion:
    """Collects named checks for one criterion and records the verdict."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.failures: list[str] = []
        self.notes: list[str] = []
        self.t0 = time.perf_counter()

    def check(self, ok: bool, what: str) -> None:
        (self.notes if ok else self.failures).append(what)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        if exc is not None:
            self.failures.append(f"{exc_type.__name__}: {exc}")
        ok = not self.failures
        detail = "; ".join(self.failures) if not ok else "; ".join(self.notes)
        ACCEPTANCE[self.number] = (ok, f"{self.title} ({elapsed:.1f} s): {detail}")
        if exc is None:
            assert ok, "; ".join(self.failures)
        return False


def _runtime(c: Criterion, limit: float) -> None:
    elapsed = time.perf_counter() - c.t0
    c.check(elapsed < limit, f"runtime {elapsed:.2f} s < {limit:g} s")


# --------------------------------------------------------------- 1: LOF


def test_criterion_1_lof_oracle():
    with Criterion(1, "LOF oracle equivalence") as c:
        worst = 0.0
        for s in range(20):
            X = np.random.default_rng(s).normal(size=(50, 10))
            got = train_lof(X, k=5).train_lof
            ref = brute_force_lof(X, 5)
            worst = max(worst, float(np.max(np.abs(got - ref))))
        c.check(worst <= 1e-9, f"max |LOF - brute force| = {worst:.1e} over 20 datasets")
        _runtime(c, 5.0)


# ----------------------------------------------------------- 2: iForest


def test_criterion_2_iforest():
    with Criterion(2, "Isolation-forest analytics") as c:
        c.check(c_factor(2) == 1.0, "c(2) == 1.0 exactly")
        fixed = [float(score_from_path_length(c_factor(psi), psi)) for psi in (2, 64, 256)]
        c.check(all(v == 0.5 for v in fixed), "s(x) == 0.5 exactly at E[h] = c(psi)")
        wins = 0
        for s in range(100):
            rng = np.random.default_rng(s)
            X = np.vstack([rng.normal(size=(256, 10)), np.full((1, 10), 50.0 / math.sqrt(10))])
            scores = train_iforest(X, n_trees=100, psi=256, seed=s).score(X)
            wins += bool(scores[-1] > scores[:-1].max())
        c.check(wins >= 99, f"far outlier beats all 256 inliers in {wins}/100 seeds")
        _runtime(c, 10.0)


# ------------------------------------------------------------ 3: OC-SVM


def _full_alpha(model, X):
    alpha = np.zeros(len(X))
    for sv, a in zip(model.support_vectors, model.alphas):
        alpha[np.flatnonzero(np.all(X == sv, axis=1))[0]] = a
    return alpha


def test_criterion_3_ocsvm():
    with Criterion(3, "OC-SVM solver") as c:
        rng = np.random.default_rng(2024)
        worst_a = worst_rho = worst_kkt = 0.0
        for _ in range(20):
            X = rng.normal(size=(5, 3))
            nu = float(rng.uniform(0.1, 0.95))
            gamma = float(rng.choice([0.1, 0.5, 2.0]))
            m = train_ocsvm(X, nu=nu, gamma=gamma)
            K = rbf_kernel(X, X, gamma)
            a_ref, rho_ref = ocsvm_qp_oracle(K, nu)
            alpha = _full_alpha(m, X)
            worst_a = max(worst_a, float(np.max(np.abs(alpha - a_ref))))
            worst_rho = max(worst_rho, abs(m.rho - rho_ref))
            worst_kkt = max(worst_kkt, kkt_residual(alpha, K @ alpha, 1 / (nu * 5)))
        c.check(worst_a <= 1e-5 and worst_rho <= 1e-5, f"20 five-point problems: |da| {worst_a:.1e}, |drho| {worst_rho:.1e}")
        worst_frac = {}
        for nu in (0.05, 0.1, 0.2):
            fr = []
            for s in range(10):
                X = np.random.default_rng(s).normal(size=(200, 10))
                m = train_ocsvm(X, nu=nu)
                worst_kkt = max(worst_kkt, m.kkt_residual)
                fr.append(float(np.mean(m.decision(X) < 0)))
            worst_frac[nu] = max(fr)
        c.check(all(f <= nu + 0.05 for nu, f in worst_frac.items()),
                "outlier fraction " + ", ".join(f"nu={nu}: {f:.3f}" for nu, f in worst_frac.items()))
        c.check(worst_kkt <= 1e-6, f"max KKT residual {worst_kkt:.1e}")


# --------------------------------------------------------------- 4: GBT


def test_criterion_4_gbt():
    with Criterion(4, "Gradient boosting") as c:
        rng = np.random.default_rng(0)
        X = rng.normal(size=(300, 10))
        y = (X[:, 0] + rng.normal(size=300) > 0).astype(float)
        m = train_gbt(X, y, GbtConfig(n_rounds=100))
        # initial loss followed by the loss after each round
        steps = np.diff(np.asarray(m.train_loss))
        c.check(len(steps) == 100 and bool(np.all(steps <= 0)), f"logloss non-increasing in all {len(steps)} rounds")
        Xs = rng.uniform(-1, 1, size=(200, 2))
        ys = (Xs[:, 0] + 0.5 * Xs[:, 1] > 0).astype(float)
        a = auc(train_gbt(Xs, ys).predict_proba(Xs), ys)
        c.check(a >= 0.99, f"separable toy AUC {a:.4f}")
        Xb = rng.normal(size=(40, 3))
        yb = np.tile([0.0, 1.0], 20)
        mb = train_gbt(Xb, yb, GbtConfig(n_rounds=1, max_depth=0))
        c.check(mb.trees[0].value.tolist() == [0.0], "balanced first leaf weight == 0")


# ---------------------------------------------------------- 5: ensemble


def _v(truth, verdict, score, thr, i, sid, stream):
    return CheckupVerdict(sid, 1, i, stream, (verdict == IMPAIRED,) * 4, score, thr, verdict, truth)


def test_criterion_5_ensemble_rules():
    with Criterion(5, "Ensemble rules") as c:
        ok = all(
            majority_verdict(p) == (IMPAIRED if sum(votes) >= 2 else SOBER_VERDICT)
            for votes in itertools.product((False, True), repeat=4)
            for p in itertools.permutations(votes)
        )
        c.check(ok, "all 16 vote vectors and permutations")
        ok = True
        for nc, nw in itertools.product(range(11), repeat=2):
            if nc + nw:
                vs = [_v(True, IMPAIRED, 0.9, 0.5, i, "S", "Native") for i in range(nc)]
                vs += [_v(True, SOBER_VERDICT, 0.1, 0.5, nc + i, "S", "Native") for i in range(nw)]
                ok &= (aggregate_subject(vs).outcome == OMITTED) == (nc == nw)
        c.check(ok, "omission exactly at ties for counts <= 10")
        rng = np.random.default_rng(5)
        worse = 0
        for trial in range(1000):
            n = int(rng.integers(1, 9))
            truth = rng.random(n) < 0.5
            thr_n, thr_c = rng.uniform(0.3, 0.7, 2)
            sn, sc = rng.random(n), rng.random(n)
            nat = [_v(bool(t), IMPAIRED if x >= thr_n else SOBER_VERDICT, float(x), float(thr_n), i, "S", "Native")
                   for i, (t, x) in enumerate(zip(truth, sn))]
            cld = [_v(bool(t), IMPAIRED if x >= thr_c else SOBER_VERDICT, float(x), float(thr_c), i, "S", "Cloud")
                   for i, (t, x) in enumerate(zip(truth, sc))]
            single = min(aggregate_subject(nat).outcome == OMITTED, aggregate_subject(cld).outcome == OMITTED)
            fused = aggregate_subject(fuse_streams(nat, cld), margin_tie_break=True).outcome == OMITTED
            worse += fused > single
        c.check(worse == 0, f"fusion added an omission in {worse}/1000 score sets")


# -------------------------------------------------- 6 and 7: full study


@pytest.fixture(scope="module")
def study_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    runs = {}
    for jobs in (1, 8):
        t0 = time.perf_counter()
        code = cli.main(["study", "--seed", "7", "--jobs", str(jobs), "--out", str(root / f"jobs{jobs}")])
        runs[jobs] = (code, time.perf_counter() - t0, root / f"jobs{jobs}")
    return runs


@pytest.mark.slow
def test_criterion_6_synthetic_study(study_runs):
    with Criterion(6, "Synthetic study, seed 7") as c:
        code, elapsed, out = study_runs[1]
        assert code == 0
        t = eh.parse_report_csv((out / "report.csv").read_text())
        acc, fp = t.value("Overall"), t.value("Baseline")
        alc, thc = t.value("Alcohol"), t.value("THC")
        tot = t.value("TimeOnTask (high data)")
        c.check(acc is not None and acc >= 0.75, f"fused accuracy {acc:.3f}")
        c.check(fp is not None and fp <= 0.10, f"fused FP {fp:.3f}")
        c.check(alc is not None and thc is not None and alc >= thc, f"alcohol {alc:.3f} >= THC {thc:.3f}")
        c.check(tot is not None and tot >= 0.9, f"time-on-task high data {tot:.3f}")
        c.check(elapsed < 120.0, f"study runtime {elapsed:.1f} s < 120 s")


@pytest.mark.slow
def test_criterion_7_determinism(study_runs):
    with Criterion(7, "Determinism across worker counts") as c:
        (c1, _, a), (c8, _, b) = study_runs[1], study_runs[8]
        assert c1 == 0 and c8 == 0
        same = (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
        c.check(same, "report.csv byte-identical for --jobs 1 and --jobs 8")


# --------------------------------------------------------- 8: telemetry


def test_criterion_8_telemetry_round_trip(tmp_path):
    with Criterion(8, "Telemetry round-trip") as c:
        mismatches = 0
        for s in range(1000):
            manifest, traces, trains = random_session(s)
            d = tmp_path / f"s{s}"
            write_session(manifest, traces, trains, d)
            back = read_session(d / "manifest.json")
            mismatches += not (back.manifest == manifest and back.traces == traces and back.trains == trains)
        c.check(mismatches == 0, f"{1000 - mismatches}/1000 sessions round-trip to equality")

        rng = np.random.default_rng(8)
        located = 0
        for s in range(20):
            manifest, traces, _ = random_session(10_000 + s)
            stream = next(iter(traces))
            path = tmp_path / "s0" / "probe.jsonl"
            write_trace(traces[stream][0], path)
            lines = path.read_text().splitlines()
            bad = int(rng.integers(1, len(lines)))  # never the header
            lines[bad] = lines[bad][: len(lines[bad]) // 2]
            path.write_text("\n".join(lines) + "\n")
            try:
                read_trace(path)
            except ParseError as exc:
                located += exc.line == bad + 1 and f":{bad + 1}" in str(exc)
        mpath = tmp_path / "s1" / "manifest.json"
        text = mpath.read_text().splitlines()
        text[2] = text[2] + " garbage"
        mpath.write_text("\n".join(text) + "\n")
        try:
            read_session(mpath)
            manifest_line = None
        except ParseError as exc:
            manifest_line = exc.line
        c.check(located == 20, f"{located}/20 truncated trace lines reported at their line number")
        c.check(manifest_line == 3, f"manifest syntax error reported at line {manifest_line}")
