import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import auc

from ocuprobe.ensemble import (
    CORRECT,
    FUSED,
    IMPAIRED,
    OMITTED,
    SOBER_VERDICT,
    WRONG,
    CheckupVerdict,
    DriverBaseline,
    JsonlSink,
    ListSink,
    aggregate_subject,
    calibrate_driver,
    emit_intervention,
    fuse_streams,
    majority_verdict,
    run_checkup,
    run_checkups,
    train_population,
    write_verdict_csv,
)
from ocuprobe.errors import DegenerateLabels, EmptyInput, KeyMismatch, TooFewCheckups
from ocuprobe.features import N_FEATURES, extract_features, normalize
from ocuprobe.learners import GbtConfig, model_to_dict, train_gbt
from ocuprobe.probe import ProbeConfig, generate_probe_train
from ocuprobe.synthdriver import ImpairmentSpec, sample_profile, simulate_trace
from ocuprobe.telemetry import ALCOHOL

# ------------------------------------------------------------- voting


class TestVoting:
    @pytest.mark.parametrize(
        "votes,verdict",
        [((1, 1, 1, 0), IMPAIRED), ((0, 0, 0, 0), SOBER_VERDICT), ((1, 1, 0, 0), IMPAIRED), ((1, 0, 0, 0), SOBER_VERDICT)],
    )
    def test_examples(self, votes, verdict):
        assert majority_verdict(votes) == verdict

    def test_exhaustive_and_permutation_invariant(self):
        for votes in itertools.product((False, True), repeat=4):
            expected = IMPAIRED if sum(votes) >= 2 else SOBER_VERDICT
            for perm in itertools.permutations(votes):
                assert majority_verdict(perm) == expected


def _v(correct_truth=True, verdict=IMPAIRED, score=0.6, thr=0.5, key=(0, 0), sid="S01", stream="Native", onset=0.0):
    return CheckupVerdict(sid, key[0], key[1], stream, (verdict == IMPAIRED,) * 4, score, thr, verdict, correct_truth, onset)


class TestAggregate:
    def test_omission_rule_exhaustive(self):
        for nc in range(11):
            for nw in range(11):
                if nc + nw == 0:
                    continue
                vs = [_v(True, IMPAIRED) for _ in range(nc)] + [_v(True, SOBER_VERDICT) for _ in range(nw)]
                r = aggregate_subject(vs)
                assert (r.n_correct, r.n_wrong) == (nc, nw)
                assert r.outcome == (CORRECT if nc > nw else WRONG if nc < nw else OMITTED)

    def test_examples(self):
        assert aggregate_subject([_v()] * 3 + [_v(verdict=SOBER_VERDICT)]).outcome == CORRECT
        assert aggregate_subject([_v()] * 2 + [_v(verdict=SOBER_VERDICT)] * 2).outcome == OMITTED

    def test_empty(self):
        with pytest.raises(EmptyInput):
            aggregate_subject([])


# -------------------------------------------------------------- fusion


class TestFusion:
    def test_boundary_resolves_impaired(self):
        a = _v(verdict=IMPAIRED, score=0.9, thr=0.5)
        b = _v(verdict=SOBER_VERDICT, score=0.1, thr=0.5, stream="Cloud")
        (f,) = fuse_streams([a], [b])
        assert f.mean_score == 0.5 and f.score_threshold == 0.5
        assert f.verdict == IMPAIRED
        assert f.stream_id == FUSED
        assert len(f.votes) == 8

    def test_identical_streams(self):
        rng = np.random.default_rng(0)
        native = [_v(verdict=IMPAIRED if rng.random() < 0.5 else SOBER_VERDICT, score=rng.random(), key=(1, i)) for i in range(20)]
        fused = fuse_streams(native, native)
        assert [f.verdict for f in fused] == [v.verdict for v in native]
        assert [f.mean_score for f in fused] == [v.mean_score for v in native]

    def test_fused_tie_becomes_decisive(self):
        # each stream gets two of four checkups right; the fused scores lean towards the truth
        truth = [True, True, False, False]

        def stream(scores, name):
            return [_v(t, IMPAIRED if x >= 0.5 else SOBER_VERDICT, x, key=(1, i), stream=name)
                    for i, (t, x) in enumerate(zip(truth, scores))]

        native = stream([0.9, 0.4, 0.45, 0.7], "Native")
        cloud = stream([0.4, 0.8, 0.2, 0.52], "Cloud")
        assert aggregate_subject(native).outcome == OMITTED
        assert aggregate_subject(cloud).outcome == OMITTED
        fused = fuse_streams(native, cloud)
        assert aggregate_subject(fused, margin_tie_break=True).outcome in (CORRECT, WRONG)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=1000, deadline=None)
    def test_fusion_never_adds_omissions(self, seed):
        rng = np.random.default_rng(seed)
        n_subj = int(rng.integers(1, 6))
        counts = {"n": 0, "c": 0, "f": 0}
        for s in range(n_subj):
            n = int(rng.integers(1, 9))
            truth = rng.random(n) < 0.5
            thr_n, thr_c = rng.uniform(0.3, 0.7, 2)
            sn, sc = rng.random(n), rng.random(n)
            native = [_v(bool(t), IMPAIRED if x >= thr_n else SOBER_VERDICT, float(x), float(thr_n), (1, i), f"S{s}")
                      for i, (t, x) in enumerate(zip(truth, sn))]
            cloud = [_v(bool(t), IMPAIRED if x >= thr_c else SOBER_VERDICT, float(x), float(thr_c), (1, i), f"S{s}", "Cloud")
                     for i, (t, x) in enumerate(zip(truth, sc))]
            counts["n"] += aggregate_subject(native).outcome == OMITTED
            counts["c"] += aggregate_subject(cloud).outcome == OMITTED
            counts["f"] += aggregate_subject(fuse_streams(native, cloud), margin_tie_break=True).outcome == OMITTED
        assert counts["f"] <= min(counts["n"], counts["c"])

    def test_key_mismatch(self):
        with pytest.raises(KeyMismatch):
            fuse_streams([_v(key=(1, 0))], [_v(key=(1, 1))])
        with pytest.raises(KeyMismatch):
            fuse_streams([_v(key=(1, 0)), _v(key=(1, 0))], [_v(key=(1, 0))])


# --------------------------------------------------------- interventions


class TestInterventions:
    def _stream(self, pattern, shift=1):
        return [_v(verdict=IMPAIRED if c == "I" else SOBER_VERDICT, key=(shift, i), onset=1800.0 * i) for i, c in enumerate(pattern)]

    def test_examples(self):
        assert emit_intervention(self._stream("SSS")) == []
        assert [e.action for e in emit_intervention(self._stream("I"))] == ["Notify"]
        assert [e.action for e in emit_intervention(self._stream("III"))] == ["Notify", "Alert", "Escalate"]

    def test_reset_on_sober_and_shift(self):
        evs = emit_intervention(self._stream("IISIIII") + self._stream("II", shift=2))
        assert [e.level for e in evs] == [1, 2, 1, 2, 3, 3, 1, 2]
        assert [e.seq for e in evs] == list(range(8))

    def test_jsonl_sink_monotone(self, tmp_path):
        path = tmp_path / "ev.jsonl"
        emit_intervention(self._stream("IIS") + self._stream("IIII", shift=3), JsonlSink(path))
        rows = [json.loads(x) for x in path.read_text().splitlines()]
        assert len(rows) == 6
        t = [r["t"] for r in rows]
        assert t == sorted(t) and len(set(t)) == len(t)

    def test_list_sink(self):
        sink = ListSink()
        evs = emit_intervention(self._stream("II"), sink)
        assert sink.events == evs


# ------------------------------------------------- calibration on simulation


def _features(profile, lam, seeds):
    rows = []
    for s in seeds:
        train = generate_probe_train(ProbeConfig(), s)
        tr = simulate_trace(profile, ImpairmentSpec(ALCOHOL, lam), train, s)
        rows.append(extract_features(tr, train).as_array())
    return np.array(rows)


@pytest.fixture(scope="module")
def cohort():
    """Five simulated drivers: 30 sober calibration checkups, 15 sober and 15 impaired (severity 0.7) labeled ones."""
    out = {}
    for i in range(5):
        p = sample_profile(100 + i)
        base = 10_000 * i
        calib = _features(p, 0.0, range(base, base + 30))
        sober = _features(p, 0.0, range(base + 30, base + 45))
        imp = _features(p, 0.7, range(base + 45, base + 60))
        out[f"S{i + 1}"] = (p, calib, sober, imp)
    return out


def _population_data(cohort, baselines):
    data = {}
    for sid, (_, _, sober, imp) in cohort.items():
        Z = normalize(np.vstack([sober, imp]), baselines[sid].stats)
        data[sid] = (Z, np.r_[np.zeros(len(sober)), np.ones(len(imp))])
    return data


class TestCalibration:
    def test_ten_vectors_flag_budget(self, cohort):
        calib = cohort["S1"][1][:10]
        b = calibrate_driver("S1", calib, seed=1, nu=0.1)
        Z = normalize(calib, b.stats)
        thr = b.thresholds()
        for name, m in b.one_class_models().items():
            s = m.train_lof if name == "lof" else m.score(Z)
            assert np.mean(s > thr[name]) <= 0.2 + 1e-9

    def test_nine_vectors(self, cohort):
        with pytest.raises(TooFewCheckups):
            calibrate_driver("S1", cohort["S1"][1][:9])

    def test_deterministic_and_persistent(self, cohort, tmp_path):
        a = calibrate_driver("S1", cohort["S1"][1], seed=3)
        b = calibrate_driver("S1", cohort["S1"][1], seed=3)
        assert a.to_dict() == b.to_dict()
        a.save(tmp_path / "b.json")
        back = DriverBaseline.load(tmp_path / "b.json")
        X = cohort["S1"][3]
        pop = train_gbt(np.vstack([X, cohort["S1"][2]]), np.r_[np.ones(15), np.zeros(15)], GbtConfig(n_rounds=5))
        assert run_checkups(X, back, pop) == run_checkups(X, a, pop)

    def test_population_excludes_holdout(self, cohort):
        baselines = {sid: calibrate_driver(sid, c[1]) for sid, c in list(cohort.items())[:3]}
        data = _population_data({k: cohort[k] for k in baselines}, baselines)
        cfg = GbtConfig(n_rounds=10)
        m = train_population(data, "S3", cfg)
        direct = train_gbt(np.vstack([data["S1"][0], data["S2"][0]]), np.r_[data["S1"][1], data["S2"][1]], cfg)
        assert model_to_dict(m) == model_to_dict(direct)
        # poisoning the holdout's rows cannot change the model
        data["S3"] = (np.full_like(data["S3"][0], np.nan), data["S3"][1])
        assert model_to_dict(train_population(data, "S3", cfg)) == model_to_dict(direct)

    def test_holdout_only_impaired_subject(self):
        data = {
            "S1": (np.zeros((20, N_FEATURES)), np.zeros(20)),
            "S2": (np.ones((20, N_FEATURES)), np.zeros(20)),
            "S3": (np.ones((20, N_FEATURES)), np.ones(20)),
        }
        with pytest.raises(DegenerateLabels):
            train_population(data, "S3")

    def test_population_separates_holdout(self, cohort):
        baselines = {sid: calibrate_driver(sid, c[1]) for sid, c in cohort.items()}
        data = _population_data(cohort, baselines)
        for sid in cohort:
            m = train_population(data, sid)
            Z, y = data[sid]
            assert auc(m.predict_proba(Z), y) >= 0.9

    def test_held_out_sober_false_positive_rate(self, cohort):
        nu = 0.1
        baselines = {sid: calibrate_driver(sid, c[1], nu=nu) for sid, c in cohort.items()}
        data = _population_data(cohort, baselines)
        flagged = total = 0
        for i, (sid, (p, _, _, _)) in enumerate(cohort.items()):
            held = _features(p, 0.0, range(900_000 + 1000 * i, 900_000 + 1000 * i + 100))
            vs = run_checkups(held, baselines[sid], train_population(data, sid))
            flagged += sum(v.impaired for v in vs)
            total += len(vs)
        assert total >= 500
        assert flagged / total <= nu + 0.1

    def test_run_checkup_fields(self, cohort):
        b = calibrate_driver("S1", cohort["S1"][1])
        pop = train_gbt(np.vstack([cohort["S1"][2], cohort["S1"][3]]), np.r_[np.zeros(15), np.ones(15)], GbtConfig(n_rounds=5))
        v = run_checkup(cohort["S1"][3][0], b, pop, subject_id="S1", shift_index=4, checkup_index=2, stream_id="Native", truth=True)
        assert v.key == ("S1", 4, 2)
        assert len(v.votes) == 4 and np.isfinite(v.mean_score)
        assert v.verdict == majority_verdict(v.votes)


def test_verdict_csv(tmp_path):
    vs = [_v(key=(1, 0)), _v(verdict=SOBER_VERDICT, key=(1, 1))]
    fused = fuse_streams(vs, vs)
    write_verdict_csv(vs + fused, tmp_path / "v.csv")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0].startswith("subject,shift,checkup,stream")
    assert len(lines) == 5
    # fused rows report per-model impaired counts over both streams
    assert lines[3].split(",")[5:9] == ["2", "2", "2", "2"]
