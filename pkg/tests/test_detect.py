import json

import numpy as np
import pytest

from rmtdetect.detect import (
    ChangePointEvent,
    DetectionReport,
    DetectionThreshold,
    EventKindDetected,
    Hypothesis,
    LesTrace,
    attribute_and_classify,
    build_trace,
    build_ulp_step,
    consistency_ratios,
    event_periods,
    hypothesis_test,
    localize_changepoints,
    merged_support,
    noise_level,
    tol_match,
    unexplained_steps,
    window_noise_levels,
)
from rmtdetect.errors import DomainError, PairingError
from rmtdetect.estimate import LoadPattern
from rmtdetect.ingest import RawSeriesSet
from rmtdetect.les import LesValue, chebyshev_t2, likelihood_ratio
from rmtdetect.simulate import simple_scenario, simulate

TH = DetectionThreshold(1.96)


def _trace(z, T=100, step=1, label="t"):
    n = len(z)
    return LesTrace(np.arange(n) * step + T, np.asarray(z, float), np.zeros(n), np.ones(n),
                    label, T, step)


def _bump(n, centre, half=50, height=20.0):
    i = np.arange(n)
    return np.clip(height * (1 - np.abs(i - centre) / half), 0, None)


def test_noise_level_white_and_step(rng):
    x = rng.normal(0, 2.0, 20000)
    assert noise_level(x) == pytest.approx(2.0, rel=0.03)
    x[10000:] += 50
    assert noise_level(x) == pytest.approx(2.0, rel=0.03)


def test_window_noise_levels_match_scalar(rng):
    x = rng.normal(size=300)
    lv = window_noise_levels(x, 50, 7)
    assert lv[3] == pytest.approx(noise_level(x[21:71]))
    assert len(lv) == (300 - 50) // 7 + 1


def test_hypothesis_test():
    assert hypothesis_test(LesValue(3.0, 0.0, 1.0), TH) is Hypothesis.H1
    assert hypothesis_test(LesValue(1.0, 0.0, 1.0), TH) is Hypothesis.H0
    with pytest.raises(ValueError):
        DetectionThreshold(0)


def test_localize_symmetric_bump():
    z = _bump(1000, 450)
    (ev,) = localize_changepoints(_trace(z), TH)
    # window end 450 + 100 is the bump centre, so the change point is at 500
    assert ev.t_cp == 500 and ev.t_extreme == 550


def test_short_runs_ignored_and_close_runs_merged():
    z = np.zeros(1000)
    z[100:105] = 3.0
    z[400:440] = 3.0
    z[450:490] = 3.0
    evs = localize_changepoints(_trace(z), TH)
    assert len(evs) == 1 and evs[0].spike_span == (400, 489)


def test_monotone_in_epsilon():
    z = _bump(2000, 500, height=4.0) + _bump(2000, 1500, half=100, height=2.5)
    tr = _trace(z)
    assert tr.h1_mask(DetectionThreshold(3.0)).sum() <= tr.h1_mask(TH).sum()
    assert len(localize_changepoints(tr, DetectionThreshold(3.0))) == 1
    assert len(localize_changepoints(tr, TH)) == 2


def test_tol_match():
    assert tol_match(100, 1) == 10
    assert tol_match(100, 4) == 40


def test_pulse_gives_two_change_points_400_apart(rng):
    T, total = 100, 3000
    state = RawSeriesSet([str(i) for i in range(10)], 1.0, rng.normal(size=(10, total)))
    c = 50 + rng.normal(0, 0.3, total)
    c[1000:1400] -= 5
    tr = build_trace(state, T, 1, chebyshev_t2(), factor=c, node="x", seed=1, local_snr_db=-10)
    evs = localize_changepoints(tr, TH)
    assert len(evs) == 2
    assert evs[1].t_cp - evs[0].t_cp == pytest.approx(400, abs=5)
    assert evs[0].t_cp == pytest.approx(1000, abs=5)


def test_state_trace_in_band_on_noise(rng):
    state = RawSeriesSet([str(i) for i in range(20)], 1.0, rng.normal(size=(20, 1500)))
    tr = build_trace(state, 100, 5, chebyshev_t2())
    assert tr.n_rows == 20 and np.mean(~tr.h1_mask(TH)) > 0.95


def test_lr_domain_restriction(rng):
    square = RawSeriesSet([str(i) for i in range(20)], 1.0, rng.normal(size=(20, 200)))
    with pytest.raises(DomainError):
        build_trace(square, 20, 10, likelihood_ratio())
    assert len(build_trace(square, 40, 10, likelihood_ratio())) == 17


def test_unexplained_steps_pulse():
    flat = LoadPattern("flat", np.full(2000, 100.0))
    y = np.full(2000, 60.0) + np.random.default_rng(0).normal(0, 0.3, 2000)
    y[500:900] -= 5
    steps, coef = unexplained_steps(y, [flat], [500, 900, 1500])
    assert steps[0] == pytest.approx(-5, abs=0.1) and steps[1] == pytest.approx(5, abs=0.1)
    assert steps[2] == 0.0
    assert coef[0] == pytest.approx(0.6, abs=1e-3)


def test_unexplained_steps_ignore_routine_changes():
    lib = [LoadPattern.from_hourly("a", [10, 50, 20, 80], 100),
           LoadPattern.from_hourly("b", [30, 30, 90, 10], 100)]
    y = 0.4 * lib[0].profile + 0.7 * lib[1].profile
    steps, coef = unexplained_steps(y, lib, [100, 200, 300])
    np.testing.assert_array_equal(steps, 0.0)
    np.testing.assert_allclose(coef, [0.4, 0.7])


def test_consistency_separates_fraud():
    cfg = simple_scenario(1)
    tel = simulate(cfg)
    evs = [ChangePointEvent(n, t, 0, (0, 0), 0.0, step=s)
           for n, t, s in [("6", 5600, -5.0), ("14", 5600, -5.0), ("6", 6800, 5.0),
                           ("14", 6800, 5.0)]]
    ratios = consistency_ratios(evs, tel.power, tel.voltage, cfg.topology.voltage_sensitivity())
    assert all(0.7 < r < 1.4 for r in ratios.values())
    # a real load change leaves no trace in the residual
    p = tel.power.values.copy()
    p[5, 5600:6800] = tel.true_power[5, 5600:6800]
    real = RawSeriesSet(tel.power.node_ids, 9.0, p)
    r = consistency_ratios(evs, real, tel.voltage, cfg.topology.voltage_sensitivity())
    assert abs(r[id(evs[0])]) < 0.3 and abs(r[id(evs[2])]) < 0.3
    assert 0.7 < r[id(evs[1])] < 1.4


def _ev(node, t, kind, step):
    return ChangePointEvent(node, t, t + 50, (t, t + 90), 5.0, kind, step=step)


def test_periods_pairs_and_support():
    F, I = EventKindDetected.FRAUD, EventKindDetected.INVISIBLE
    evs = [_ev("6", 100, F, -1), _ev("6", 300, F, 1), _ev("20", 50, I, 2), _ev("20", 90, I, -2),
           _ev("31", 80, I, 3), _ev("31", 200, I, -3), _ev("9", 10, I, -1)]
    per = event_periods(evs)
    assert {"node": "6", "kind": "fraud", "start": 100, "end": 300} in per
    assert any(p["node"] == "9" and "error" in p for p in per)
    inv = [e for e in evs if e.kind is I]
    assert merged_support(inv) == [[50, 200]]
    u = build_ulp_step(inv[2:4], 400)
    assert u.profile[80:200].all() and not u.profile[:80].any()
    with pytest.raises(PairingError):
        build_ulp_step(inv, 400)
    with pytest.raises(PairingError):
        build_ulp_step([_ev("1", 1, I, 1), _ev("1", 5, I, 1)], 10)
    # hidden generation: a drop followed by a rise still pairs
    assert build_ulp_step([_ev("1", 2, I, -1), _ev("1", 5, I, 1)], 10).profile.sum() == 3


def test_literal_rules_without_measurements():
    n = 3000
    state = _trace(_bump(n, 1450))
    lib = [LoadPattern("p", np.r_[np.zeros(1500), np.ones(1500)])]
    nodes = {"1": _trace(_bump(n, 1450)), "2": _trace(_bump(n, 1450)),
             "3": _trace(_bump(n, 650))}
    nodes["2"].tau[:] = _bump(n, 2450)
    rep = attribute_and_classify(state, nodes, lib, TH)
    kinds = {e.node: e.kind for e in rep.events}
    assert kinds["1"] is EventKindDetected.TLP_TRANSITION and rep.by_node("1")[0].pattern == "p"
    assert kinds["3"] is EventKindDetected.FRAUD
    assert kinds["2"] is EventKindDetected.FRAUD


def test_report_round_trip(simple_run):
    rep = simple_run["report"]
    back = DetectionReport.from_dict(json.loads(rep.to_json()))
    assert [e.to_dict() for e in back.events] == [e.to_dict() for e in rep.events]
    assert back.window == {"N": 33, "T": 100, "dT": 1}
    assert rep.to_dict()["schema"] == 1


def test_simple_scenario_labels(simple_run):
    rep = simple_run["report"]
    assert {(e.node, e.kind) for e in rep.events} == {
        ("6", EventKindDetected.FRAUD), ("14", EventKindDetected.FRAUD)}
    assert sorted(p["node"] for p in rep.periods) == ["14", "6"]
    for p in rep.periods:
        assert p["kind"] == "fraud"
        assert abs(p["start"] - 5600) <= 5 and abs(p["end"] - 6800) <= 5
