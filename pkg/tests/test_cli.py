import json

import numpy as np
import pytest

from rmtdetect.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main


def _small_csvs(tmp_path, n=6, total=700, seed=0):
    rng = np.random.default_rng(seed)
    p = 50 + rng.normal(0, 0.3, (n, total))
    p[2, 300:] += 15
    u = 1 - 1e-4 * p + rng.normal(0, 1e-3, (n, total))
    header = "timestamp," + ",".join(str(i + 1) for i in range(n))
    stamps = np.arange(total) * 10.0
    paths = []
    for name, x in (("P.csv", p), ("U.csv", u)):
        path = tmp_path / name
        np.savetxt(path, np.column_stack([stamps, x.T]), delimiter=",", header=header,
                   comments="", fmt="%.10g")
        paths.append(str(path))
    return paths


def _digests(root):
    m = json.loads((root / "manifest.json").read_text())
    return {o["path"]: o["sha256"] for o in m["outputs"]}, m["config_hash"]


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--builtin", "simple", "--seed", "3", "--out-dir", str(a)]) == 0
    assert main(["simulate", "--builtin", "simple", "--seed", "3", "--out-dir", str(b)]) == 0
    assert _digests(a) == _digests(b)
    assert (a / "P.csv").read_bytes() == (b / "P.csv").read_bytes()


def test_simulate_scenario_round_trip(tmp_path):
    a = tmp_path / "a"
    main(["simulate", "--builtin", "simple", "--out-dir", str(a)])
    b = tmp_path / "b"
    assert main(["simulate", "--scenario", str(a / "scenario.json"), "--out-dir", str(b)]) == 0
    assert (a / "P.csv").read_bytes() == (b / "P.csv").read_bytes()


def test_missing_scenario_file_is_input_error(tmp_path, capsys):
    code = main(["simulate", "--scenario", str(tmp_path / "nope.json"),
                 "--out-dir", str(tmp_path / "o")])
    assert code == EXIT_INPUT
    assert "error" in capsys.readouterr().err


def test_detect_small_data_flags_stepped_node(tmp_path):
    p, u = _small_csvs(tmp_path)
    out = tmp_path / "det"
    code = main(["detect", p, u, "--T", "60", "--feeder", "none", "--jobs", "1",
                 "--out-dir", str(out)])
    assert code == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    nodes = {e["node"] for e in rep["events"]}
    assert nodes == {"3"}
    (t_cp,) = [e["t_cp"] for e in rep["events"]]
    assert abs(t_cp - 300) <= 5
    assert (out / "traces" / "node_3.csv").exists()
    digests, _ = _digests(out)
    assert "report.json" in digests


def test_epsilon_monotone_in_h1_count(tmp_path):
    p, u = _small_csvs(tmp_path, seed=1)
    counts = []
    for eps in ("1.0", "1.96", "4.0"):
        out = tmp_path / f"e{eps}"
        main(["detect", p, u, "--T", "60", "--feeder", "none", "--jobs", "1",
              "--epsilon", eps, "--out-dir", str(out)])
        counts.append(sum(json.loads((out / "report.json").read_text())["h1_windows"].values()))
    assert counts[0] >= counts[1] >= counts[2]


def test_detect_mismatched_nodes_is_input_error(tmp_path):
    p, _ = _small_csvs(tmp_path)
    other = tmp_path / "sub"
    other.mkdir()
    _, u = _small_csvs(other, n=5)
    assert main(["detect", p, u, "--feeder", "none", "--out-dir", str(tmp_path / "o")]) == 2


def test_estimate_empty_library_is_numeric_error(tmp_path):
    p, _ = _small_csvs(tmp_path)
    tlp = tmp_path / "tlp.json"
    tlp.write_text(json.dumps({"schema": 1, "patterns": []}))
    rep = tmp_path / "report.json"
    rep.write_text(json.dumps({"events": []}))
    code = main(["estimate", p, str(tlp), str(rep), "--out-dir", str(tmp_path / "o")])
    assert code == EXIT_NUMERIC


@pytest.mark.parametrize("law,key", [("mp", "ks_distance"), ("ring", "fraction_inside")])
def test_rmt_check_laws(tmp_path, law, key):
    out = tmp_path / law
    assert main(["rmt-check", "--gaussian", "100", "400", "--law", law,
                 "--out-dir", str(out)]) == 0
    d = json.loads((out / "diagnostics.json").read_text())
    if law == "mp":
        assert d[key] < 0.05
    else:
        assert d[key] >= 0.95


def test_rmt_check_clt(tmp_path):
    out = tmp_path / "clt"
    assert main(["rmt-check", "--gaussian", "50", "200", "--law", "clt", "--reps", "300",
                 "--out-dir", str(out)]) == 0
    d = json.loads((out / "diagnostics.json").read_text())
    assert d["pass"]


def test_rmt_check_on_csv(tmp_path):
    _, u = _small_csvs(tmp_path)
    out = tmp_path / "csv"
    assert main(["rmt-check", u, "--law", "mp", "--quantity", "voltageMagnitude",
                 "--out-dir", str(out)]) == 0
    assert json.loads((out / "diagnostics.json").read_text())["N"] == 6


def test_likelihood_ratio_at_c_one_is_numeric_error(tmp_path):
    code = main(["rmt-check", "--gaussian", "50", "50", "--law", "clt", "--reps", "10",
                 "--phi", "likelihoodRatio", "--out-dir", str(tmp_path / "o")])
    assert code == EXIT_NUMERIC


def test_rmt_check_needs_input(tmp_path):
    assert main(["rmt-check", "--out-dir", str(tmp_path / "o")]) == EXIT_INPUT


def test_estimate_malformed_report_is_input_error(tmp_path):
    main(["simulate", "--builtin", "simple", "--out-dir", str(tmp_path / "s")])
    rep = tmp_path / "report.json"
    rep.write_text(json.dumps({"events": []}))
    code = main(["estimate", str(tmp_path / "s" / "P.csv"), str(tmp_path / "s" / "tlp.json"),
                 str(rep), "--out-dir", str(tmp_path / "o")])
    assert code == EXIT_INPUT
