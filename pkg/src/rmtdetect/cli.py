"""Command line: simulate -> detect -> estimate, plus standalone spectral diagnostics."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .detect import (
    DEFAULT_EPSILON,
    DEFAULT_SNR_DB,
    DetectionReport,
    DetectionThreshold,
    EventKindDetected,
    attribute_and_classify,
    build_all_traces,
    build_ulp_step,
)
from .errors import InputError, NumericError
from .estimate import LoadPattern, PatternKind, augment_and_estimate, pattern_matrix, solve_ls
from .ingest import Quantity, load_csv, standardize_rows, write_csv
from .les import CltParameters, clt_calibration, les, les_mean, les_variance, test_function
from .spectral import (
    Convention,
    MpLaw,
    covariance_spectrum,
    ks_distance,
    random_matrix,
    ring_fraction,
    ring_transform,
)
from .simulate import FeederTopology, ScenarioConfig, builtin_scenarios, ieee33, simulate

log = logging.getLogger("rmtdetect")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


@dataclass
class RunManifest:
    """Inputs, seed and produced files of one command; no wall-clock data."""

    command: str
    config: dict
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)

    def config_hash(self) -> str:
        blob = {"command": self.command, "config": self.config,
                "inputs": {Path(p).name: _sha256(p) for p in self.inputs}}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()

    def to_dict(self, root: Path) -> dict:
        return {
            "schema": 1,
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash(),
            "seed": self.seed,
            "versions": {"rmtdetect": __version__, "numpy": np.__version__},
            "outputs": [{"path": str(Path(p).relative_to(root)), "sha256": _sha256(p)}
                        for p in sorted(self.outputs)],
        }

    def write(self, root: Path) -> Path:
        return _write_json(self.to_dict(root), root / "manifest.json")


def _seed(value):
    env = os.environ.get("RMT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"RMT_SEED must be an integer, got {env!r}") from None
    return value


def _out_dir(path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _samples_per_hour(series) -> float | None:
    return 3600.0 / series.sample_period if series.sample_period > 0 else None


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def read_tlp_library(path) -> list[LoadPattern]:
    d = _read_json(path)
    try:
        return [LoadPattern.from_dict(p) for p in d["patterns"]]
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed pattern library ({exc})") from None


def read_report(path) -> DetectionReport:
    try:
        return DetectionReport.from_dict(_read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed detection report ({exc!r})") from None


def write_tlp_library(patterns, path) -> Path:
    return _write_json({"schema": 1, "patterns": [p.to_dict() for p in patterns]}, path)


# simulate ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    seed = _seed(args.seed)
    if args.scenario:
        cfg = ScenarioConfig.from_dict(_read_json(args.scenario))
        if seed is not None:
            cfg.noise.seed = seed
        inputs = [args.scenario]
    else:
        cfg = builtin_scenarios(0 if seed is None else seed)[args.builtin]
        inputs = []
    root = _out_dir(args.out_dir)
    tel = simulate(cfg)
    outputs = [
        write_csv(tel.power, root / "P.csv"),
        write_csv(tel.voltage, root / "U.csv"),
        _write_json(tel.truth(), root / "truth.json"),
        _write_json(cfg.to_dict(), root / "scenario.json"),
        write_tlp_library(cfg.tlp_library, root / "tlp.json"),
    ]
    manifest = RunManifest("simulate", {"builtin": args.builtin, "seed": cfg.noise.seed},
                           cfg.noise.seed, inputs, [Path(p) for p in outputs])
    manifest.write(root)
    print(f"wrote {len(outputs)} files to {root}")
    return EXIT_OK


# detect --------------------------------------------------------------------

def _feeder(spec, n_nodes) -> FeederTopology | None:
    if spec == "none":
        return None
    topo = ieee33() if spec == "ieee33" else None
    if topo is None:
        d = _read_json(spec)
        topo = (ScenarioConfig.from_dict(d).topology if "tlp_library" in d
                else FeederTopology.from_dict(d))
    if topo.n_nodes != n_nodes:
        log.warning("feeder has %d nodes, data has %d; skipping the voltage consistency check",
                    topo.n_nodes, n_nodes)
        return None
    return topo


def cmd_detect(args) -> int:
    phi = test_function(args.phi)
    th = DetectionThreshold(args.epsilon)
    seed = _seed(args.seed) or 0
    power = load_csv(args.p_csv, Quantity.ACTIVE_POWER)
    voltage = load_csv(args.u_csv, Quantity.VOLTAGE_MAGNITUDE)
    if power.node_ids != voltage.node_ids:
        raise InputError("power and voltage files list different nodes")
    library = read_tlp_library(args.tlp) if args.tlp else []
    topo = _feeder(args.feeder, power.N)

    state, nodes = build_all_traces(voltage, power, args.T, args.dT, phi, snr_db=args.snr_db,
                                    K=args.K, seed=seed, jobs=args.jobs)
    report = attribute_and_classify(
        state, nodes, library, th,
        power=power if library else None, voltage=voltage,
        sensitivity=topo.voltage_sensitivity() if topo is not None and library else None,
        scenario=Path(args.p_csv).parent.name or None,
    )
    root = _out_dir(args.out_dir)
    traces = root / "traces"
    traces.mkdir(exist_ok=True)
    outputs = [state.to_csv(traces / "state.csv")]
    report.traces_ref["state"] = "traces/state.csv"
    for node, tr in nodes.items():
        outputs.append(tr.to_csv(traces / f"node_{node}.csv"))
        report.traces_ref[str(node)] = f"traces/node_{node}.csv"
    report.extra["h1_windows"] = {"state": int(state.h1_mask(th).sum()),
                                  **{str(n): int(t.h1_mask(th).sum()) for n, t in nodes.items()}}
    report.extra["phi"] = phi.name
    outputs.append(_write_json(report.to_dict(), root / "report.json"))

    if args.plots:
        from . import plotting

        sph = _samples_per_hour(power)
        figs = root / "figures"
        outputs.append(plotting.plot_trace(state, figs / "state.png", epsilon=th.epsilon,
                                           samples_per_hour=sph))
        outputs.append(plotting.plot_z_overview(nodes, figs / "z_overview.png",
                                                epsilon=th.epsilon, samples_per_hour=sph))
        flagged_kinds = (EventKindDetected.FRAUD, EventKindDetected.INVISIBLE)
        for node in sorted({e.node for e in report.events if e.kind in flagged_kinds}):
            outputs.append(plotting.plot_trace(nodes[node], figs / f"node_{node}.png",
                                               epsilon=th.epsilon, samples_per_hour=sph,
                                               events=[e for e in report.by_node(node)
                                                       if e.kind in flagged_kinds]))

    config = {"T": args.T, "dT": args.dT, "phi": phi.name, "epsilon": th.epsilon,
              "snr_db": args.snr_db, "K": args.K, "feeder": args.feeder}
    inputs = [args.p_csv, args.u_csv] + ([args.tlp] if args.tlp else [])
    RunManifest("detect", config, seed, inputs, [Path(p) for p in outputs]).write(root)
    flagged = [e for e in report.events
               if e.kind in (EventKindDetected.FRAUD, EventKindDetected.INVISIBLE)]
    for e in flagged:
        print(f"node {e.node:>4}  t_cp {e.t_cp:>6}  {e.kind.value}")
    print(f"{len(report.events)} change points, {len(flagged)} flagged; report in {root}")
    return EXIT_OK


# estimate ------------------------------------------------------------------

def _base_loads(path, node_ids):
    if path is None:
        return None
    d = _read_json(path)
    if "base_load_kw" not in d:
        raise InputError(f"{path} has no base_load_kw entry")
    base = list(map(float, d["base_load_kw"]))
    if len(base) != len(node_ids):
        raise InputError(f"{path}: {len(base)} base loads for {len(node_ids)} nodes")
    return dict(zip(node_ids, base))


def cmd_estimate(args) -> int:
    power = load_csv(args.p_csv, Quantity.ACTIVE_POWER)
    library = read_tlp_library(args.tlp_json)
    pattern_matrix(library)
    report = read_report(args.report_json)
    base = _base_loads(args.base_load, power.node_ids)
    scale = args.pattern_scale
    nodes = args.nodes or power.node_ids
    S = library[0].S
    if power.T_total != S:
        raise InputError(f"power series has {power.T_total} samples, patterns have {S}")

    results, fitted, baseline = {}, {}, {}
    for node in nodes:
        y = power.row(node)
        if base is not None:
            y = y / base[node] * scale
        invisible = [e for e in report.by_node(node) if e.kind is EventKindDetected.INVISIBLE]
        ulps = []
        if invisible and not args.no_ulp:
            step = build_ulp_step(invisible, S, id=f"ulp_{node}")
            ulps = [LoadPattern(step.id, step.profile * scale, kind=PatternKind.ULP)]
        est = augment_and_estimate(library, ulps, y)
        patterns = list(library) + ulps
        fitted[node] = pattern_matrix(patterns) @ est.as_array([p.id for p in patterns])
        if ulps:
            plain = solve_ls(library, y)
            baseline[node] = pattern_matrix(library) @ plain.as_array([p.id for p in library])
        results[node] = {"coefficients": est.values, "residual_norm": est.residual_norm,
                         "ulp": [p.id for p in ulps]}

    root = _out_dir(args.out_dir)
    out = {"schema": 1, "units": "pattern" if base is not None else "kW",
           "ulp_augmented": not args.no_ulp, "nodes": results}
    outputs = [_write_json(out, root / "estimates.json")]
    recon = root / "reconstruction.csv"
    table = np.column_stack([np.arange(S)] + [fitted[n] for n in nodes])
    np.savetxt(recon, table, delimiter=",", header=",".join(["sample", *nodes]), comments="",
               fmt=["%d"] + ["%.8g"] * len(nodes))
    outputs.append(recon)
    if args.plots:
        from . import plotting

        sph = _samples_per_hour(power)
        for node in nodes:
            if node not in baseline:
                continue
            y = power.row(node) / base[node] * scale if base is not None else power.row(node)
            outputs.append(plotting.plot_estimate(y, fitted[node], root / "figures"
                                                  / f"estimate_{node}.png", samples_per_hour=sph,
                                                  baseline=baseline[node], title=f"node {node}"))
    config = {"no_ulp": args.no_ulp, "pattern_scale": scale, "nodes": list(nodes)}
    inputs = [args.p_csv, args.tlp_json, args.report_json] + (
        [args.base_load] if args.base_load else [])
    RunManifest("estimate", config, None, inputs, [Path(p) for p in outputs]).write(root)
    for node in nodes:
        if results[node]["ulp"] or args.nodes:
            vals = ", ".join(f"{k}={v:.4f}" for k, v in results[node]["coefficients"].items())
            print(f"node {node}: {vals}  (residual {results[node]['residual_norm']:.4g})")
    print(f"estimates for {len(nodes)} nodes in {root}")
    return EXIT_OK


# rmt-check -----------------------------------------------------------------

def _check_matrix(args, rng):
    if args.gaussian:
        N, T = args.gaussian
        return random_matrix(args.entries, N, T, rng), args.entries
    series = load_csv(args.csv, Quantity(args.quantity))
    X = series.values
    if args.T:
        X = X[:, :args.T]
    return standardize_rows(X, jitter=True, seed=args.seed or 0), Path(args.csv).name


def cmd_rmt_check(args) -> int:
    if not args.gaussian and not args.csv:
        raise InputError("give a CSV file or --gaussian N T")
    seed = _seed(args.seed) or 0
    rng = np.random.default_rng(seed)
    phi = test_function(args.phi)
    out = {"schema": 1, "law": args.law, "seed": seed}
    figs = []
    root = _out_dir(args.out_dir)
    if args.law == "clt" and args.gaussian:
        N, T = args.gaussian
        out.update(clt_calibration(N, T, args.reps, phi, entries=args.entries, seed=seed))
        out["pass"] = bool(abs(out["mean_z"]) <= 3 and abs(out["variance_ratio"] - 1) <= 0.15
                           and out["ks_pvalue"] >= 0.01)
    else:
        X, source = _check_matrix(args, rng)
        N, T = X.shape
        out.update({"source": source, "N": N, "T": T, "c": N / T})
        if args.law == "mp":
            spec = covariance_spectrum(X, Convention.OVER_T)
            law = MpLaw(spec.c)
            out.update({"ks_distance": ks_distance(spec, law), "a": law.a, "b": law.b,
                        "eigenvalue_min": float(spec.eigenvalues[0]),
                        "eigenvalue_max": float(spec.eigenvalues[-1])})
            if args.plots:
                from . import plotting
                figs.append(plotting.plot_esd(spec, root / "figures" / "esd.png"))
        elif args.law == "ring":
            eigs = ring_transform(X, seed=seed)
            out.update({"inner_radius": float(np.sqrt(1 - N / T)), "outer_radius": 1.0,
                        "fraction_inside": ring_fraction(eigs, N / T)})
            if args.plots:
                from . import plotting
                figs.append(plotting.plot_ring(eigs, N / T, root / "figures" / "ring.png"))
        else:
            spec = covariance_spectrum(X, Convention.OVER_N)
            params = CltParameters(N / T, 0.0)
            tau = les(spec, phi)
            mean, sd = les_mean(N, params, phi, finite_n=True), float(np.sqrt(
                les_variance(params, phi)))
            out.update({"phi": phi.name, "tau": tau, "theory_mean": mean, "theory_sigma": sd,
                        "z": (tau - mean) / sd})
    path = _write_json(out, root / "diagnostics.json")
    config = {"law": args.law, "gaussian": args.gaussian, "entries": args.entries,
              "reps": args.reps, "phi": phi.name, "T": args.T}
    RunManifest("rmt-check", config, seed, [args.csv] if args.csv else [],
                [path] + figs).write(root)
    print(json.dumps(out, indent=2))
    return EXIT_OK


# entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmtdetect", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize feeder telemetry")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--builtin", choices=["simple", "complex"])
    src.add_argument("--scenario", help="scenario JSON file")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out-dir", default="out/simulate")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("detect", help="LES traces, change points and event labels")
    d.add_argument("p_csv")
    d.add_argument("u_csv")
    d.add_argument("--T", type=int, default=100, help="window length in samples")
    d.add_argument("--dT", type=int, default=1, help="window step in samples")
    d.add_argument("--phi", default="chebyshevT2", choices=["chebyshevT2", "likelihoodRatio"])
    d.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    d.add_argument("--snr-db", type=float, default=DEFAULT_SNR_DB,
                   help="factor noise level relative to the node's own noise")
    d.add_argument("--K", type=int, default=None, help="factor duplication count")
    d.add_argument("--tlp", help="pattern library JSON used for attribution")
    d.add_argument("--feeder", default="ieee33",
                   help="'ieee33', 'none', or a scenario/feeder JSON for the voltage check")
    d.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--plots", action="store_true", help="also render PNG figures")
    d.add_argument("--out-dir", default="out/detect")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("estimate", help="pattern coefficients with detected step patterns")
    e.add_argument("p_csv")
    e.add_argument("tlp_json")
    e.add_argument("report_json")
    e.add_argument("--no-ulp", action="store_true", help="ignore detected invisible usage")
    e.add_argument("--base-load", help="JSON with base_load_kw (e.g. truth.json)")
    e.add_argument("--pattern-scale", type=float, default=100.0)
    e.add_argument("--nodes", nargs="+")
    e.add_argument("--plots", action="store_true")
    e.add_argument("--out-dir", default="out/estimate")
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("rmt-check", help="M-P, ring and CLT diagnostics")
    r.add_argument("csv", nargs="?")
    r.add_argument("--gaussian", type=int, nargs=2, metavar=("N", "T"))
    r.add_argument("--entries", default="gaussian", choices=["gaussian", "bernoulli", "uniform"])
    r.add_argument("--law", default="mp", choices=["mp", "ring", "clt"])
    r.add_argument("--reps", type=int, default=1000)
    r.add_argument("--phi", default="chebyshevT2", choices=["chebyshevT2", "likelihoodRatio"])
    r.add_argument("--quantity", default="voltageMagnitude", choices=[q.value for q in Quantity])
    r.add_argument("--T", type=int, default=None, help="use only the first T samples")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--plots", action="store_true")
    r.add_argument("--out-dir", default="out/rmt-check")
    r.set_defaults(func=cmd_rmt_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
