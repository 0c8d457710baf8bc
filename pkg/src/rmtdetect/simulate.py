"""Synthetic feeder scenarios: pattern-driven loads, noise, events and LinDistFlow voltages."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, TopologyError
from .estimate import LoadPattern, PatternKind
from .ingest import Quantity, RawSeriesSet

SAMPLES_PER_DAY = 9600
HOURS = 24
POWER_FACTOR = 0.95
GAMMA1 = 0.005
GAMMA2 = 0.02
# voltage sensor noise in pu per unit of gamma2
U_NOISE_SCALE = 0.05


@dataclass(frozen=True)
class Branch:
    src: int
    dst: int
    r: float
    x: float


@dataclass
class FeederTopology:
    """Radial feeder; node 1 is the substation.  Impedances in pu."""

    n_nodes: int
    branches: list[Branch]
    v0: float = 1.0
    s_base_kva: float = 10000.0

    def __post_init__(self):
        n = self.n_nodes
        if len(self.branches) != n - 1:
            raise TopologyError(f"{len(self.branches)} branches for {n} nodes; not a tree")
        parent = {}
        for b in self.branches:
            if not (1 <= b.src <= n and 1 <= b.dst <= n):
                raise TopologyError(f"branch {b.src}-{b.dst} references an unknown node")
            if b.dst in parent or b.dst == 1:
                raise TopologyError(f"node {b.dst} has two feeding branches")
            parent[b.dst] = b.src
        for node in range(2, n + 1):
            seen, cur = set(), node
            while cur != 1:
                if cur in seen or cur not in parent:
                    raise TopologyError(f"node {node} is not connected to the substation")
                seen.add(cur)
                cur = parent[cur]
        self._parent = parent

    @property
    def node_ids(self) -> list[str]:
        return [str(i) for i in range(1, self.n_nodes + 1)]

    def path_matrix(self) -> np.ndarray:
        """(nodes x branches) 1 where the branch lies on the substation->node path."""
        idx = {b.dst: k for k, b in enumerate(self.branches)}
        A = np.zeros((self.n_nodes, len(self.branches)))
        for node in range(2, self.n_nodes + 1):
            cur = node
            while cur != 1:
                A[node - 1, idx[cur]] = 1.0
                cur = self._parent[cur]
        return A

    def shared_impedance(self) -> tuple[np.ndarray, np.ndarray]:
        """Resistance and reactance of the common upstream path of each node pair."""
        A = self.path_matrix()
        r = np.array([b.r for b in self.branches])
        x = np.array([b.x for b in self.branches])
        return (A * r) @ A.T, (A * x) @ A.T

    def voltage_sensitivity(self, power_factor=POWER_FACTOR) -> np.ndarray:
        """dV_m / dP_j in pu per kW at flat voltage (reactive power follows ``power_factor``)."""
        R, X = self.shared_impedance()
        k = np.tan(np.arccos(power_factor))
        return -(R + k * X) / self.v0 / self.s_base_kva

    @classmethod
    def from_dict(cls, d):
        z_base = d["v_base_kv"] ** 2 / (d["s_base_kva"] / 1000.0)
        branches = [Branch(b["from"], b["to"], b["r_ohm"] / z_base, b["x_ohm"] / z_base)
                    for b in d["branches"]]
        n = 1 + len(branches)
        return cls(n, branches, d.get("v0", 1.0), d["s_base_kva"])


def ieee33_data() -> dict:
    with resources.files("rmtdetect.data").joinpath("ieee33.json").open() as fh:
        return json.load(fh)


def ieee33() -> FeederTopology:
    return FeederTopology.from_dict(ieee33_data())


def power_flow(topology: FeederTopology, p_kw, q_kvar=None,
               power_factor=POWER_FACTOR) -> np.ndarray:
    """Lossless LinDistFlow voltage magnitudes, nodes x samples.

    ``v_j^2 = v0^2 - 2 sum over path (r P + x Q)`` with branch flows summed
    leaf to root.
    """
    p = np.atleast_2d(np.asarray(p_kw, dtype=float))
    if p.shape[0] != topology.n_nodes:
        raise ConfigError(f"{p.shape[0]} injection rows for {topology.n_nodes} nodes")
    if not np.all(np.isfinite(p)):
        raise ConfigError("injections must be finite")
    if q_kvar is None:
        q_kvar = p * np.tan(np.arccos(power_factor))
    q = np.atleast_2d(np.asarray(q_kvar, dtype=float))
    R, X = topology.shared_impedance()
    w = topology.v0**2 - 2.0 * (R @ p + X @ q) / topology.s_base_kva
    if np.any(w <= 0):
        raise ConfigError("loading is beyond the range of the linearized flow")
    return np.sqrt(w)


def branch_flows(topology: FeederTopology, p_kw) -> np.ndarray:
    """Active power carried by each branch (kW), leaf-to-root accumulation."""
    return topology.path_matrix().T @ np.atleast_2d(np.asarray(p_kw, dtype=float))


class EventKind(str, enum.Enum):
    FRAUD = "fraud"
    INVISIBLE = "invisibleUsage"


@dataclass(frozen=True)
class Event:
    node: int
    kind: EventKind
    start: int
    end: int
    magnitude: float

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        if not self.start < self.end:
            raise ConfigError(f"event on node {self.node}: start {self.start} >= end {self.end}")
        if not self.magnitude > 0:
            raise ConfigError(f"event on node {self.node}: magnitude must be positive")

    def to_dict(self):
        return {"node": self.node, "kind": self.kind.value, "start": self.start,
                "end": self.end, "magnitude": self.magnitude}


@dataclass
class NoiseConfig:
    gamma1: float = GAMMA1
    gamma2: float = GAMMA2
    seed: int = 0
    u_noise_scale: float = U_NOISE_SCALE

    @property
    def u_sigma(self) -> float:
        return self.gamma2 * self.u_noise_scale


@dataclass
class ScenarioConfig:
    name: str
    topology: FeederTopology
    tlp_library: list[LoadPattern]
    coefficients: dict[int, list[float]]
    base_load_kw: np.ndarray
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    events: list[Event] = field(default_factory=list)
    samples_per_day: int = SAMPLES_PER_DAY
    pattern_scale: float = 100.0
    ulp_coefficients: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        self.base_load_kw = np.asarray(self.base_load_kw, dtype=float)
        n = self.topology.n_nodes
        if self.base_load_kw.shape != (n,):
            raise ConfigError(f"base_load_kw needs {n} entries")
        m = len(self.tlp_library)
        for node, a in self.coefficients.items():
            if len(a) != m:
                raise ConfigError(f"node {node}: {len(a)} coefficients for {m} patterns")
        for p in self.tlp_library:
            if p.S != self.samples_per_day:
                raise ConfigError(f"pattern {p.id} has {p.S} samples, day has {self.samples_per_day}")
        for ev in self.events:
            if not 1 <= ev.node <= n:
                raise ConfigError(f"event on unknown node {ev.node}")
            if ev.start < 0 or ev.end > self.samples_per_day:
                raise ConfigError(f"event on node {ev.node} exceeds the series bounds")
        by_node = {}
        for ev in self.events:
            for other in by_node.get(ev.node, []):
                if other.kind != ev.kind and ev.start < other.end and other.start < ev.end:
                    raise ConfigError(f"node {ev.node}: overlapping {other.kind.value} and "
                                      f"{ev.kind.value} events")
            by_node.setdefault(ev.node, []).append(ev)

    @property
    def sample_period(self) -> float:
        return 86400.0 / self.samples_per_day

    @property
    def samples_per_hour(self) -> int:
        return self.samples_per_day // HOURS

    def coefficient_matrix(self) -> np.ndarray:
        A = np.zeros((self.topology.n_nodes, len(self.tlp_library)))
        for node, a in self.coefficients.items():
            A[int(node) - 1] = a
        return A

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "name": self.name,
            "samples_per_day": self.samples_per_day,
            "pattern_scale": self.pattern_scale,
            "topology": {
                "v0": self.topology.v0, "s_base_kva": self.topology.s_base_kva,
                "branches": [{"from": b.src, "to": b.dst, "r_pu": b.r, "x_pu": b.x}
                             for b in self.topology.branches],
            },
            "tlp_library": [{"id": p.id, "kind": p.kind.value,
                             "hourly": _hourly(p.profile, self.samples_per_hour)}
                            for p in self.tlp_library],
            "coefficients": {str(k): list(v) for k, v in self.coefficients.items()},
            "ulp_coefficients": {str(k): v for k, v in self.ulp_coefficients.items()},
            "base_load_kw": self.base_load_kw.tolist(),
            "noise": {"gamma1": self.noise.gamma1, "gamma2": self.noise.gamma2,
                      "seed": self.noise.seed, "u_noise_scale": self.noise.u_noise_scale},
            "events": [e.to_dict() for e in self.events],
        }

    @classmethod
    def from_dict(cls, d) -> ScenarioConfig:
        try:
            spd = int(d.get("samples_per_day", SAMPLES_PER_DAY))
            topo = d["topology"]
            if "branches" in topo and topo["branches"] and "r_pu" in topo["branches"][0]:
                branches = [Branch(b["from"], b["to"], b["r_pu"], b["x_pu"])
                            for b in topo["branches"]]
                topology = FeederTopology(len(branches) + 1, branches, topo.get("v0", 1.0),
                                          topo.get("s_base_kva", 10000.0))
            else:
                topology = FeederTopology.from_dict(topo)
            sph = spd // HOURS
            lib = [LoadPattern(p["id"], np.repeat(np.asarray(p["hourly"], float), sph)
                               if "hourly" in p else p["profile"], kind=p.get("kind", "tlp"))
                   for p in d["tlp_library"]]
            return cls(
                name=d.get("name", "custom"),
                topology=topology,
                tlp_library=lib,
                coefficients={int(k): list(map(float, v)) for k, v in d["coefficients"].items()},
                ulp_coefficients={int(k): float(v)
                                  for k, v in d.get("ulp_coefficients", {}).items()},
                base_load_kw=d["base_load_kw"],
                noise=NoiseConfig(**d.get("noise", {})),
                events=[Event(**e) for e in d.get("events", [])],
                samples_per_day=spd,
                pattern_scale=float(d.get("pattern_scale", 100.0)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed scenario: {exc}") from exc


def _hourly(profile, sph):
    return [float(v) for v in profile[::sph]]


def _streams(seed: int):
    load_ss, meas_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(load_ss), np.random.default_rng(meas_ss)


def clean_loads(cfg: ScenarioConfig, include_invisible=True) -> np.ndarray:
    """Noise-free consumption in kW, nodes x samples."""
    P = np.column_stack([p.profile for p in cfg.tlp_library]) / cfg.pattern_scale
    y = (cfg.coefficient_matrix() @ P.T) * cfg.base_load_kw[:, None]
    if include_invisible:
        for ev in cfg.events:
            if ev.kind is EventKind.INVISIBLE:
                y[ev.node - 1, ev.start:ev.end] += ev.magnitude * cfg.base_load_kw[ev.node - 1]
    return y


def synthesize_loads(cfg: ScenarioConfig, rng=None) -> np.ndarray:
    """True consumption with multiplicative and additive white noise, kW."""
    if rng is None:
        rng, _ = _streams(cfg.noise.seed)
    y = clean_loads(cfg)
    z1 = rng.standard_normal(y.shape)
    z2 = rng.standard_normal(y.shape)
    return y * (1.0 + cfg.noise.gamma1 * z1) + cfg.noise.gamma2 * z2


def apply_events(cfg: ScenarioConfig, true_loads, voltages, rng=None):
    """Measured power (fraud-altered) and measured voltage (sensor noise added)."""
    if rng is None:
        _, rng = _streams(cfg.noise.seed)
    p_meas = np.array(true_loads, dtype=float)
    for ev in cfg.events:
        if ev.kind is EventKind.FRAUD:
            p_meas[ev.node - 1, ev.start:ev.end] -= ev.magnitude * cfg.base_load_kw[ev.node - 1]
    u_meas = voltages + cfg.noise.u_sigma * rng.standard_normal(voltages.shape)
    return p_meas, u_meas


@dataclass
class Telemetry:
    power: RawSeriesSet
    voltage: RawSeriesSet
    true_power: np.ndarray
    config: ScenarioConfig

    def truth(self) -> dict:
        cfg = self.config
        sph = cfg.samples_per_hour
        return {
            "schema": 1,
            "scenario": cfg.name,
            "samples_per_day": cfg.samples_per_day,
            "samples_per_hour": sph,
            "base_load_kw": cfg.base_load_kw.tolist(),
            "coefficients": {str(k): v for k, v in cfg.coefficients.items()},
            "ulp_coefficients": {str(k): v for k, v in cfg.ulp_coefficients.items()},
            "patterns": [p.id for p in cfg.tlp_library],
            "events": [dict(e.to_dict(), start_hour=e.start / sph, end_hour=e.end / sph)
                       for e in cfg.events],
            "seed": cfg.noise.seed,
        }


def simulate(cfg: ScenarioConfig) -> Telemetry:
    load_rng, meas_rng = _streams(cfg.noise.seed)
    true_p = synthesize_loads(cfg, load_rng)
    u = power_flow(cfg.topology, true_p)
    p_meas, u_meas = apply_events(cfg, true_p, u, meas_rng)
    stamps = np.arange(cfg.samples_per_day) * cfg.sample_period
    ids = cfg.topology.node_ids
    return Telemetry(
        RawSeriesSet(ids, cfg.sample_period, p_meas, Quantity.ACTIVE_POWER, stamps),
        RawSeriesSet(ids, cfg.sample_period, u_meas, Quantity.VOLTAGE_MAGNITUDE, stamps),
        true_p,
        cfg,
    )


# Daily profiles of the routine patterns and of the uncertain unit, hours 0..23.
TABLE_I = {
    "p1": [88, 87, 88, 100, 96, 100, 98, 97, 88, 82, 82, 95,
           94, 86, 86, 88, 85, 87, 88, 85, 84, 83, 86, 88],
    "p2": [20, 20, 20, 21, 20, 20, 20, 30, 40, 85, 85, 82,
           77, 80, 86, 86, 87, 35, 25, 25, 20, 20, 20, 15],
    "p3": [25, 23, 22, 22, 27, 31, 29, 28, 31, 37, 42, 42,
           35, 30, 33, 44, 50, 56, 85, 80, 70, 76, 43, 30],
    "p4": [100, 100, 100, 100, 100, 100, 0, 0, 0, 0, 0, 0,
           0, 0, 0, 0, 100, 100, 100, 100, 100, 100, 100, 100],
    "pu1": [0, 100, 100, 100, 100, 0, 0, 0, 0, 0, 0, 0,
            0, 0, 100, 100, 100, 100, 100, 100, 0, 0, 0, 0],
}

# Per-node (a1, a2, a3, a4, b1).
TABLE_II = {
    1: (0.25, 0.25, 0.25, 0.25, 0), 2: (0, 0.7, 0.1, 0.2, 0),
    3: (0, 0.1, 0.8, 0.1, 0), 4: (0.05, 0.75, 0.1, 0.1, 0),
    5: (0, 0.1, 0.8, 0.1, 0), 6: (0.1, 0.2, 0.5, 0.2, 0),
    7: (0.8, 0.05, 0.1, 0.05, 0), 8: (0.85, 0.05, 0, 0.1, 0),
    9: (0.1, 0.15, 0.6, 0.15, 0), 10: (0, 0.15, 0.8, 0.05, 0),
    11: (0, 0.2, 0.75, 0.05, 0), 12: (0.05, 0.1, 0.75, 0.1, 0),
    13: (0.05, 0.05, 0.85, 0.05, 0), 14: (0.7, 0.05, 0.2, 0.05, 0),
    15: (0, 0.05, 0.9, 0.05, 0), 16: (0, 0, 0.95, 0.05, 0),
    17: (0, 0.1, 0.8, 0.1, 0), 18: (0, 0.7, 0.1, 0.2, 0),
    19: (0, 0.5, 0.1, 0.4, 0), 20: (0, 0.2, 0.2, 0.3, 0.3),
    21: (0, 0.8, 0.1, 0.1, 0), 22: (0.1, 0.75, 0, 0.15, 0),
    23: (0.2, 0.6, 0, 0.2, 0), 24: (0.85, 0, 0.05, 0.1, 0),
    25: (0.75, 0.1, 0.1, 0.05, 0), 26: (0.2, 0, 0.7, 0.1, 0),
    27: (0.1, 0, 0.75, 0.15, 0), 28: (0.25, 0.1, 0.6, 0.05, 0),
    29: (0.8, 0.05, 0.1, 0.05, 0), 30: (0.9, 0, 0.05, 0.05, 0),
    31: (0.1, 0.1, 0.05, 0.25, 0.5), 32: (0.9, 0, 0, 0.1, 0),
    33: (0.95, 0, 0, 0.05, 0),
}

# the substation bus carries no load in the standard case data
SUBSTATION_LOAD_KW = 100.0


def ieee33_base_loads() -> np.ndarray:
    d = ieee33_data()["load_kw"]
    loads = np.zeros(33)
    loads[0] = SUBSTATION_LOAD_KW
    for k, v in d.items():
        loads[int(k) - 1] = v
    return loads


def tlp_library(samples_per_day=SAMPLES_PER_DAY) -> list[LoadPattern]:
    sph = samples_per_day // HOURS
    return [LoadPattern.from_hourly(k, TABLE_I[k], sph) for k in ("p1", "p2", "p3", "p4")]


def ulp_profile(samples_per_day=SAMPLES_PER_DAY) -> LoadPattern:
    return LoadPattern.from_hourly("pu1", TABLE_I["pu1"], samples_per_day // HOURS,
                                   kind=PatternKind.ULP)


def _hour(h, sph):
    return int(round(h * sph))


def simple_scenario(seed=0, samples_per_day=SAMPLES_PER_DAY) -> ScenarioConfig:
    """Constant loads; 5 kW fraud on nodes 6 and 14 between 14:00 and 17:00."""
    sph = samples_per_day // HOURS
    base = ieee33_base_loads()
    flat = LoadPattern("flat", np.full(samples_per_day, 100.0))
    events = [Event(n, EventKind.FRAUD, _hour(14, sph), _hour(17, sph), 5.0 / base[n - 1])
              for n in (6, 14)]
    return ScenarioConfig("simple", ieee33(), [flat], {n: [1.0] for n in range(1, 34)}, base,
                          NoiseConfig(seed=seed), events, samples_per_day)


def complex_scenario(seed=0, samples_per_day=SAMPLES_PER_DAY) -> ScenarioConfig:
    """Four routine patterns per node, invisible usage on nodes 20/31, fraud on 6/14/27."""
    sph = samples_per_day // HOURS
    base = ieee33_base_loads()
    coeffs = {n: list(row[:4]) for n, row in TABLE_II.items()}
    ulp = {n: row[4] for n, row in TABLE_II.items() if row[4] > 0}
    events = [
        Event(20, EventKind.INVISIBLE, _hour(1, sph), _hour(5, sph), ulp[20]),
        Event(31, EventKind.INVISIBLE, _hour(14, sph), _hour(20, sph), ulp[31]),
        Event(6, EventKind.FRAUD, _hour(20, sph), _hour(22, sph), 0.07),
        Event(14, EventKind.FRAUD, _hour(14, sph), _hour(17, sph), 0.08),
        Event(27, EventKind.FRAUD, _hour(18, sph), _hour(19, sph), 0.12),
    ]
    return ScenarioConfig("complex", ieee33(), tlp_library(samples_per_day), coeffs, base,
                          NoiseConfig(seed=seed), events, samples_per_day, ulp_coefficients=ulp)


def builtin_scenarios(seed=0) -> dict[str, ScenarioConfig]:
    return {"simple": simple_scenario(seed), "complex": complex_scenario(seed)}
