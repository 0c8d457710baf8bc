"""Sliding-window LES traces, the z-score test, change-point localization and attribution."""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .concat import ConcatSpec, build_factor_matrix, default_k
from .errors import ConfigError, PairingError, ShapeError
from .estimate import LoadPattern, PatternKind, pattern_matrix
from .ingest import RawSeriesSet, standardize_rows, window_count, window_stack
from .les import (
    CltParameters,
    DEFAULT_QUAD_NODES,
    LesValue,
    TestFunction,
    asymptotic_mean_per_row,
    les_batch,
    mean_correction,
    variance_terms,
)
from .spectral import Convention, batch_spectra

DEFAULT_EPSILON = 1.96
DEFAULT_SNR_DB = -10.0
CHUNK = 1024
STATE_LABEL = "stateOnly"


class Hypothesis(str, enum.Enum):
    H0 = "H0"
    H1 = "H1"


class EventKindDetected(str, enum.Enum):
    FRAUD = "fraud"
    INVISIBLE = "invisible"
    TLP_TRANSITION = "tlpTransition"
    UNCLASSIFIED = "unclassified"


@dataclass(frozen=True)
class DetectionThreshold:
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class LesTrace:
    times: np.ndarray
    tau: np.ndarray
    mean_theory: np.ndarray
    sigma_theory: np.ndarray
    label: str
    T: int
    step: int
    kappa4: np.ndarray | None = None
    eta: float | None = None
    n_rows: int = 0

    def __post_init__(self):
        n = len(self.times)
        for name in ("tau", "mean_theory", "sigma_theory"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"trace array {name} has the wrong length")
        if n > 1 and np.any(np.diff(self.times) != self.step):
            raise ShapeError("trace times must increase by the window step")

    @property
    def z(self) -> np.ndarray:
        return (self.tau - self.mean_theory) / self.sigma_theory

    def __len__(self):
        return len(self.times)

    def value(self, i) -> LesValue:
        return LesValue(float(self.tau[i]), float(self.mean_theory[i]), float(self.sigma_theory[i]))

    def h1_mask(self, th: DetectionThreshold) -> np.ndarray:
        return np.abs(self.z) >= th.epsilon

    def to_csv(self, path):
        table = np.column_stack([self.times, self.tau, self.mean_theory, self.sigma_theory])
        np.savetxt(path, table, delimiter=",", header="time,tau,mean,sigma", comments="",
                   fmt=["%d", "%.10g", "%.10g", "%.10g"])
        return path


def hypothesis_test(v: LesValue, th: DetectionThreshold) -> Hypothesis:
    return Hypothesis.H1 if abs(v.z) >= th.epsilon else Hypothesis.H0


class _Theory:
    """Per-window mean and sigma, linear in the fourth cumulant."""

    def __init__(self, n_rows, T, phi, quad_nodes=DEFAULT_QUAD_NODES, finite_n=True):
        params = CltParameters(n_rows / T, 0.0, quad_nodes)
        self.base, self.k4 = variance_terms(params, phi)
        self.mean0 = n_rows * asymptotic_mean_per_row(params, phi)
        self.corr0 = self.corr1 = 0.0
        if finite_n:
            self.corr0 = mean_correction(params, phi)
            self.corr1 = mean_correction(CltParameters(params.c, 1.0, quad_nodes), phi) - self.corr0

    def __call__(self, kappa4):
        var = self.base + kappa4 * self.k4
        sigma = np.sqrt(np.maximum(var, 1e-300))
        return self.mean0 + self.corr0 + kappa4 * self.corr1, sigma


def noise_level(x) -> float:
    """Robust white-noise scale from first differences (MAD based)."""
    d = np.diff(np.asarray(x, dtype=float))
    mad = np.median(np.abs(d - np.median(d)))
    s = mad / 0.6744897501960817 / math.sqrt(2.0)
    if s <= 0:
        s = float(np.std(d)) / math.sqrt(2.0)
    return max(s, 1e-12 * max(1.0, float(np.max(np.abs(x)))))


def factor_spec(c_j, n_state, snr_db=DEFAULT_SNR_DB, K=None, seed=0) -> ConcatSpec:
    """Duplication recipe with noise ``eta = noise_level(c_j) * 10**(-snr/20)``."""
    eta = noise_level(c_j) * 10.0 ** (-snr_db / 20.0)
    return ConcatSpec(default_k(n_state) if K is None else K, eta, seed)


def window_noise_levels(x, T: int, step: int = 1) -> np.ndarray:
    """``noise_level`` of every length-T window of ``x`` (step-robust)."""
    d = np.lib.stride_tricks.sliding_window_view(np.diff(np.asarray(x, dtype=float)), T - 1)
    d = d[::step]
    dev = np.abs(d - np.median(d, axis=1, keepdims=True))
    s = np.median(dev, axis=1) / 0.6744897501960817 / math.sqrt(2.0)
    floor = 1e-12 * max(1.0, float(np.max(np.abs(x))))
    return np.maximum(s, floor)


def _local_factor(c_j, K, T, step, gain, seed):
    """Factor windows whose noise tracks the local noise level of ``c_j``."""
    unit = build_factor_matrix(np.zeros_like(c_j), ConcatSpec(K, 1.0, seed))
    cw = np.lib.stride_tricks.sliding_window_view(c_j, T)[::step]
    ew = np.lib.stride_tricks.sliding_window_view(unit, T, axis=1)
    eta = window_noise_levels(c_j, T, step) * gain

    def windows(first, n):
        e = np.moveaxis(ew[:, first * step:(first + n - 1) * step + 1:step], 1, 0)
        return cw[first:first + n, None, :] + eta[first:first + n, None, None] * e

    return windows, eta


def _trace_from_rows(rows, T, step, phi, label, theory, jitter, seed, eta=None,
                     factor_windows=None, n_rows=None):
    count = window_count(rows.shape[1], T, step)
    tau = np.empty(count)
    k4 = np.empty(count)
    for first in range(0, count, CHUNK):
        n = min(CHUNK, count - first)
        stack = window_stack(rows, T, step, first, n, jitter=jitter, seed=seed + first)
        if factor_windows is not None:
            extra = standardize_rows(factor_windows(first, n), jitter=jitter, seed=seed + first)
            stack = np.concatenate([stack, extra], axis=1)
        eigs = batch_spectra(stack, Convention.OVER_N)
        tau[first:first + n] = les_batch(eigs, phi)
        sq = stack * stack
        k4[first:first + n] = np.einsum("wit,wit->w", sq, sq) / sq[0].size - 3.0
    mean, sigma = theory(k4)
    times = np.arange(count) * step + T
    return LesTrace(times, tau, mean, sigma, label, T, step, k4, eta,
                    rows.shape[0] if n_rows is None else n_rows)


def build_trace(series: RawSeriesSet, T: int, step: int, phi: TestFunction, *,
                factor=None, spec: ConcatSpec | None = None, node=None, jitter=True,
                seed=0, quad_nodes=DEFAULT_QUAD_NODES, finite_n=True,
                local_snr_db: float | None = None) -> LesTrace:
    """LES trace of the state windows, or of state stacked over a factor matrix.

    ``factor`` is the node's full power series; ``spec`` defaults to
    ``factor_spec``.  With ``local_snr_db`` the factor noise is rescaled in
    every window to sit that many dB relative to the window's own noise
    level, and ``spec.eta`` is ignored.  Times are window END indices
    (start + T).
    """
    rows = series.values
    label = STATE_LABEL
    eta = None
    n_rows = rows.shape[0]
    windows = None
    if factor is not None:
        factor = np.asarray(factor, dtype=float).ravel()
        if factor.size != rows.shape[1]:
            raise ShapeError("factor series length differs from the state series")
        if spec is None:
            spec = factor_spec(factor, rows.shape[0], seed=seed)
        label = f"nodeConcat({node})"
        n_rows += spec.K
        if local_snr_db is None:
            rows = np.vstack([rows, build_factor_matrix(factor, spec)])
            eta = spec.eta
        else:
            gain = 10.0 ** (-local_snr_db / 20.0)
            windows, etas = _local_factor(factor, spec.K, T, step, gain, spec.seed)
            eta = float(np.median(etas))
    if n_rows > T:
        raise ShapeError(f"{n_rows} rows exceed window length {T}")
    theory = _Theory(n_rows, T, phi, quad_nodes, finite_n)
    return _trace_from_rows(rows, T, step, phi, label, theory, jitter, seed, eta,
                            windows, n_rows)


def build_all_traces(voltage: RawSeriesSet, power: RawSeriesSet, T: int, step: int,
                     phi: TestFunction, *, snr_db=DEFAULT_SNR_DB, K=None, seed=0,
                     jobs=1, nodes=None, quad_nodes=DEFAULT_QUAD_NODES, local_eta=True):
    """State-only trace plus one concatenated trace per node (parallel over nodes)."""
    if voltage.T_total != power.T_total:
        raise ShapeError("power and voltage series have different lengths")
    nodes = list(power.node_ids if nodes is None else nodes)

    def one(j):
        if j is None:
            return build_trace(voltage, T, step, phi, seed=seed, quad_nodes=quad_nodes)
        idx = power.node_ids.index(str(j))
        c_j = power.values[idx]
        spec = factor_spec(c_j, voltage.N, snr_db, K, seed=seed + 1000 + idx)
        return build_trace(voltage, T, step, phi, factor=c_j, spec=spec, node=j,
                           seed=seed, quad_nodes=quad_nodes,
                           local_snr_db=snr_db if local_eta else None)

    jobs_list = [None] + nodes
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(one, jobs_list))
    else:
        traces = [one(j) for j in jobs_list]
    return traces[0], dict(zip(nodes, traces[1:]))


@dataclass
class ChangePointEvent:
    node: str
    t_cp: int
    t_extreme: int
    spike_span: tuple[int, int]
    z_peak: float
    kind: EventKindDetected = EventKindDetected.UNCLASSIFIED
    pattern: str | None = None
    step: float | None = None
    consistency: float | None = None

    @property
    def span_windows(self) -> int:
        return self.spike_span[1] - self.spike_span[0] + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = EventKindDetected(self.kind).value
        d["spike_span"] = list(self.spike_span)
        return d


def _runs(mask):
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.r_[idx[0], idx[breaks + 1]]
    ends = np.r_[idx[breaks], idx[-1]]
    return list(zip(starts.tolist(), ends.tolist()))


def localize_changepoints(trace: LesTrace, th: DetectionThreshold, T: int | None = None,
                          node="systemwide", min_span: int | None = None
                          ) -> list[ChangePointEvent]:
    """Group H1 runs into spikes; each spike is centred T/2 after its change point.

    A step keeps the statistic raised for about T/step windows, so runs
    shorter than ``min_span`` windows (default a quarter of that) are
    treated as isolated false alarms.
    """
    T = trace.T if T is None else T
    if min_span is None:
        min_span = max(1, math.ceil(T / (4 * trace.step)))
    z = trace.z
    runs = _runs(np.abs(z) >= th.epsilon)
    merged = []
    gap = T / 4
    for a, b in runs:
        if merged and (trace.times[a] - trace.times[merged[-1][1]]) < gap:
            merged[-1] = (merged[-1][0], b)
        else:
            merged.append((a, b))
    events = []
    for a, b in merged:
        if b - a + 1 < min_span:
            continue
        seg = np.abs(z[a:b + 1])
        k = a + int(np.argmax(seg))
        t_ext = int(trace.times[k])
        # the spike is symmetric about CP + T/2; its excess-weighted centroid
        # is far less noisy than the arg-max
        w = np.clip(seg - th.epsilon, 0.0, None)
        centre = float(np.dot(w, trace.times[a:b + 1]) / w.sum()) if w.sum() > 0 else t_ext
        events.append(ChangePointEvent(str(node), int(round(centre - T / 2)), t_ext, (a, b),
                                       float(seg.max())))
    return events


def tol_match(T: int, step: int) -> int:
    return 2 * step * math.ceil(T / 20)


@dataclass
class DetectionReport:
    events: list[ChangePointEvent]
    window: dict
    epsilon: float
    scenario: str | None = None
    traces_ref: dict = field(default_factory=dict)
    periods: list[dict] = field(default_factory=list)
    ulp_profile_support: list[list[int]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def by_node(self, node) -> list[ChangePointEvent]:
        return [e for e in self.events if e.node == str(node)]

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "scenario": self.scenario,
            "window": self.window,
            "epsilon": self.epsilon,
            "events": [e.to_dict() for e in self.events],
            "periods": self.periods,
            "ulp_support": self.ulp_profile_support,
            "traces_ref": self.traces_ref,
            **self.extra,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d) -> DetectionReport:
        events = []
        for e in d.get("events", []):
            e = dict(e)
            e["spike_span"] = tuple(e["spike_span"])
            e["kind"] = EventKindDetected(e.get("kind", "unclassified"))
            events.append(ChangePointEvent(**e))
        known = {"schema", "scenario", "window", "epsilon", "events", "periods", "ulp_support",
                 "traces_ref"}
        return cls(events, d["window"], d["epsilon"], d.get("scenario"), d.get("traces_ref", {}),
                   d.get("periods", []), d.get("ulp_support", []),
                   {k: v for k, v in d.items() if k not in known})


def _heaviside(S, t):
    h = np.zeros(S)
    h[max(0, min(S, t)):] = 1.0
    return h


def _window_mean(x, a, b):
    a, b = max(0, a), min(x.shape[-1], b)
    if b <= a:
        return None
    return x[..., a:b].mean(axis=-1)


def local_jump(x, t, width, guard):
    """Mean over ``[t+guard, t+width)`` minus mean over ``[t-width, t-guard)``."""
    before = _window_mean(x, t - width, t - guard)
    after = _window_mean(x, t + guard, t + width)
    if before is None or after is None:
        return None
    return after - before


def unexplained_steps(p_node, tlp_library, cps, *, step_rtol=0.03):
    """Jumps at ``cps`` that the routine patterns cannot account for.

    Starts from the pattern-only least-squares fit and greedily adds the unit
    step that lowers the residual most while the gain beats a BIC-style
    ``sigma^2 log S`` penalty.  Steps smaller than ``step_rtol`` of the
    node's median level are then removed one at a time.  Returns (step
    sizes, zero for explained change points; final pattern coefficients).
    """
    y = np.asarray(p_node, dtype=float)
    S = y.size
    P = pattern_matrix(tlp_library)
    m = P.shape[1]
    H = np.column_stack([_heaviside(S, t) for t in cps]) if len(cps) else np.zeros((S, 0))
    sigma = noise_level(y)
    penalty = max(sigma**2, 1e-300) * math.log(S)
    level = max(float(np.median(np.abs(y))), 1e-12)

    def fit(cols):
        M = np.column_stack([P] + [H[:, k] for k in cols])
        coef, *_ = np.linalg.lstsq(M, y, rcond=None)
        r = y - M @ coef
        return float(r @ r), coef

    chosen = []
    rss, coef = fit(chosen)
    while True:
        best = None
        for k in range(H.shape[1]):
            if k in chosen:
                continue
            r, cf = fit(chosen + [k])
            if best is None or r < best[0]:
                best = (r, cf, k)
        if best is None or rss - best[0] < penalty:
            break
        rss, coef = best[0], best[1]
        chosen.append(best[2])
    # a lone edge of a pulse is only partly fitted until its partner joins,
    # so the size floor is applied afterwards, dropping the smallest first
    while chosen:
        sizes = np.abs(coef[m:])
        k = int(np.argmin(sizes))
        if sizes[k] >= step_rtol * level:
            break
        chosen.pop(k)
        rss, coef = fit(chosen)
    steps = np.zeros(len(cps))
    for n, k in enumerate(chosen):
        steps[k] = coef[m + n]
    return steps, coef[:m]


def consistency_ratios(events, power, voltage, sensitivity, T=None, v0=1.0):
    """Fraction of each event's power step that the voltages fail to follow.

    Squared voltages are linear in the injections, ``U^2 = v0^2 + 2 v0 S P``,
    so the residual ``U^2 - 2 v0 S P_measured`` steps by ``-2 v0 S_j g`` when
    node j's reading drops by g without its load moving (fraud) and stays
    flat when the load really moves.  The missing steps g of all events are
    fitted jointly over the whole record, with a free offset per voltage
    row; the ratio is g over the event's power step.  ``T`` is accepted for
    call compatibility and unused.
    """
    events = [e for e in events if e.step]
    if not events:
        return {}
    resid = voltage.values**2 - 2.0 * v0 * (sensitivity @ power.values)
    resid = resid - resid.mean(axis=1, keepdims=True)
    S = resid.shape[1]
    H = np.column_stack([_heaviside(S, e.t_cp) for e in events])
    H -= H.mean(axis=0)
    cols = np.column_stack([-2.0 * v0 * sensitivity[:, power.node_ids.index(e.node)]
                            for e in events])
    # normal equations of the Kronecker-structured design, never formed
    A = (cols.T @ cols) * (H.T @ H)
    b = np.einsum("mk,mk->k", cols, resid @ H)
    g = np.linalg.lstsq(A, b, rcond=None)[0]
    return {id(e): float(g[k] / e.step) for k, e in enumerate(events)}


def attribute_and_classify(state_trace: LesTrace, node_traces: dict, tlp_library,
                           th: DetectionThreshold, *, power: RawSeriesSet | None = None,
                           voltage: RawSeriesSet | None = None, sensitivity=None,
                           step_rtol=0.03, fraud_ratio=0.5, scenario=None) -> DetectionReport:
    """Label every node change point as a routine transition, invisible usage or fraud.

    Without measurements, a change point is a routine transition when a
    library pattern changes within ``tol_match`` samples; otherwise it is
    invisible when the voltage trace or another node spikes at the same time,
    and fraud when it stands alone.  With ``power`` the routine check also
    requires the patterns to explain the jump; with ``voltage`` and
    ``sensitivity`` fraud is told apart by the voltages not following the
    measured power.
    """
    T, step = state_trace.T, state_trace.step
    for tr in node_traces.values():
        if tr.T != T or tr.step != step or len(tr) != len(state_trace):
            raise ConfigError("all traces must share window length and step")
    tol = tol_match(T, step)
    state_h1 = state_trace.h1_mask(th)

    per_node = {str(j): localize_changepoints(tr, th, T, node=j) for j, tr in node_traces.items()}
    all_events = [e for evs in per_node.values() for e in evs]

    def library_cps(t):
        return [p for p in tlp_library if any(abs(c - t) <= tol for c in p.cps)]

    def state_concurrent(ev):
        lo, hi = ev.t_cp, ev.t_cp + T
        mask = (state_trace.times >= lo) & (state_trace.times <= hi)
        return bool(np.any(state_h1[mask]))

    def others_concurrent(ev):
        return sum(1 for e in all_events if e.node != ev.node and abs(e.t_cp - ev.t_cp) <= tol) >= 1

    unexplained = []
    for node, evs in per_node.items():
        if not evs:
            continue
        if power is not None:
            p_node = power.row(node)
            steps, coef = unexplained_steps(p_node, tlp_library, [e.t_cp for e in evs],
                                             step_rtol=step_rtol)
        for n, ev in enumerate(evs):
            matches = library_cps(ev.t_cp)
            if power is not None:
                ev.step = float(steps[n])
                explained = ev.step == 0.0
                if explained:
                    if matches:
                        ev.kind = EventKindDetected.TLP_TRANSITION
                        ev.pattern = _dominant(matches, coef, tlp_library, ev.t_cp, tol)
                    else:
                        ev.kind = EventKindDetected.UNCLASSIFIED
                    continue
            elif matches:
                ev.kind = EventKindDetected.TLP_TRANSITION
                ev.pattern = matches[0].id
                continue
            unexplained.append(ev)

    ratios = {}
    if power is not None and voltage is not None and sensitivity is not None:
        ratios = consistency_ratios(unexplained, power, voltage, np.asarray(sensitivity), T)
    for ev in unexplained:
        if id(ev) in ratios:
            ev.consistency = ratios[id(ev)]
            ev.kind = (EventKindDetected.FRAUD if ev.consistency >= fraud_ratio
                       else EventKindDetected.INVISIBLE)
        elif state_concurrent(ev) or others_concurrent(ev):
            ev.kind = EventKindDetected.INVISIBLE
        else:
            ev.kind = EventKindDetected.FRAUD

    events = sorted(all_events, key=lambda e: (e.t_cp, int(e.node) if e.node.isdigit() else 0))
    report = DetectionReport(
        events,
        {"N": state_trace.n_rows, "T": T,
         "dT": step},
        th.epsilon,
        scenario,
    )
    report.periods = event_periods(events)
    invisible = [e for e in events if e.kind is EventKindDetected.INVISIBLE]
    report.ulp_profile_support = merged_support(invisible)
    return report


def _dominant(matches, coef, library, t, tol):
    ids = [p.id for p in library]
    best, size = matches[0].id, -1.0
    for p in matches:
        k = ids.index(p.id)
        cps = [c for c in p.cps if abs(c - t) <= tol]
        c = cps[0]
        jump = abs(coef[k] * (p.profile[min(c, p.S - 1)] - p.profile[max(c - 1, 0)]))
        if jump > size:
            best, size = p.id, jump
    return best


def _pairs(events):
    """Consecutive (on, off) pairs; known steps must have opposite signs."""
    evs = sorted(events, key=lambda e: e.t_cp)
    if len(evs) % 2:
        raise PairingError(f"{len(evs)} change points cannot be paired",
                           orphans=[e.t_cp for e in evs])
    out = []
    for a, b in zip(evs[::2], evs[1::2]):
        if a.step and b.step and (a.step > 0) == (b.step > 0):
            raise PairingError(f"change points {a.t_cp}, {b.t_cp} do not alternate",
                               orphans=[a.t_cp, b.t_cp])
        out.append((a.t_cp, b.t_cp))
    return out


def event_periods(events) -> list[dict]:
    out = []
    nodes = sorted({e.node for e in events}, key=lambda n: int(n) if n.isdigit() else 0)
    for node in nodes:
        for kind in (EventKindDetected.FRAUD, EventKindDetected.INVISIBLE):
            evs = [e for e in events if e.node == node and e.kind is kind]
            if not evs:
                continue
            try:
                pairs = _pairs(evs)
            except PairingError as exc:
                out.append({"node": node, "kind": kind.value, "error": str(exc),
                            "orphans": exc.orphans})
                continue
            out.extend({"node": node, "kind": kind.value, "start": a, "end": b}
                       for a, b in pairs)
    return out


def build_ulp_step(events, samples_per_day: int, *, resolution: int = 1,
                   id="ulp1") -> LoadPattern:
    """0/1 daily step profile: 1 on [t_a, t_b) for each rise/fall pair."""
    profile = np.zeros(samples_per_day)
    for a, b in _pairs(events):
        a, b = (_snap(a, resolution), _snap(b, resolution))
        profile[max(0, a):min(samples_per_day, b)] = 1.0
    return LoadPattern(id, profile, kind=PatternKind.ULP)


def _snap(t, resolution):
    return int(round(t / resolution) * resolution) if resolution > 1 else int(t)


def merged_support(events) -> list[list[int]]:
    """Union of the on-intervals of all invisible events, each node paired separately."""
    spans = []
    for node in sorted({e.node for e in events}):
        try:
            spans.extend(_pairs([e for e in events if e.node == node]))
        except PairingError:
            continue
    spans.sort()
    merged = []
    for a, b in spans:
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return merged
