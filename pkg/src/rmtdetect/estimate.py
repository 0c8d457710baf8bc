"""Least-squares recovery of load-pattern coefficients."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import CollinearPatternsError, ShapeError

RANK_RTOL = 1e-10


class PatternKind(str, enum.Enum):
    TLP = "tlp"
    ULP = "ulp"


def change_points(profile) -> list[int]:
    profile = np.asarray(profile, dtype=float)
    return [int(i) for i in np.flatnonzero(np.diff(profile) != 0) + 1]


@dataclass
class LoadPattern:
    """A daily profile sampled S times; ``cps`` are the indices where it changes."""

    id: str
    profile: np.ndarray
    cps: list[int] = field(default=None)
    kind: PatternKind = PatternKind.TLP

    def __post_init__(self):
        self.profile = np.asarray(self.profile, dtype=float).ravel()
        self.kind = PatternKind(self.kind)
        if self.cps is None:
            self.cps = change_points(self.profile)
        else:
            self.cps = sorted(int(c) for c in self.cps)

    @classmethod
    def from_hourly(cls, id, hourly, samples_per_hour, kind=PatternKind.TLP):
        """Zero-order hold of per-hour values."""
        return cls(id, np.repeat(np.asarray(hourly, dtype=float), samples_per_hour), kind=kind)

    @property
    def S(self) -> int:
        return self.profile.size

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind.value, "profile": self.profile.tolist(),
                "cps": list(self.cps)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["profile"], d.get("cps"), d.get("kind", "tlp"))


@dataclass
class CoefficientVector:
    values: dict[str, float]
    residual_norm: float

    def __getitem__(self, key):
        return self.values[key]

    def as_array(self, ids=None) -> np.ndarray:
        ids = list(self.values) if ids is None else ids
        return np.array([self.values[i] for i in ids])


def pattern_matrix(patterns) -> np.ndarray:
    if not patterns:
        raise CollinearPatternsError("pattern library is empty", subset=[])
    S = patterns[0].S
    for p in patterns:
        if p.S != S:
            raise ShapeError(f"pattern {p.id} has {p.S} samples, expected {S}")
    return np.column_stack([p.profile for p in patterns])


def _dependent_subset(P, ids):
    _, s, vt = np.linalg.svd(P, full_matrices=False)
    null = vt[-1]
    big = np.abs(null) > 1e-6 * np.max(np.abs(null))
    return [ids[i] for i in np.flatnonzero(big)]


def solve_ls(patterns, p_sigma) -> CoefficientVector:
    """Minimize ``||P a - p_sigma||`` over coefficients ``a`` (QR solve)."""
    P = pattern_matrix(patterns)
    y = np.asarray(p_sigma, dtype=float).ravel()
    if y.size != P.shape[0]:
        raise ShapeError(f"observed series has {y.size} samples, patterns have {P.shape[0]}")
    ids = [p.id for p in patterns]
    if len(set(ids)) != len(ids):
        raise ShapeError(f"duplicate pattern ids in {ids}")
    s = np.linalg.svd(P, compute_uv=False)
    if P.shape[1] > P.shape[0] or s[-1] <= RANK_RTOL * s[0]:
        subset = _dependent_subset(P, ids) if P.shape[1] <= P.shape[0] else ids
        raise CollinearPatternsError(f"patterns are collinear: {subset}", subset=subset)
    q, r = np.linalg.qr(P)
    a = solve_triangular(r, q.T @ y)
    resid = float(np.linalg.norm(P @ a - y))
    return CoefficientVector(dict(zip(ids, map(float, a))), resid)


def augment_and_estimate(tlp_library, detected_ulps, p_sigma) -> CoefficientVector:
    """Treat each detected step pattern as one more routine pattern and solve."""
    return solve_ls(list(tlp_library) + list(detected_ulps or []), p_sigma)


def to_pattern_units(p_kw, base_kw, scale=100.0):
    """Express a node's power in the 0..scale units of the pattern library."""
    return np.asarray(p_kw, dtype=float) / base_kw * scale
