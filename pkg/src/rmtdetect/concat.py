"""Factor matrices (duplicated factor vector plus noise) stacked under a state matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DEFAULT_SNR_DB = 20.0


def default_k(n_state: int) -> int:
    return max(1, round(0.3 * n_state))


def eta_for_snr(c_j, snr_db: float) -> float:
    return float(np.std(c_j)) * 10.0 ** (-snr_db / 20.0)


@dataclass(frozen=True)
class ConcatSpec:
    K: int
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ShapeError(f"duplication count K must be a positive integer, got {self.K}")
        if not self.eta >= 0:
            raise ValueError(f"noise magnitude must be >= 0, got {self.eta}")

    @classmethod
    def for_state(cls, n_state: int, eta: float = 0.0, seed: int = 0, K=None):
        return cls(default_k(n_state) if K is None else K, eta, seed)

    @classmethod
    def from_snr(cls, c_j, snr_db: float = DEFAULT_SNR_DB, *, K: int, seed: int = 0):
        return cls(K, eta_for_snr(c_j, snr_db), seed)


@dataclass(frozen=True)
class ConcatMatrix:
    data: np.ndarray
    n_state: int
    factor_node: str | None = None

    @property
    def state_rows(self) -> range:
        return range(self.n_state)

    @property
    def factor_rows(self) -> range:
        return range(self.n_state, self.data.shape[0])


def build_factor_matrix(c_j, spec: ConcatSpec) -> np.ndarray:
    c_j = np.asarray(c_j, dtype=float).ravel()
    if c_j.size < 1:
        raise ShapeError("factor vector is empty")
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal((spec.K, c_j.size))
    return np.broadcast_to(c_j, (spec.K, c_j.size)) + spec.eta * noise


def concatenate(B, D_j, factor_node=None, *, check_ratio=True) -> ConcatMatrix:
    B = np.asarray(B, dtype=float)
    D_j = np.asarray(D_j, dtype=float)
    if B.ndim != 2 or B.shape[0] == 0:
        raise ShapeError("state matrix is empty")
    if D_j.ndim != 2 or D_j.shape[0] == 0:
        raise ShapeError("factor matrix is empty; K must be >= 1")
    if B.shape[1] != D_j.shape[1]:
        raise ShapeError(f"column mismatch: state has {B.shape[1]}, factor has {D_j.shape[1]}")
    rows = B.shape[0] + D_j.shape[0]
    if check_ratio and rows > B.shape[1]:
        raise ShapeError(f"(N+K)/T = {rows}/{B.shape[1]} exceeds 1")
    return ConcatMatrix(np.vstack([B, D_j]), B.shape[0], factor_node)
