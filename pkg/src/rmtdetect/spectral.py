"""Covariance spectra, the Marchenko-Pastur law and the single-ring transform."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.stats import ortho_group

from .errors import NumericError, ShapeError
from .ingest import TimeSeriesWindow

CLAMP = 1e-10


class Convention(str, enum.Enum):
    OVER_T = "overT"
    OVER_N = "overN"


def _as_matrix(X) -> np.ndarray:
    data = X.data if isinstance(X, TimeSeriesWindow) else np.asarray(X, dtype=float)
    if data.ndim != 2:
        raise ShapeError("expected a 2-D matrix")
    return data


@dataclass(frozen=True)
class CovarianceSpectrum:
    eigenvalues: np.ndarray
    convention: Convention
    c: float

    @property
    def N(self) -> int:
        return len(self.eigenvalues)

    def to_json(self, law: MpLaw | None = None) -> str:
        law = law or MpLaw(self.c, self.convention)
        return json.dumps({"eigenvalues": self.eigenvalues.tolist(), "a": law.a, "b": law.b})


def scale_factor(N: int, T: int, convention) -> float:
    return 1.0 / T if Convention(convention) is Convention.OVER_T else 1.0 / N


def clamp_eigenvalues(lam: np.ndarray) -> np.ndarray:
    lam = np.sort(lam, axis=-1)
    if np.any(lam < -CLAMP * max(1.0, float(np.max(np.abs(lam), initial=0.0)))):
        raise NumericError(f"covariance has a negative eigenvalue {lam.min():.3g}")
    return np.maximum(lam, 0.0)


def covariance_spectrum(X, convention=Convention.OVER_T) -> CovarianceSpectrum:
    """Ascending eigenvalues of ``S X X^T`` with S = 1/T or 1/N."""
    data = _as_matrix(X)
    if not np.all(np.isfinite(data)):
        raise NumericError("matrix has non-finite entries")
    n, t = data.shape
    if n > t:
        raise ShapeError(f"N={n} > T={t}")
    conv = Convention(convention)
    gram = data @ data.T * scale_factor(n, t, conv)
    lam = clamp_eigenvalues(np.linalg.eigvalsh(gram))
    return CovarianceSpectrum(lam, conv, n / t)


def batch_spectra(stack: np.ndarray, convention=Convention.OVER_N) -> np.ndarray:
    """Eigenvalues for a (W, N, T) stack of windows, shape (W, N)."""
    n, t = stack.shape[1:]
    gram = np.matmul(stack, stack.transpose(0, 2, 1)) * scale_factor(n, t, convention)
    return np.maximum(np.linalg.eigvalsh(gram), 0.0)


@dataclass(frozen=True)
class MpLaw:
    c: float
    convention: Convention = Convention.OVER_T

    def __post_init__(self):
        if not 0 < self.c <= 1:
            raise ValueError(f"aspect ratio must lie in (0, 1], got {self.c}")
        object.__setattr__(self, "convention", Convention(self.convention))

    @property
    def a(self) -> float:
        r = np.sqrt(self.c)
        if self.convention is Convention.OVER_T:
            return (1 - r) ** 2
        return (1 / r - 1) ** 2

    @property
    def b(self) -> float:
        r = np.sqrt(self.c)
        if self.convention is Convention.OVER_T:
            return (1 + r) ** 2
        return (1 / r + 1) ** 2

    def density(self, x):
        return mp_density(self, x)

    def cdf(self, x):
        return _mp_cdf(self.c, self.convention.value, float(x))


def mp_density(law: MpLaw, x):
    """Marchenko-Pastur density; zero outside [a, b]."""
    x = np.asarray(x, dtype=float)
    if law.convention is Convention.OVER_N:
        # lambda_N = lambda_T / c
        return law.c * mp_density(MpLaw(law.c), law.c * x)
    a, b, c = law.a, law.b, law.c
    out = np.zeros_like(x)
    inside = (x > a) & (x < b)
    xi = x[inside]
    out[inside] = np.sqrt((xi - a) * (b - xi)) / (2 * np.pi * c * xi)
    return out if out.ndim else float(out)


@lru_cache(maxsize=4096)
def _mp_cdf(c: float, convention: str, x: float) -> float:
    if convention == Convention.OVER_N.value:
        return _mp_cdf(c, Convention.OVER_T.value, c * x)
    law = MpLaw(c)
    a, b = law.a, law.b
    if x <= a:
        return 0.0
    if x >= b:
        return 1.0
    # algebraic weights absorb the square-root (or 1/sqrt at a=0) endpoint
    if a > 0:
        val, _ = integrate.quad(lambda u: np.sqrt(b - u) / (2 * np.pi * c * u), a, x,
                                weight="alg", wvar=(0.5, 0.0), epsabs=1e-13, epsrel=1e-11)
    else:
        val, _ = integrate.quad(lambda u: np.sqrt(b - u) / (2 * np.pi * c), 0.0, x,
                                weight="alg", wvar=(-0.5, 0.0), epsabs=1e-13, epsrel=1e-11)
    return min(1.0, max(0.0, val))


def ks_distance(spectrum: CovarianceSpectrum, law: MpLaw) -> float:
    """Sup distance between the eigenvalue ECDF and the M-P CDF."""
    if Convention(spectrum.convention) is not law.convention:
        raise ValueError("spectrum and law use different covariance conventions")
    lam = np.sort(spectrum.eigenvalues)
    n = len(lam)
    F = np.array([law.cdf(v) for v in lam])
    upper = np.arange(1, n + 1) / n - F
    lower = F - np.arange(0, n) / n
    return float(max(upper.max(), lower.max(), 0.0))


def ring_transform(X, seed=0) -> np.ndarray:
    """Eigenvalues of the singular-value-equivalent of ``X`` scaled to unit mean square.

    ``X = U S V^T`` is replaced by the square matrix ``W U S U^T / sqrt(T')``
    with ``W`` Haar-orthogonal, where ``T'`` makes the mean squared singular
    value 1.  For standardized data the moduli fill the annulus
    ``sqrt(1 - c) <= |z| <= 1``.
    """
    data = _as_matrix(X)
    n, t = data.shape
    if n > t:
        raise ShapeError(f"N={n} > T={t}")
    try:
        u, s, _ = np.linalg.svd(data, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed: {exc}") from exc
    rms = np.sqrt(np.mean(s**2))
    if rms == 0:
        raise NumericError("matrix is identically zero")
    w = np.array([[1.0]]) if n == 1 else ortho_group.rvs(n, random_state=seed)
    z = w @ (u * (s / rms)) @ u.T
    ev = np.linalg.eigvals(z)
    if n == 1:
        return ev.real
    return ev


def ring_fraction(eigs, c: float, margin: float = 0.05) -> float:
    m = np.abs(np.asarray(eigs))
    inner = np.sqrt(1 - c) - margin
    return float(np.mean((m >= inner) & (m <= 1 + margin)))


ENTRY_KAPPA4 = {"gaussian": 0.0, "bernoulli": -2.0, "uniform": -1.2}


def random_matrix(kind: str, N: int, T: int, rng) -> np.ndarray:
    """Zero-mean, unit-variance i.i.d. entries of the named distribution."""
    if kind == "gaussian":
        return rng.standard_normal((N, T))
    if kind == "bernoulli":
        return rng.choice([-1.0, 1.0], size=(N, T))
    if kind == "uniform":
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(N, T))
    raise ValueError(f"unknown entry distribution {kind!r}; choose from {sorted(ENTRY_KAPPA4)}")
