"""Linear eigenvalue statistics and their large-N mean and variance.

Theory is evaluated in the ``1/N`` covariance convention, where the limiting
spectrum is supported on ``zeta(theta) = 1 + 1/c + (2/sqrt(c)) sin(theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import AccuracyError, DomainError, NumericError
from .spectral import CovarianceSpectrum

MIN_QUAD_NODES = 32
DEFAULT_QUAD_NODES = 128
CONVERGENCE_RTOL = 1e-6
DIAGONAL_TOL = 1e-10


@dataclass(frozen=True)
class TestFunction:
    name: str
    eval: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    domain_min: float = -np.inf

    __test__ = False  # keep pytest from collecting this class

    def __call__(self, x):
        return self.eval(x)

    def check_domain(self, lam) -> None:
        lam = np.asarray(lam)
        if np.isfinite(self.domain_min) and lam.size and np.min(lam) <= self.domain_min:
            bad = float(np.min(lam))
            raise DomainError(
                f"{self.name}: eigenvalue {bad:.6g} outside the domain (> {self.domain_min})",
                value=bad,
            )


def chebyshev_t2() -> TestFunction:
    return TestFunction("chebyshevT2", lambda x: 2.0 * np.square(x) - 1.0, lambda x: 4.0 * x)


def _lr(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return x - np.log(x) - 1.0


def likelihood_ratio() -> TestFunction:
    return TestFunction("likelihoodRatio", _lr, lambda x: 1.0 - 1.0 / x, 0.0)


def custom(name, f, df, domain_min=-np.inf) -> TestFunction:
    return TestFunction(name, f, df, domain_min)


BUILTIN = {"chebyshevT2": chebyshev_t2, "likelihoodRatio": likelihood_ratio}


def test_function(name: str) -> TestFunction:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise ValueError(f"unknown test function {name!r}; choose from {sorted(BUILTIN)}") from None


test_function.__test__ = False


@dataclass(frozen=True)
class CltParameters:
    c: float
    kappa4: float = 0.0
    quad_nodes: int = DEFAULT_QUAD_NODES

    def __post_init__(self):
        if not 0 < self.c <= 1:
            raise ValueError(f"c must lie in (0, 1], got {self.c}")
        if self.quad_nodes < MIN_QUAD_NODES:
            raise ValueError(f"quad_nodes must be >= {MIN_QUAD_NODES}")

    @property
    def center(self) -> float:
        return 1.0 + 1.0 / self.c

    @property
    def radius(self) -> float:
        return 2.0 / np.sqrt(self.c)

    def zeta(self, theta):
        return self.center + self.radius * np.sin(theta)


@dataclass(frozen=True)
class LesValue:
    tau: float
    mean_theory: float
    sigma_theory: float

    def __post_init__(self):
        if not self.sigma_theory > 0:
            raise NumericError(f"theoretical sigma must be positive, got {self.sigma_theory}")

    @property
    def z(self) -> float:
        return (self.tau - self.mean_theory) / self.sigma_theory


def les(spectrum, phi: TestFunction) -> float:
    """Sum of ``phi`` over the eigenvalues."""
    lam = spectrum.eigenvalues if isinstance(spectrum, CovarianceSpectrum) else np.asarray(spectrum)
    phi.check_domain(lam)
    return float(np.sum(phi(lam)))


def les_batch(eigs: np.ndarray, phi: TestFunction) -> np.ndarray:
    phi.check_domain(eigs)
    return np.sum(phi(eigs), axis=-1)


def _require_domain(params: CltParameters, phi: TestFunction):
    a = (1.0 / np.sqrt(params.c) - 1.0) ** 2
    if np.isfinite(phi.domain_min) and a <= phi.domain_min + 1e-12:
        raise DomainError(
            f"{phi.name}: limiting support touches {a:.3g} at c={params.c}; need c < 1",
            value=a,
        )


def _theta_integral(fn, limit=200) -> float:
    val, err = integrate.quad(fn, -np.pi / 2, np.pi / 2, limit=limit, epsabs=1e-13, epsrel=1e-12)
    return val


def asymptotic_mean_per_row(params: CltParameters, phi: TestFunction) -> float:
    """Integral of ``phi`` against the limiting spectral density."""
    c = params.c
    if phi.name == "chebyshevT2":
        return 2.0 * (1.0 + c) / c**2 - 1.0
    _require_domain(params, phi)
    B = params.radius
    # x = zeta(theta) turns rho(x) dx into B^2 cos^2 / (2 pi zeta) dtheta
    return _theta_integral(
        lambda th: float(phi(params.zeta(th))) * B**2 * np.cos(th) ** 2
        / (2 * np.pi * params.zeta(th))
    )


def mean_correction(params: CltParameters, phi: TestFunction) -> float:
    """O(1) offset between E[tau] and its first-order limit for real entries.

    ``(phi(a) + phi(b))/4 - (1/2pi) int phi(zeta) - (kappa4/pi) int phi(zeta) cos 2theta``
    """
    _require_domain(params, phi)
    a = params.center - params.radius
    b = params.center + params.radius
    edge = 0.25 * (float(phi(a)) + float(phi(b)))
    arcsine = _theta_integral(lambda th: float(phi(params.zeta(th)))) / (2 * np.pi)
    k4 = _theta_integral(lambda th: float(phi(params.zeta(th))) * np.cos(2 * th)) / np.pi
    return edge - arcsine - params.kappa4 * k4


def les_mean(N: int, params: CltParameters, phi: TestFunction, *, finite_n=False) -> float:
    """Theoretical mean of the statistic for an N-row window.

    ``finite_n`` adds the O(1) real-entry correction, which matters when the
    mean is compared against sampling error at moderate N.
    """
    _require_domain(params, phi)
    m = N * asymptotic_mean_per_row(params, phi)
    if finite_n:
        m += mean_correction(params, phi)
    return m


@lru_cache(maxsize=256)
def _gauss_legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x * np.pi / 2, w * np.pi / 2


def _variance_terms_at(params: CltParameters, phi: TestFunction, n: int):
    th, w = _gauss_legendre(n)
    z = params.zeta(th)
    f = phi(z)
    s = np.sin(th)
    dz = z[:, None] - z[None, :]
    df = f[:, None] - f[None, :]
    near = np.abs(dz) < DIAGONAL_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(near, 0.0, df / np.where(near, 1.0, dz))
    if np.any(near):
        mid = params.zeta(0.5 * (th[:, None] + th[None, :]))
        psi = np.where(near, phi.deriv(mid), psi)
    kernel = psi**2 * (1.0 - s[:, None] * s[None, :])
    double = w @ kernel @ w
    single = float(np.dot(w, f * s))
    if not (np.isfinite(double) and np.isfinite(single)):
        raise NumericError(f"{phi.name}: non-finite variance integrand at c={params.c}")
    base = 2.0 / (params.c * np.pi**2) * double
    k4 = single**2 / np.pi**2
    return base, k4


def variance_terms(params: CltParameters, phi: TestFunction) -> tuple[float, float]:
    """``(base, k4)`` with variance = base + kappa4 * k4, convergence-checked."""
    _require_domain(params, phi)
    n = params.quad_nodes
    base, k4 = _variance_terms_at(params, phi, n)
    base2, k42 = _variance_terms_at(params, phi, 2 * n)
    scale = max(abs(base2) + abs(params.kappa4 * k42), 1e-300)
    change = abs(base2 - base) + abs(params.kappa4) * abs(k42 - k4)
    if change / scale > CONVERGENCE_RTOL:
        raise AccuracyError(
            f"{phi.name}: variance quadrature not converged at c={params.c} "
            f"(relative change {change / scale:.2e} on doubling {n} nodes)"
        )
    return base, k4


def les_variance(params: CltParameters, phi: TestFunction) -> float:
    base, k4 = variance_terms(params, phi)
    return base + params.kappa4 * k4


def t2_variance_closed_form(c: float, kappa4: float = 0.0) -> float:
    A = 1.0 + 1.0 / c
    return 32 * A**2 / c + 16 / c**2 + 16 * kappa4 * A**2 / c


def estimate_kappa4(X) -> float:
    data = getattr(X, "data", X)
    data = np.asarray(data, dtype=float)
    return float(np.mean(data**4) - 3.0)


def les_value(spectrum: CovarianceSpectrum, phi: TestFunction, kappa4: float,
              quad_nodes: int = DEFAULT_QUAD_NODES, finite_n=True) -> LesValue:
    params = CltParameters(spectrum.c, kappa4, quad_nodes)
    tau = les(spectrum, phi)
    mean = les_mean(spectrum.N, params, phi, finite_n=finite_n)
    var = les_variance(params, phi)
    if var <= 0:
        raise NumericError(f"non-positive theoretical variance {var:.3g}")
    return LesValue(tau, mean, float(np.sqrt(var)))


def clt_calibration(N: int, T: int, reps: int, phi: TestFunction, *, entries="gaussian",
                    seed=0, quad_nodes: int = DEFAULT_QUAD_NODES) -> dict:
    """Monte Carlo spread of the statistic on raw i.i.d. windows against theory.

    Windows are not standardized, so the entry cumulant is the population one.
    """
    from scipy import stats

    from .spectral import ENTRY_KAPPA4, Convention, batch_spectra, random_matrix

    rng = np.random.default_rng(seed)
    kappa4 = ENTRY_KAPPA4[entries]
    params = CltParameters(N / T, kappa4, quad_nodes)
    taus = np.empty(reps)
    for i in range(0, reps, 100):
        n = min(100, reps - i)
        stack = np.stack([random_matrix(entries, N, T, rng) for _ in range(n)])
        taus[i:i + n] = les_batch(batch_spectra(stack, Convention.OVER_N), phi)
    mean_th = les_mean(N, params, phi, finite_n=True)
    var_th = float(les_variance(params, phi))
    mean, var = float(taus.mean()), float(taus.var(ddof=1))
    se = float(np.sqrt(var / reps))
    ks = stats.kstest(taus, "norm", args=(mean, np.sqrt(var)))
    return {
        "N": N, "T": T, "c": N / T, "reps": reps, "entries": entries, "kappa4": kappa4,
        "phi": phi.name, "sample_mean": mean, "sample_variance": var, "standard_error": se,
        "theory_mean": mean_th, "theory_variance": var_th,
        "mean_z": (mean - mean_th) / se, "variance_ratio": var / var_th,
        "ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue),
    }
