"""Figures for traces, spectra and estimates (written to PNG with the Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .spectral import CovarianceSpectrum, MpLaw  # noqa: E402

DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def _hours(times, samples_per_hour):
    return np.asarray(times) / samples_per_hour if samples_per_hour else np.asarray(times)


def plot_trace(trace, path, *, epsilon=1.96, samples_per_hour=None, events=(), title=None):
    """Statistic with its theoretical band; change points marked."""
    x = _hours(trace.times, samples_per_hour)
    lo = trace.mean_theory - epsilon * trace.sigma_theory
    hi = trace.mean_theory + epsilon * trace.sigma_theory
    fig, ax = plt.subplots(figsize=(9, 3.2))
    ax.plot(x, trace.tau, lw=0.8, color="k", label=r"$\tau$")
    ax.fill_between(x, lo, hi, color="tab:blue", alpha=0.25, lw=0,
                    label=rf"$\mathbb{{E}}\pm{epsilon:g}\sigma$")
    for ev in events:
        ax.axvline(_hours([ev.t_cp], samples_per_hour)[0], color="tab:red", lw=0.8, ls="--")
    ax.set_xlabel("hour" if samples_per_hour else "window end")
    ax.set_ylabel("LES")
    ax.set_title(title or trace.label)
    ax.legend(loc="upper right", frameon=False, fontsize=8)
    return _save(fig, path)


def plot_z_overview(node_traces: dict, path, *, epsilon=1.96, samples_per_hour=None):
    """Heat map of |z| for every node trace."""
    nodes = list(node_traces)
    z = np.vstack([np.abs(node_traces[n].z) for n in nodes])
    first = next(iter(node_traces.values()))
    x = _hours(first.times, samples_per_hour)
    fig, ax = plt.subplots(figsize=(9, 0.18 * len(nodes) + 1.5))
    img = ax.imshow(np.log10(np.maximum(z, 1e-3)), aspect="auto", cmap="magma",
                    extent=[x[0], x[-1], len(nodes) - 0.5, -0.5], vmin=np.log10(epsilon))
    ax.set_yticks(range(len(nodes)))
    ax.set_yticklabels(nodes, fontsize=6)
    ax.set_xlabel("hour" if samples_per_hour else "window end")
    ax.set_ylabel("node")
    fig.colorbar(img, ax=ax, label=r"$\log_{10}|z|$")
    return _save(fig, path)


def plot_esd(spectrum: CovarianceSpectrum, path, bins=40):
    """Eigenvalue histogram against the Marchenko-Pastur density."""
    law = MpLaw(spectrum.c, spectrum.convention)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(spectrum.eigenvalues, bins=bins, density=True, color="0.7", edgecolor="0.4",
            label="ESD")
    x = np.linspace(law.a, law.b, 400)
    ax.plot(x, law.density(x), color="tab:red", label="M-P")
    ax.set_xlabel(r"$\lambda$")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ring(eigs, c, path):
    """Transformed eigenvalues in the complex plane with the two ring radii."""
    eigs = np.asarray(eigs, dtype=complex)
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    t = np.linspace(0, 2 * np.pi, 400)
    for r in (1.0, np.sqrt(1 - c)):
        ax.plot(r * np.cos(t), r * np.sin(t), color="tab:red", lw=1)
    ax.scatter(eigs.real, eigs.imag, s=6, color="k")
    ax.set_aspect("equal")
    ax.set_xlabel("Re")
    ax.set_ylabel("Im")
    return _save(fig, path)


def plot_estimate(observed, fitted, path, *, samples_per_hour=None, baseline=None, title=None):
    """Observed node series against its pattern reconstruction."""
    x = _hours(np.arange(len(observed)), samples_per_hour)
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(x, observed, lw=0.6, color="0.5", label="observed")
    if baseline is not None:
        ax.plot(x, baseline, lw=1.2, color="tab:orange", ls="--", label="routine only")
    ax.plot(x, fitted, lw=1.2, color="tab:blue", label="with detected pattern")
    ax.set_xlabel("hour" if samples_per_hour else "sample")
    ax.set_ylabel("pattern units")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)
