"""Ensemble estimators: intensities, momentum spectra, correlations and step-size checks.

Spectra use the unitary transform ``X(k)`` of the complex field
``X = X1 + i X2``. The vector trace ``|X1(k)|^2 + |X2(k)|^2`` equals
``(|X(k)|^2 + |X(-k)|^2) / 2``, and the reported density is

    S(k) = dA * (|X(k)|^2 + |X(-k)|^2) / 2,

which for the linear equation with decay rate ``lambda(k)`` has the exact
stationary value ``1 / lambda(k)`` on the lattice. Its inverse transform
divided by ``dA`` is the real-space trace correlation, and ``S`` summed
over ``k`` divided by the box area is ``<|X|^2>``.

Error bars come from the spread between trajectories only: sites of one
trajectory are correlated and count as one sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.fft as sfft

from .grid import GridSpec

__all__ = [
    "EnsembleEstimate",
    "Spectrum2D",
    "RadialSpectrum",
    "RunSummary",
    "estimate",
    "mean_intensity",
    "trajectory_intensity",
    "symmetrized_power",
    "momentum_spectrum",
    "radial_average",
    "spatial_correlation",
    "step_convergence",
    "TimeSeriesRecorder",
    "SpectrumAccumulator",
]

_AXES = (-2, -1)


@dataclass(frozen=True)
class EnsembleEstimate:
    """Mean over independent samples with its standard error."""

    mean: float
    stderr: float
    n: int

    def __post_init__(self):
        if self.stderr < 0 or not self.n >= 0:
            raise ValueError("stderr and n must be non-negative")

    def __sub__(self, other: "EnsembleEstimate") -> "EnsembleEstimate":
        # independent samples; for paired samples estimate the difference directly
        return EnsembleEstimate(self.mean - other.mean, math.hypot(self.stderr, other.stderr),
                                min(self.n, other.n))


def estimate(samples) -> EnsembleEstimate:
    """Mean and standard error of independent per-trajectory values (compensated sums)."""
    x = np.asarray(samples)
    if x.ndim != 1:
        raise ValueError("samples must be one-dimensional")
    n = x.size
    if n < 2:
        raise ValueError("at least 2 samples are required")
    if np.iscomplexobj(x):
        re, im = estimate(x.real), estimate(x.imag)
        return EnsembleEstimate(complex(re.mean, im.mean), math.hypot(re.stderr, im.stderr), n)
    mean = math.fsum(x) / n
    var = math.fsum((x - mean) ** 2) / (n - 1)
    return EnsembleEstimate(mean, math.sqrt(var / n), n)


def _complex_field(fields):
    """Accept complex ``(..., nx, ny)`` or real vector ``(..., 2, nx, ny)`` fields."""
    a = np.asarray(fields)
    if np.iscomplexobj(a):
        return a
    if a.ndim >= 3 and a.shape[-3] == 2:
        return a[..., 0, :, :] + 1j * a[..., 1, :, :]
    raise ValueError("real input must carry a component axis of length 2 before the grid axes")


def trajectory_intensity(fields) -> np.ndarray:
    """Site average of ``X1^2 + X2^2`` for each trajectory (leading axes kept)."""
    X = _complex_field(fields)
    return np.mean(X.real**2 + X.imag**2, axis=_AXES)


def mean_intensity(fields) -> EnsembleEstimate:
    """Spatial and ensemble average of ``X . X`` over an ensemble ``(n_traj, ...)``."""
    X = _complex_field(fields)
    if X.ndim != 3:
        raise ValueError("expected an ensemble of shape (n_traj, nx, ny) or (n_traj, 2, nx, ny)")
    return estimate(trajectory_intensity(X))


def symmetrized_power(Xhat) -> np.ndarray:
    """``(|X(k)|^2 + |X(-k)|^2) / 2`` on the FFT-ordered grid (unitary spectra in)."""
    p = Xhat.real**2 + Xhat.imag**2
    flipped = np.roll(np.flip(p, axis=_AXES), 1, axis=_AXES)
    return 0.5 * (p + flipped)


@dataclass
class Spectrum2D:
    """Mean spectral density on the FFT-ordered grid with per-trajectory samples."""

    grid: GridSpec
    S: np.ndarray
    stderr: np.ndarray
    n: int
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def kx(self):
        return self.grid.kx

    @property
    def ky(self):
        return self.grid.ky

    def __sub__(self, other: "Spectrum2D") -> "Spectrum2D":
        """Paired difference when both carry samples from the same trajectories."""
        if self.samples is None or other.samples is None or self.samples.shape != other.samples.shape:
            raise ValueError("paired difference needs matching per-trajectory samples")
        return spectrum_from_samples(self.grid, self.samples - other.samples)


def spectrum_from_samples(grid: GridSpec, samples) -> Spectrum2D:
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    S = np.mean(samples, axis=0)
    if n > 1:
        err = np.std(samples, axis=0, ddof=1) / math.sqrt(n)
    else:
        err = np.full_like(S, np.nan)
    return Spectrum2D(grid, S, err, n, samples)


def momentum_spectrum(fields, grid: GridSpec) -> Spectrum2D:
    """``S(k)`` averaged over an ensemble of real-space fields ``(n_traj, nx, ny)``."""
    X = _complex_field(fields)
    if X.ndim == 2:
        X = X[None]
    Xhat = sfft.fft2(X, axes=_AXES, norm="ortho")
    return spectrum_from_samples(grid, grid.cell_area * symmetrized_power(Xhat))


@dataclass
class RadialSpectrum:
    """Annular means; bin ``i`` is centred at ``k = i dk`` and spans ``[(i - 1/2) dk, (i + 1/2) dk)``."""

    k: np.ndarray
    S: np.ndarray
    stderr: np.ndarray
    counts: np.ndarray
    edges: np.ndarray


def radial_bins(grid: GridSpec):
    kabs = np.sqrt(grid.k2)
    idx = np.rint(kabs / grid.dk).astype(int)
    return idx, idx.max() + 1


def radial_average(spectrum: Spectrum2D) -> RadialSpectrum:
    """Mean over annuli of width ``dk = 2 pi / max(lx, ly)``; errors from per-trajectory profiles."""
    grid = spectrum.grid
    idx, nb = radial_bins(grid)
    counts = np.bincount(idx.ravel(), minlength=nb)
    k = np.arange(nb) * grid.dk
    edges = np.concatenate([[0.0], (np.arange(nb) + 0.5) * grid.dk])

    def profile(S):
        return np.bincount(idx.ravel(), weights=S.ravel(), minlength=nb) / counts

    if spectrum.samples is not None and spectrum.n > 1:
        prof = np.array([profile(s) for s in spectrum.samples])
        S = prof.mean(axis=0)
        err = prof.std(axis=0, ddof=1) / math.sqrt(spectrum.n)
    else:
        S = profile(spectrum.S)
        err = np.full(nb, np.nan)
    return RadialSpectrum(k, S, err, counts, edges)


def spatial_correlation(spectrum: Spectrum2D, separations: Optional[Sequence] = None):
    """Trace correlation ``<X(r) . X(r + d)>`` from the mean spectrum.

    Without ``separations`` the full periodic map (FFT-ordered displacements)
    is returned. Otherwise ``separations`` is a sequence of integer lattice
    offsets ``(i, j)``, or of scalars meaning offsets ``(i, 0)`` along x.
    """
    grid = spectrum.grid
    C = np.fft.ifft2(spectrum.S).real / grid.cell_area
    if separations is None:
        return C
    out = []
    for d in separations:
        i, j = (d, 0) if np.isscalar(d) else d
        if int(i) != i or int(j) != j:
            raise ValueError("separations must be integer lattice offsets")
        out.append(C[int(i) % grid.nx, int(j) % grid.ny])
    return np.array(out)


# ---------------------------------------------------------------------------
# step-size comparison


@dataclass(frozen=True)
class RunSummary:
    """Identity of a run plus its scalar observables, for coarse/fine comparisons.

    ``dt / 2**refine`` is the time resolution of the underlying Brownian path.
    """

    seed: int
    trajectories: range
    duration: float
    dt: float
    refine: int
    observables: dict

    @property
    def noise_resolution(self) -> float:
        return self.dt / 2**self.refine


def _value(v):
    return v.mean if isinstance(v, EnsembleEstimate) else v


def step_convergence(coarse: RunSummary, fine: RunSummary) -> dict:
    """``|coarse - fine|`` for every observable the two runs share.

    The runs must be driven by the same Brownian paths: equal seeds, equal
    trajectory blocks, equal duration and equal noise resolution.
    """
    if coarse.seed != fine.seed or coarse.trajectories != fine.trajectories:
        raise ValueError("coarse and fine runs must share seed and trajectories")
    if not math.isclose(coarse.duration, fine.duration, rel_tol=1e-12, abs_tol=1e-12):
        raise ValueError("coarse and fine runs must cover the same duration")
    if not math.isclose(coarse.noise_resolution, fine.noise_resolution, rel_tol=1e-12):
        raise ValueError("coarse and fine runs do not share the Brownian path resolution")
    if coarse.dt < fine.dt:
        raise ValueError("coarse run has the smaller step")
    keys = [k for k in fine.observables if k in coarse.observables]
    return {k: abs(_value(coarse.observables[k]) - _value(fine.observables[k])) for k in keys}


# ---------------------------------------------------------------------------
# recorders driven by dynamics.evolve


class TimeSeriesRecorder:
    """Per-trajectory site-averaged intensities of the named spectral fields.

    ``keys`` selects entries of ``system.spectral()`` (``"X"``, ``"Xg"``, ...).
    Intensities come from Parseval on the unitary spectra.
    """

    def __init__(self, keys=("X",)):
        self.keys = tuple(keys)
        self.tau: list[float] = []
        self.value: list[float] = []
        self.etas: list[tuple] = []
        self.data: dict[str, list] = {k: [] for k in self.keys}
        self.alive: list[np.ndarray] = []

    def __call__(self, system, value, etas):
        spec = system.spectral()
        self.tau.append(system.tau)
        self.value.append(value)
        self.etas.append(tuple(etas) if etas is not None else (math.nan,) * 3)
        self.alive.append(system.alive.copy())
        for k in self.keys:
            s = spec[k]
            self.data[k].append(np.sum(s.real**2 + s.imag**2, axis=_AXES) / (s.shape[-1] * s.shape[-2]))

    def series(self, key="X") -> np.ndarray:
        """Array ``(n_records, n_traj)``."""
        return np.array(self.data[key])

    def pointwise(self, key="X", minus=None) -> list[EnsembleEstimate]:
        """Estimate at every record; ``minus`` gives a paired per-trajectory difference."""
        a = self.series(key)
        if minus is not None:
            a = a - self.series(minus)
        out = []
        for row, alive in zip(a, self.alive):
            out.append(estimate(row[alive]))
        return out

    def window_average(self, key="X", start=-math.inf, stop=math.inf, minus=None) -> EnsembleEstimate:
        """Per-trajectory time average over ``start <= tau <= stop``, then ensemble estimate."""
        tau = np.array(self.tau)
        sel = (tau >= start - 1e-12) & (tau <= stop + 1e-12)
        if not sel.any():
            raise ValueError("no records in the requested window")
        a = self.series(key)[sel]
        if minus is not None:
            a = a - self.series(minus)[sel]
        alive = np.logical_and.reduce(np.array(self.alive)[sel], axis=0)
        return estimate(a.mean(axis=0)[alive])


class SpectrumAccumulator:
    """Time-averaged per-trajectory spectral densities ``S(k)`` after ``start``."""

    def __init__(self, grid: GridSpec, keys=("X",), start=0.0):
        self.grid = grid
        self.keys = tuple(keys)
        self.start = float(start)
        self.count = 0
        self.sums: dict[str, np.ndarray] = {}
        self.alive = None

    def __call__(self, system, value=None, etas=None):
        if system.tau < self.start - 1e-12:
            return
        spec = system.spectral()
        for k in self.keys:
            p = symmetrized_power(spec[k])
            if k in self.sums:
                self.sums[k] += p
            else:
                self.sums[k] = p.copy()
        self.alive = system.alive.copy() if self.alive is None else self.alive & system.alive
        self.count += 1

    def spectrum(self, key="X", minus=None) -> Spectrum2D:
        if self.count == 0:
            raise ValueError("no spectra accumulated")
        s = self.sums[key] / self.count
        if minus is not None:
            s = s - self.sums[minus] / self.count
        return spectrum_from_samples(self.grid, self.grid.cell_area * s[self.alive])
