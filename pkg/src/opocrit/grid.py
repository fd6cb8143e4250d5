"""Periodic 2D lattice, unitary Fourier transforms and spectral operators.

Fields are numpy arrays whose last two axes are ``(nx, ny)``; any leading axes
(trajectories, components) are carried along. A two-component real vector
field ``(X1, X2)`` is stored as the complex array ``X1 + i X2`` inside the
integrators, so one complex transform handles both components.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from ._validation import check_field, check_nonnegative

__all__ = [
    "GridSpec",
    "SpectralWorkspace",
    "forward",
    "inverse",
    "laplacian",
    "biharmonic",
    "linear_propagator",
    "propagator_factor",
    "as_vector",
    "as_complex",
    "write_snapshot",
    "read_snapshot",
]

_AXES = (-2, -1)


@dataclass(frozen=True)
class GridSpec:
    """Site counts and box lengths of the periodic lattice (lengths in units of x0)."""

    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        for name in ("nx", "ny"):
            n = getattr(self, name)
            if not isinstance(n, (int, np.integer)) or n < 8:
                raise ValueError(f"{name} must be an integer >= 8, got {n!r}")
        for name in ("lx", "ly"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @cached_property
    def kx(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.nx, d=self.dx)

    @cached_property
    def ky(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.ny, d=self.dy)

    @cached_property
    def k2(self) -> np.ndarray:
        """``|k|**2`` on the FFT-ordered mode grid, shape ``(nx, ny)``."""
        return self.kx[:, None] ** 2 + self.ky[None, :] ** 2

    @property
    def dk(self) -> float:
        """Radial bin width ``2 pi / max(lx, ly)``."""
        return 2.0 * np.pi / max(self.lx, self.ly)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.nx) * self.dx

    @property
    def y(self) -> np.ndarray:
        return np.arange(self.ny) * self.dy

    def scaled(self, factor: float) -> "GridSpec":
        """Same lattice with both box lengths multiplied by ``factor``."""
        return GridSpec(self.nx, self.ny, self.lx * factor, self.ly * factor)


def forward(values, workers=None):
    """Unitary forward transform over the last two axes."""
    return sfft.fft2(values, axes=_AXES, norm="ortho", workers=workers)


def inverse(spectral, workers=None):
    return sfft.ifft2(spectral, axes=_AXES, norm="ortho", workers=workers)


def _apply_real_symbol(values, symbol):
    out = inverse(forward(values) * symbol)
    if np.isrealobj(values):
        return out.real
    return out


def laplacian(values, grid: GridSpec):
    return _apply_real_symbol(values, -grid.k2)


def biharmonic(values, grid: GridSpec):
    return _apply_real_symbol(values, grid.k2**2)


def decay_rate(grid: GridSpec, eta1p, eta2, eta3):
    """Mode decay rates ``eta1' + eta2 k^2 + eta3 k^4``."""
    return eta1p + eta2 * grid.k2 + eta3 * grid.k2**2


def propagator_factor(grid: GridSpec, eta1p, eta2, eta3, dt):
    """Per-mode multiplier ``exp(-(eta1' + eta2 k^2 + eta3 k^4) dt)``."""
    check_nonnegative("dt", dt)
    return np.exp(-decay_rate(grid, eta1p, eta2, eta3) * dt)


def linear_propagator(spectral, grid: GridSpec, eta1p, eta2, eta3, dt):
    """Exact linear evolution of a spectral field over ``dt``."""
    return spectral * propagator_factor(grid, eta1p, eta2, eta3, dt)


class SpectralWorkspace:
    """Transforms and cached propagators for one grid.

    One instance belongs to one integrator; ``workers`` is forwarded to the FFT
    library, whose threaded batch transforms give bit-identical results for any
    thread count.
    """

    def __init__(self, grid: GridSpec, workers=None):
        self.grid = grid
        self.workers = workers
        self._cache = {}

    def forward(self, values):
        return forward(values, workers=self.workers)

    def inverse(self, spectral):
        return inverse(spectral, workers=self.workers)

    def propagator(self, eta1p, eta2, eta3, dt):
        key = (float(eta1p), float(eta2), float(eta3), float(dt))
        fac = self._cache.get(key)
        if fac is None:
            if len(self._cache) > 64:
                self._cache.clear()
            fac = propagator_factor(self.grid, *key)
            self._cache[key] = fac
        return fac

    def laplacian(self, values):
        out = self.inverse(self.forward(values) * (-self.grid.k2))
        return out.real if np.isrealobj(values) else out


def as_vector(X):
    """Complex field ``X1 + i X2`` -> real array with a component axis before the grid axes."""
    X = np.asarray(X)
    return np.stack([X.real, X.imag], axis=-3)


def as_complex(V):
    """Inverse of :func:`as_vector`."""
    V = np.asarray(V)
    if V.shape[-3] != 2:
        raise ValueError("vector field must have two components on axis -3")
    return V[..., 0, :, :] + 1j * V[..., 1, :, :]


# Field snapshot files: b"OPOF", then u32 version, nx, ny, ncomp, then
# ncomp*nx*ny little-endian float64 values, component-major, row-major.
_MAGIC = b"OPOF"
_VERSION = 1


def write_snapshot(path, components, grid: GridSpec):
    """Write real components of shape ``(ncomp, nx, ny)`` (complex arrays are split into re/im)."""
    arr = np.asarray(components)
    if np.iscomplexobj(arr):
        arr = np.stack([arr.real, arr.imag], axis=-3).reshape(-1, grid.nx, grid.ny)
    if arr.ndim == 2:
        arr = arr[None]
    check_field(arr, grid, name="snapshot", leading=1)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<4I", _VERSION, grid.nx, grid.ny, arr.shape[0]))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_snapshot(path):
    """Return ``(components, nx, ny)`` from a snapshot file."""
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20 or head[:4] != _MAGIC:
            raise ValueError(f"{path}: not an OPOF snapshot")
        version, nx, ny, ncomp = struct.unpack("<4I", head[4:])
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != ncomp * nx * ny:
        raise ValueError(f"{path}: expected {ncomp * nx * ny} values, found {data.size}")
    return data.reshape(ncomp, nx, ny).astype(np.float64), nx, ny
