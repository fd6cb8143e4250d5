"""Counter-based Gaussian noise fields.

Every draw is addressed by ``(seed, tag, trajectory, counter)``: the Philox
key holds the seed and a hash of the equation tag, the counter holds the step
index and the trajectory offset. Any subset of trajectories can therefore be
generated in one call and yields exactly the numbers a single-trajectory call
would, so results do not depend on batching or worker layout.

Normals come from the Box-Muller transform of one 64-bit word per pair (two
32-bit uniforms), which keeps the number of words per draw fixed.

Step refinement: a draw at refinement level ``r`` and counter ``n`` is the
normalized sum of the ``2**r`` level-0 draws at counters ``n * 2**r + s``.
A run with step ``2 h`` at level 1 therefore sees the same Brownian path as a
run with step ``h`` at level 0.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace

import numba
import numpy as np

from .grid import GridSpec

__all__ = [
    "NoiseStream",
    "EnsembleNoise",
    "complex_normals",
    "sample_vector_noise",
    "sample_pair_noise",
    "reduced_complex_noise",
]

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi


def tag_code(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    return zlib.crc32(str(tag).encode("utf-8"))


# Taylor coefficients for sin and cos on |p| <= pi/4 (truncation error < 1e-17)
_SIN_C = np.array([(-1) ** k / math.factorial(2 * k + 1) for k in range(8)])
_COS_C = np.array([(-1) ** k / math.factorial(2 * k) for k in range(9)])


@numba.njit(cache=True, fastmath=True)
def _box_muller(raw, out, scale, accumulate):
    # raw: one uint64 per pair; high word -> radius, low word -> angle.
    # The angle is reduced exactly from its integer representation: the top two
    # bits pick the quadrant, the remaining 30 bits the offset within it.
    inv32 = 2.0**-32
    inv30 = 2.0**-30
    half_pi = 0.5 * math.pi
    rt = 0.7071067811865476
    for i in range(raw.size):
        w = raw[i]
        hi = np.float64(w >> np.uint64(32))
        lo = w & np.uint64(0xFFFFFFFF)
        q = lo >> np.uint64(30)
        p = half_pi * (np.float64(lo & np.uint64(0x3FFFFFFF)) * inv30 - 0.5)
        p2 = p * p
        s = _SIN_C[7]
        for k in range(6, -1, -1):
            s = s * p2 + _SIN_C[k]
        s *= p
        c = _COS_C[8]
        for k in range(7, -1, -1):
            c = c * p2 + _COS_C[k]
        # rotate by pi/4 + q pi/2
        a = (c - s) * rt
        b = (c + s) * rt
        if q == 0:
            cr, sr = a, b
        elif q == 1:
            cr, sr = -b, a
        elif q == 2:
            cr, sr = -a, -b
        else:
            cr, sr = b, -a
        r = scale * math.sqrt(-2.0 * math.log((hi + 1.0) * inv32))
        if accumulate:
            out[i] += complex(r * cr, r * sr)
        else:
            out[i] = complex(r * cr, r * sr)


def _raw_words(seed, tag, counter, start, count, words):
    block = -(-words // 4)
    key = (int(seed) & _MASK64) | (tag_code(tag) << 64)
    ctr = (int(start) * block) | (int(counter) << 128)
    bg = np.random.Philox(key=key, counter=ctr)
    raw = bg.random_raw(count * block * 4).reshape(count, block * 4)
    return raw[:, :words]


def complex_normals(seed, tag, counter, trajectories, n_pairs, refine=0, scale=1.0, out=None):
    """Complex normals with independent N(0, scale**2) real and imaginary parts.

    Returns an array of shape ``(len(trajectories), n_pairs)``; ``trajectories``
    is a contiguous ``range``. If ``out`` is given (a C-contiguous complex128
    array with that many elements) the draws are added to it in place.
    """
    if not isinstance(trajectories, range) or trajectories.step != 1:
        raise ValueError("trajectories must be a contiguous range")
    if counter < 0:
        raise ValueError("counter must be non-negative")
    count = len(trajectories)
    if out is None:
        out = np.empty((count, n_pairs), dtype=np.complex128)
        accumulate = False
    else:
        if out.dtype != np.complex128 or not out.flags.c_contiguous or out.size != count * n_pairs:
            raise ValueError("out must be a C-contiguous complex128 array of matching size")
        accumulate = True
    flat = out.reshape(-1)
    sub = 1 << refine
    s = scale / math.sqrt(sub)
    for j in range(sub):
        raw = _raw_words(seed, tag, counter * sub + j, trajectories.start, count, n_pairs)
        raw = np.ascontiguousarray(raw).reshape(-1)
        _box_muller(raw, flat, s, accumulate or j > 0)
    return out


@dataclass(frozen=True)
class NoiseStream:
    """Address of one trajectory's noise for one equation.

    ``counter`` is the step index; ``refine`` the step-halving level (see module doc).
    """

    seed: int = 0
    trajectory: int = 0
    tag: str = "sh"
    counter: int = 0
    refine: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must fit in 64 bits")
        if self.trajectory < 0 or self.counter < 0 or self.refine < 0:
            raise ValueError("trajectory, counter and refine must be non-negative")

    def advance(self, steps: int = 1) -> "NoiseStream":
        return replace(self, counter=self.counter + steps)

    def at(self, counter: int) -> "NoiseStream":
        return replace(self, counter=counter)


def _site_sigma(grid: GridSpec, dt):
    if not dt > 0:
        raise ValueError("dt must be > 0")
    return 1.0 / math.sqrt(grid.cell_area * dt)


def reduced_complex_noise(grid: GridSpec, dt, stream: NoiseStream):
    """Complex noise ``zeta+`` with ``<zeta+ zeta+*> = 2 / (dA dt)`` and ``<zeta+ zeta+> = 0``.

    Real and imaginary parts are the two components of the vector noise, so
    :func:`sample_vector_noise` on the same stream returns ``(Re, Im)`` of this field.
    """
    z = complex_normals(
        stream.seed, stream.tag, stream.counter, range(stream.trajectory, stream.trajectory + 1),
        grid.size, stream.refine, _site_sigma(grid, dt),
    )
    return z.reshape(grid.shape)


def sample_vector_noise(grid: GridSpec, dt, stream: NoiseStream):
    """Two real white-noise components, each N(0, 1/(dA dt)) per site; shape ``(2, nx, ny)``."""
    z = reduced_complex_noise(grid, dt, stream)
    return np.stack([z.real, z.imag])


def sample_pair_noise(grid: GridSpec, dt, stream: NoiseStream):
    """Positive-P signal/idler noises ``(xi1, xi2, xi1p, xi2p)``.

    Built from four real white fields: ``xi1,2 = (xi_x +- i xi_y)/sqrt(2)`` and the
    same for the ``+`` fields, so ``xi2 = conj(xi1)`` and ``xi2p = conj(xi1p)``
    hold exactly and ``<xi1 xi2> = 1/(dA dt)``.
    """
    z = complex_normals(
        stream.seed, stream.tag, stream.counter, range(stream.trajectory, stream.trajectory + 1),
        2 * grid.size, stream.refine, _site_sigma(grid, dt) / math.sqrt(2.0),
    ).reshape(2, *grid.shape)
    xi1, xi1p = z[0], z[1]
    return xi1, xi1.conj(), xi1p, xi1p.conj()


class EnsembleNoise:
    """Batched noise for a contiguous block of trajectories of one equation.

    ``amplitude`` scales every draw; ``amplitude=0`` gives noise-free runs
    without consuming random numbers.
    """

    def __init__(self, grid: GridSpec, seed=0, tag="sh", trajectories=range(1), refine=0,
                 amplitude=1.0):
        if isinstance(trajectories, int):
            trajectories = range(trajectories)
        if not (amplitude >= 0 and math.isfinite(amplitude)):
            raise ValueError("amplitude must be finite and >= 0")
        self.grid = grid
        self.seed = int(seed)
        self.tag = tag
        self.trajectories = trajectories
        self.refine = int(refine)
        self.amplitude = float(amplitude)

    @classmethod
    def silent(cls, grid: GridSpec, trajectories=range(1)) -> "EnsembleNoise":
        """Noise source that adds nothing (deterministic runs)."""
        return cls(grid, trajectories=trajectories, amplitude=0.0)

    @property
    def n_traj(self) -> int:
        return len(self.trajectories)

    def stream(self, j: int, counter: int = 0) -> NoiseStream:
        return NoiseStream(self.seed, self.trajectories[j], self.tag, counter, self.refine)

    def reduced(self, counter, dt):
        """``zeta+`` for every trajectory, shape ``(n_traj, nx, ny)``."""
        if self.amplitude == 0:
            return np.zeros((self.n_traj, *self.grid.shape), dtype=np.complex128)
        z = complex_normals(
            self.seed, self.tag, counter, self.trajectories, self.grid.size, self.refine,
            self.amplitude * _site_sigma(self.grid, dt),
        )
        return z.reshape(self.n_traj, *self.grid.shape)

    def add_reduced(self, out, counter, dt, factor=1.0):
        """Add ``factor * zeta+`` in place to ``out`` of shape ``(n_traj, nx, ny)``."""
        if self.amplitude == 0:
            return out
        complex_normals(
            self.seed, self.tag, counter, self.trajectories, self.grid.size, self.refine,
            factor * self.amplitude * _site_sigma(self.grid, dt), out=out,
        )
        return out

    def pairs(self, counter, dt):
        """``(xi1, xi2, xi1p, xi2p)``, each of shape ``(n_traj, nx, ny)``."""
        if self.amplitude == 0:
            z = np.zeros((self.n_traj, 2, *self.grid.shape), dtype=np.complex128)
        else:
            z = complex_normals(
                self.seed, self.tag, counter, self.trajectories, 2 * self.grid.size, self.refine,
                self.amplitude * _site_sigma(self.grid, dt) / math.sqrt(2.0),
            ).reshape(self.n_traj, 2, *self.grid.shape)
        xi1, xi1p = z[:, 0], z[:, 1]
        return xi1, xi1.conj(), xi1p, xi1p.conj()
