"""Time integrators for the reduced, Gaussian, difference and positive-P equations.

All integrators use the symmetric interaction-picture Euler scheme: half a
step of exact linear propagation, an explicit Euler update of the nonlinear
drift and the noise in real space, another half step of linear propagation.
Consecutive half steps are fused, so the integrators carry the field in the
interaction frame ``Y = P(h/2) X`` and the physical spectrum ``X(k)`` is a
by-product of every step. For the additive-noise reduced equation Ito and
Stratonovich calculus coincide; the positive-P noise is Ito.

The reduced field ``X = X1 + i X2`` obeys

    dX/dtau = -(eta1 - eta2 lap + eta3 lap^2) X - |X|^2 X + zeta+,

with ``<zeta+ zeta+*> = 2 delta(r - r') delta(tau - tau')``.

Runners (:class:`SHIntegrator`, :class:`GaussianCRNIntegrator`,
:class:`FullIntegrator`) advance a whole batch of trajectories and are what
:func:`evolve` drives. The functional ``step_*`` routines advance explicit
state objects by one step with the same arithmetic.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numba
import numpy as np
import scipy.fft as sfft

from ._validation import check_field, check_finite, check_positive
from .grid import GridSpec, SpectralWorkspace
from .noise import EnsembleNoise, NoiseStream
from .params import PhysicalParams, reduced_etas

__all__ = [
    "SHState",
    "MeanFieldEnsemble",
    "DifferenceState",
    "FullState",
    "StreamMismatchError",
    "NumericalFailure",
    "SHIntegrator",
    "GaussianCRNIntegrator",
    "FullIntegrator",
    "ScanSchedule",
    "FixedSchedule",
    "step_sh",
    "step_gaussian",
    "step_difference",
    "step_full",
    "quadratures_from_modes",
    "evolve",
    "DIVERGENCE_LIMIT",
]

# a trajectory whose largest field magnitude exceeds this is discarded
DIVERGENCE_LIMIT = 1e6
_AXES = (-2, -1)


class StreamMismatchError(RuntimeError):
    """Noise counters of coupled states or streams disagree."""


class NumericalFailure(RuntimeError):
    """Too many trajectories diverged."""


# ---------------------------------------------------------------------------
# state types


@dataclass
class SHState:
    """Reduced field ``X = X1 + i X2`` (shape ``(nx, ny)`` or ``(n_traj, nx, ny)``)."""

    X: np.ndarray
    tau: float = 0.0
    counter: int = 0

    @property
    def vector(self) -> np.ndarray:
        return np.stack([self.X.real, self.X.imag], axis=-3)


@dataclass
class MeanFieldEnsemble:
    """Gaussian-approximation trajectories sharing the averages ``<|X|^2>`` and ``<X^2>``."""

    X: np.ndarray
    tau: float = 0.0
    counter: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.complex128)
        if self.X.ndim != 3 or self.X.shape[0] == 0:
            raise ValueError("ensemble needs shape (n_traj, nx, ny) with n_traj >= 1")

    @property
    def stats(self) -> tuple[float, complex]:
        return shared_moments(self.X)


@dataclass
class DifferenceState:
    """Difference ``Delta_X = X - X~`` bound to a mean-field ensemble by its counter."""

    deltaX: np.ndarray
    tau: float = 0.0
    counter: int = 0

    def reconstruct(self, ensemble: MeanFieldEnsemble) -> np.ndarray:
        if ensemble.counter != self.counter:
            raise StreamMismatchError("difference and mean-field states are at different steps")
        return ensemble.X + self.deltaX


@dataclass
class FullState:
    """Positive-P fields in physical units.

    ``A0`` and ``A0p`` are only carried in resolved-pump mode; in adiabatic
    mode they are ``None`` and follow from the signal fields.
    """

    A1: np.ndarray
    A2: np.ndarray
    A1p: np.ndarray
    A2p: np.ndarray
    A0: Optional[np.ndarray] = None
    A0p: Optional[np.ndarray] = None
    t: float = 0.0
    counter: int = 0
    failed: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# fused elementwise kernels; arrays are 2D (rows, sites), one row per trajectory


@numba.njit(cache=True)
def _cubic_euler(Y, h, Z, limit2, bad):
    for r in range(Y.shape[0]):
        for i in range(Y.shape[1]):
            a = Y[r, i].real
            b = Y[r, i].imag
            m = a * a + b * b
            f = 1.0 - h * m
            if not (m <= limit2 and m * f * f <= limit2):
                bad[r] = True
            Z[r, i] = complex(a * f, b * f)


@numba.njit(cache=True)
def _gauss_crn(Yg, Yd, c1, c2, h, Zg, Zd, limit2, bad):
    # Zg = Yg + h Ng(Yg);  Zd = Yd + h (Nfull(Yg + Yd) - Ng(Yg))
    for r in range(Yg.shape[0]):
        for i in range(Yg.shape[1]):
            yg = Yg[r, i]
            yd = Yd[r, i]
            ng = -2.0 * (c1 * yg + c2 * yg.conjugate())
            x = yg + yd
            m = x.real * x.real + x.imag * x.imag
            mg = yg.real * yg.real + yg.imag * yg.imag
            if not (m <= limit2 and mg <= limit2):
                bad[r] = True
            Zg[r, i] = yg + h * ng
            Zd[r, i] = yd + h * (-m * x - ng)


@numba.njit(cache=True)
def _row_moments(Y, s1, s2):
    for r in range(Y.shape[0]):
        a = 0.0
        b = 0.0j
        for i in range(Y.shape[1]):
            y = Y[r, i]
            a += y.real * y.real + y.imag * y.imag
            b += y * y
        s1[r] = a
        s2[r] = b


def _rows(a):
    return a.reshape(-1, a.shape[-2] * a.shape[-1])


def shared_moments(Y, alive=None):
    """Ensemble-and-site averages ``(<|Y|^2>, <Y^2>)`` over the trajectories in ``alive``.

    Per-trajectory sums are combined with :func:`math.fsum`, so the result does
    not depend on the order of the trajectories.
    """
    Y = np.ascontiguousarray(Y)
    rows = _rows(Y)
    s1 = np.empty(rows.shape[0])
    s2 = np.empty(rows.shape[0], dtype=np.complex128)
    _row_moments(rows, s1, s2)
    if alive is not None:
        s1, s2 = s1[alive], s2[alive]
    if s1.size == 0:
        raise ValueError("no live trajectories to average over")
    n = s1.size * rows.shape[1]
    m2 = complex(math.fsum(s2.real), math.fsum(s2.imag)) / n
    return math.fsum(s1) / n, m2


# ---------------------------------------------------------------------------
# runners


class _Runner:
    def __init__(self, grid: GridSpec, dt, noise: EnsembleNoise, workers=None, counter=0, tau=0.0):
        if not isinstance(noise, EnsembleNoise):
            raise TypeError("noise must be an EnsembleNoise")
        if noise.grid != grid:
            raise ValueError("noise grid does not match integrator grid")
        self.grid = grid
        self.dt = check_positive("dt", dt)
        self.noise = noise
        self.ws = SpectralWorkspace(grid, workers)
        self.workers = workers
        self.counter = int(counter)
        self._tau0 = float(tau) - self.counter * self.dt
        self.failed = np.zeros(noise.n_traj, dtype=bool)

    @property
    def n_traj(self) -> int:
        return self.noise.n_traj

    @property
    def tau(self) -> float:
        return self._tau0 + self.counter * self.dt

    @property
    def alive(self) -> np.ndarray:
        return ~self.failed

    @property
    def discard_fraction(self) -> float:
        return float(self.failed.mean())

    def _fft(self, a):
        return sfft.fft2(a, axes=_AXES, norm="ortho", workers=self.workers, overwrite_x=True)

    def _ifft(self, a):
        return sfft.ifft2(a, axes=_AXES, norm="ortho", workers=self.workers, overwrite_x=True)

    def _half(self, etas):
        eta1, eta2, eta3 = etas
        return self.ws.propagator(eta1, eta2, eta3, 0.5 * self.dt)

    def _mark(self, bad, *arrays):
        new = bad & ~self.failed
        if new.any():
            self.failed |= new
            for a in arrays:
                a[new] = 0.0


def _initial(grid, n_traj, X0):
    if X0 is None:
        return np.zeros((n_traj, grid.nx, grid.ny), dtype=np.complex128)
    X0 = np.asarray(X0, dtype=np.complex128)
    X0 = check_field(X0, grid, name="X0")
    return np.array(np.broadcast_to(X0, (n_traj, grid.nx, grid.ny)), order="C")


class SHIntegrator:
    """Batch integrator of the reduced vector Swift-Hohenberg equation.

    ``method`` is ``"euler"`` (symmetric interaction-picture Euler-Maruyama)
    or ``"rk4"`` (fourth-order interaction-picture Runge-Kutta with the noise
    held constant over the step).
    """

    def __new__(cls, grid, dt, noise, X0=None, method="euler", workers=None, counter=0, tau=0.0):
        if cls is SHIntegrator:
            if method == "euler":
                cls = _SHEuler
            elif method == "rk4":
                cls = _SHRK4
            else:
                raise ValueError(f"unknown method {method!r}")
        return super().__new__(cls)


class _SHEuler(_Runner, SHIntegrator):
    method = "euler"

    def __init__(self, grid, dt, noise, X0=None, method="euler", workers=None, counter=0, tau=0.0):
        super().__init__(grid, dt, noise, workers, counter, tau)
        self._Xhat = self._fft(_initial(grid, self.n_traj, X0))
        self._Y = None

    def step(self, etas):
        h = self.dt
        Ph = self._half(etas)
        if self._Y is None:
            self._Y = self._ifft(self._Xhat * Ph)
        Y = self._Y
        Z = np.empty_like(Y)
        bad = np.zeros(self.n_traj, dtype=bool)
        _cubic_euler(_rows(Y), h, _rows(Z), DIVERGENCE_LIMIT**2, bad)
        self._mark(bad, Z)
        self.noise.add_reduced(Z, self.counter, h, factor=h)
        if self.failed.any():
            Z[self.failed] = 0.0
        Zh = self._fft(Z)
        Zh *= Ph
        self._Xhat = Zh
        self._Y = self._ifft(Zh * Ph)
        self.counter += 1

    def spectral(self) -> dict:
        """Physical-frame unitary spectra of the current state."""
        return {"X": self._Xhat}

    @property
    def X(self) -> np.ndarray:
        return sfft.ifft2(self._Xhat, axes=_AXES, norm="ortho", workers=self.workers)

    @property
    def state(self) -> SHState:
        return SHState(self.X, self.tau, self.counter)


def _cubic(x):
    return -(x.real**2 + x.imag**2) * x


class _SHRK4(_Runner, SHIntegrator):
    method = "rk4"

    def __init__(self, grid, dt, noise, X0=None, method="rk4", workers=None, counter=0, tau=0.0):
        super().__init__(grid, dt, noise, workers, counter, tau)
        self._Xhat = self._fft(_initial(grid, self.n_traj, X0))

    def step(self, etas):
        h = self.dt
        Ph = self._half(etas)
        zeta = np.zeros_like(self._Xhat)
        self.noise.add_reduced(zeta, self.counter, h)
        fft = lambda a: sfft.fft2(a, axes=_AXES, norm="ortho", workers=self.workers)
        ifft = lambda a: sfft.ifft2(a, axes=_AXES, norm="ortho", workers=self.workers)

        def rhs(xhat):
            return fft(_cubic(ifft(xhat)) + zeta)

        Xh = self._Xhat
        Xi = Ph * Xh
        k1 = Ph * rhs(Xh)
        k2 = rhs(Xi + 0.5 * h * k1)
        k3 = rhs(Xi + 0.5 * h * k2)
        k4 = rhs(Ph * (Xi + h * k3))
        out = Ph * (Xi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3)) + (h / 6.0) * k4
        bad = ~np.all(np.isfinite(out), axis=_AXES)
        bad |= np.abs(ifft(out)).max(axis=_AXES) > DIVERGENCE_LIMIT
        self._mark(bad, out)
        self._Xhat = out
        self.counter += 1

    spectral = _SHEuler.spectral
    X = _SHEuler.X
    state = _SHEuler.state


class GaussianCRNIntegrator(_Runner):
    """Gaussian mean-field ensemble plus the common-random-number difference field.

    The mean-field trajectories ``X~`` obey

        dX~/dtau = D X~ - 2 X~ <|X~|^2> - 2 X~* <X~^2> + zeta+,

    with averages over all live trajectories and sites, taken from the
    start-of-step (interaction-frame) fields. The difference ``Delta = X - X~``
    is driven only by the drift mismatch ``N(X~ + Delta) - N~(X~)``; the noise
    cancels identically and never enters its update. Set ``with_difference``
    to False to integrate the Gaussian ensemble alone.
    """

    def __init__(self, grid, dt, noise, X0=None, D0=None, with_difference=True, workers=None,
                 counter=0, tau=0.0):
        super().__init__(grid, dt, noise, workers, counter, tau)
        self.with_difference = bool(with_difference)
        nf = 2 if self.with_difference else 1
        buf = np.empty((nf, self.n_traj, grid.nx, grid.ny), dtype=np.complex128)
        buf[0] = _initial(grid, self.n_traj, X0)
        if nf == 2:
            buf[1] = _initial(grid, self.n_traj, D0)
        self._hat = self._fft(buf)
        self._Y = None
        self.stats = (math.nan, complex(math.nan))

    def step(self, etas):
        h = self.dt
        Ph = self._half(etas)
        if self._Y is None:
            self._Y = self._ifft(self._hat * Ph)
        Y = self._Y
        c1, c2 = shared_moments(Y[0], self.alive)
        self.stats = (c1, c2)
        Z = np.empty_like(Y)
        bad = np.zeros(self.n_traj, dtype=bool)
        if self.with_difference:
            _gauss_crn(_rows(Y[0]), _rows(Y[1]), c1, c2, h, _rows(Z[0]), _rows(Z[1]),
                       DIVERGENCE_LIMIT**2, bad)
        else:
            # the mean-field drift alone: Zg = Yg - 2h (c1 Yg + c2 Yg*)
            Z[0] = Y[0] - (2.0 * h) * (c1 * Y[0] + c2 * Y[0].conj())
            m = np.abs(Y[0]).max(axis=_AXES)
            bad |= ~(m <= DIVERGENCE_LIMIT)
        self._mark(bad, *Z)
        self.noise.add_reduced(Z[0], self.counter, h, factor=h)
        if self.failed.any():
            Z[:, self.failed] = 0.0
        Zh = self._fft(Z)
        Zh *= Ph
        self._hat = Zh
        self._Y = self._ifft(Zh * Ph)
        self.counter += 1

    def spectral(self) -> dict:
        out = {"Xg": self._hat[0]}
        if self.with_difference:
            out["D"] = self._hat[1]
            out["X"] = self._hat[0] + self._hat[1]
        return out

    @property
    def ensemble(self) -> MeanFieldEnsemble:
        X = sfft.ifft2(self._hat[0], axes=_AXES, norm="ortho", workers=self.workers)
        return MeanFieldEnsemble(X, self.tau, self.counter)

    @property
    def difference(self) -> DifferenceState:
        if not self.with_difference:
            raise ValueError("integrator was built without the difference field")
        D = sfft.ifft2(self._hat[1], axes=_AXES, norm="ortho", workers=self.workers)
        return DifferenceState(D, self.tau, self.counter)


# ---------------------------------------------------------------------------
# positive-P model


def _pair_propagator(a, c, t):
    """``exp(M t)`` for ``M = [[a, c], [conj(c), conj(a)]]`` with array ``a`` and scalar ``c``.

    Returns the four entries ``(p11, p12, p21, p22)``. Writing
    ``M = Re(a) I + N`` with ``N^2 = s^2 I`` and ``s^2 = |c|^2 - Im(a)^2`` gives
    ``exp(M t) = e^{Re(a) t} (cosh(s t) I + t sinhc(s t) N)``.
    """
    theta = a.imag
    s = np.sqrt((abs(c) ** 2 - theta**2).astype(np.complex128))
    st = s * t
    ch = np.cosh(st)
    small = np.abs(st) < 1e-4
    safe = np.where(small, 1.0, st)
    shc = np.where(small, 1.0 + st * st / 6.0, np.sinh(safe) / safe) * t
    e = np.exp(a.real * t)
    p11 = e * (ch + shc * (1j * theta))
    p22 = e * (ch - shc * (1j * theta))
    p12 = e * shc * c
    p21 = e * shc * np.conj(c)
    return p11, p12, p21, p22


class FullIntegrator(_Runner):
    """Positive-P signal/idler (and optionally pump) fields in physical units.

    Field order is ``A1, A2, A1p, A2p`` and, in resolved mode, ``A0, A0p``.
    In adiabatic mode the pump follows ``A0 = (E - chi A1 A2) / gamma0~`` and
    ``A0p = (E - chi A1p A2p) / conj(gamma0~)``. Noise amplitudes
    ``sqrt(chi A0)`` use the principal branch (Ito). Grid lengths are physical.

    The interaction picture contains the decay, detuning and diffraction of
    every field plus the linearized parametric coupling ``c = chi E / gamma0~``
    between ``(A1, A2+)`` and between ``(A2, A1+)``, propagated exactly as 2x2
    blocks per mode; only the remainder ``chi (A0 - E/gamma0~)`` and the noise
    are stepped explicitly. This keeps the slow near-threshold rate
    ``(1 - mu) gamma`` free of O(gamma dt) errors.

    A trajectory whose fields exceed :data:`DIVERGENCE_LIMIT` in magnitude, or
    become non-finite, is discarded and counted in :attr:`failed`.
    """

    def __init__(self, grid, dt, phys: PhysicalParams, noise, pump_mode="adiabatic", init=None,
                 workers=None, counter=0, t=0.0):
        super().__init__(grid, dt, noise, workers, counter, t)
        if pump_mode not in ("adiabatic", "resolved"):
            raise ValueError("pump_mode must be 'adiabatic' or 'resolved'")
        self.phys = phys
        self.pump_mode = pump_mode
        nf = 4 if pump_mode == "adiabatic" else 6
        self.n_fields = nf
        k2 = grid.k2
        self._c = phys.chi * phys.pump / phys.gamma0_c
        a = -phys.gamma_c - 1j * phys.diffraction * k2
        self._pair = _pair_propagator(a, self._c, 0.5 * self.dt)
        if nf == 6:
            g0 = phys.gamma0_c
            d0 = phys.pump_diffraction
            self._pump_ph = np.exp(np.stack([-g0 - 1j * d0 * k2, -g0.conjugate() + 1j * d0 * k2])
                                   * (0.5 * self.dt))
            # drift weight that puts the split-step fixed point of the uniform pump at E/gamma0~
            self._pump_h = 2.0 * cmath.sinh(0.5 * g0 * self.dt) / g0
        buf = np.zeros((nf, self.n_traj, grid.nx, grid.ny), dtype=np.complex128)
        if init is not None:
            for j, name in enumerate(("A1", "A2", "A1p", "A2p", "A0", "A0p")[:nf]):
                val = getattr(init, name)
                if val is not None:
                    buf[j] = np.broadcast_to(val, buf[j].shape)
            if init.failed is not None:
                self.failed |= np.asarray(init.failed, dtype=bool)
        elif nf == 6:
            buf[4] = phys.pump / phys.gamma0_c
            buf[5] = phys.pump / phys.gamma0_c.conjugate()
        self._hat = self._fft(buf)
        self._Y = None

    def _propagate(self, F):
        """Half-step interaction-picture propagation of spectral fields ``F`` (new array)."""
        p11, p12, p21, p22 = self._pair
        out = np.empty_like(F)
        out[0] = p11 * F[0] + p12 * F[3]
        out[3] = p21 * F[0] + p22 * F[3]
        out[1] = p11 * F[1] + p12 * F[2]
        out[2] = p21 * F[1] + p22 * F[2]
        if self.n_fields == 6:
            out[4:] = F[4:] * self._pump_ph[:, None]
        return out

    @property
    def t(self) -> float:
        return self.tau

    def _pump(self, Y):
        p = self.phys
        if self.pump_mode == "adiabatic":
            a0 = (p.pump - p.chi * Y[0] * Y[1]) / p.gamma0_c
            a0p = (p.pump - p.chi * Y[2] * Y[3]) / p.gamma0_c.conjugate()
            return a0, a0p
        return Y[4], Y[5]

    def step(self, params=None):
        h = self.dt
        p = self.phys
        if self._Y is None:
            self._Y = self._ifft(self._propagate(self._hat))
        Y = self._Y
        a1, a2, a1p, a2p = Y[0], Y[1], Y[2], Y[3]
        a0, a0p = self._pump(Y)
        xi1, xi2, xi1p, xi2p = self.noise.pairs(self.counter, h)
        s = np.sqrt(p.chi * a0) * h
        sp = np.sqrt(p.chi * a0p) * h
        # parametric gain beyond the linearized part carried by the propagator
        r = p.chi * h * a0 - h * self._c
        rp = p.chi * h * a0p - h * np.conj(self._c)
        Z = np.empty_like(Y)
        Z[0] = a1 + r * a2p + s * xi1
        Z[1] = a2 + r * a1p + s * xi2
        Z[2] = a1p + rp * a2 + sp * xi1p
        Z[3] = a2p + rp * a1 + sp * xi2p
        if self.n_fields == 6:
            hp = self._pump_h
            Z[4] = a0 + hp * (p.pump - p.chi * a1 * a2)
            Z[5] = a0p + hp.conjugate() * (p.pump - p.chi * a1p * a2p)
        m = np.abs(Z).max(axis=(0, 2, 3))
        bad = ~(m <= DIVERGENCE_LIMIT)
        new = bad & ~self.failed
        self.failed |= new
        if self.failed.any():
            Z[:, self.failed] = 0.0
        Zh = self._propagate(self._fft(Z))
        self._hat = Zh
        self._Y = self._ifft(self._propagate(Zh))
        self.counter += 1

    def fields(self) -> np.ndarray:
        """Physical-frame fields, shape ``(n_fields, n_traj, nx, ny)``."""
        return sfft.ifft2(self._hat, axes=_AXES, norm="ortho", workers=self.workers)

    @property
    def state(self) -> FullState:
        F = self.fields()
        if self.n_fields == 6:
            a0, a0p = F[4], F[5]
        else:
            a0 = a0p = None
        return FullState(F[0], F[1], F[2], F[3], a0, a0p, self.tau, self.counter, self.failed.copy())

    def pump_fields(self):
        """Pump and conjugate pump at the current time (eliminated or resolved)."""
        return self._pump(self.fields())

    def quadratures(self, x0, g):
        """Scaled quadratures ``(X, X+, Y, Y+)`` of the current fields, with ``alpha = x0 A``."""
        F = self.fields() * x0
        return quadratures_from_modes(F[0], F[3], F[1], F[2], g)


def quadratures_from_modes(A1, A2p, A2, A1p, g):
    """``X = sqrt(g)(a1 + a2+)``, ``X+ = sqrt(g)(a2 + a1+)``, ``Y = (a1 - a2+)/i``, ``Y+ = (a2 - a1+)/i``.

    Arguments are dimensionless amplitudes ``alpha = x0 A``.
    """
    check_positive("g", g)
    rg = math.sqrt(g)
    X = rg * (A1 + A2p)
    Xp = rg * (A2 + A1p)
    Y = -1j * (A1 - A2p)
    Yp = -1j * (A2 - A1p)
    return X, Xp, Y, Yp


# ---------------------------------------------------------------------------
# functional single-step interface


def _as_ensemble_noise(noise, grid, counter, n_traj):
    if noise is None:
        return EnsembleNoise.silent(grid, range(n_traj))
    if isinstance(noise, NoiseStream):
        if noise.counter != counter:
            raise StreamMismatchError(
                f"stream counter {noise.counter} does not match state counter {counter}"
            )
        if n_traj != 1:
            raise ValueError("a NoiseStream drives a single trajectory")
        return EnsembleNoise(grid, noise.seed, noise.tag,
                             range(noise.trajectory, noise.trajectory + 1), noise.refine)
    if isinstance(noise, EnsembleNoise):
        if noise.n_traj != n_traj:
            raise ValueError("noise block size does not match the number of trajectories")
        return noise
    raise TypeError("noise must be a NoiseStream or EnsembleNoise")


def _batch(X):
    X = np.asarray(X, dtype=np.complex128)
    return (X[None], True) if X.ndim == 2 else (X, False)


def step_sh(state: SHState, etas, dt, noise, grid: GridSpec, method="euler", workers=None) -> SHState:
    """One step of the reduced equation for a single field or a batch."""
    X, single = _batch(state.X)
    check_field(X, grid, name="X")
    for e in etas:
        check_finite("eta", e)
    src = _as_ensemble_noise(noise, grid, state.counter, X.shape[0])
    run = SHIntegrator(grid, dt, src, X0=X, method=method, workers=workers,
                       counter=state.counter, tau=state.tau)
    run.step(etas)
    if run.failed.any():
        raise NumericalFailure("reduced-equation step produced non-finite or diverging values")
    out = run.X
    return SHState(out[0] if single else out, run.tau, run.counter)


def step_gaussian(ensemble: MeanFieldEnsemble, etas, dt, noise, grid: GridSpec, workers=None):
    """Advance every mean-field trajectory with the start-of-step shared averages."""
    src = _as_ensemble_noise(noise, grid, ensemble.counter, ensemble.X.shape[0])
    run = GaussianCRNIntegrator(grid, dt, src, X0=ensemble.X, with_difference=False,
                                workers=workers, counter=ensemble.counter, tau=ensemble.tau)
    run.step(etas)
    if run.failed.any():
        raise NumericalFailure("mean-field step produced non-finite or diverging values")
    return run.ensemble


def step_difference(diff: DifferenceState, ensemble: MeanFieldEnsemble, etas, dt, grid: GridSpec,
                    noise=None, workers=None) -> DifferenceState:
    """Advance ``Delta_X`` given the bound mean-field ensemble at the same step.

    ``ensemble`` is the mean-field state *before* its own step. The noise
    does not enter; ``noise`` (optional) is only checked for counter alignment.
    """
    if diff.counter != ensemble.counter:
        raise StreamMismatchError(
            f"difference counter {diff.counter} != mean-field counter {ensemble.counter}"
        )
    if isinstance(noise, NoiseStream) and noise.counter != diff.counter:
        raise StreamMismatchError("shared stream counter does not match the difference state")
    D, single = _batch(diff.deltaX)
    if D.shape != ensemble.X.shape:
        raise ValueError("difference field shape does not match the ensemble")
    h = check_positive("dt", dt)
    ws = SpectralWorkspace(grid, workers)
    Ph = ws.propagator(*etas, 0.5 * h)
    Y = ws.inverse(ws.forward(np.stack([ensemble.X, D])) * Ph)
    Y = np.ascontiguousarray(Y)
    c1, c2 = shared_moments(Y[0])
    Z = np.empty_like(Y)
    bad = np.zeros(D.shape[0], dtype=bool)
    _gauss_crn(_rows(Y[0]), _rows(Y[1]), c1, c2, h, _rows(Z[0]), _rows(Z[1]),
               DIVERGENCE_LIMIT**2, bad)
    if bad.any():
        raise NumericalFailure("difference step produced non-finite or diverging values")
    out = ws.inverse(ws.forward(Z[1]) * Ph)
    return DifferenceState(out[0] if single else out, diff.tau + h, diff.counter + 1)


def step_full(state: FullState, phys: PhysicalParams, dt, noise, grid: GridSpec,
              pump_mode="adiabatic", workers=None) -> FullState:
    """One positive-P step; diverging trajectories are flagged in ``failed``, not raised."""
    A1 = np.asarray(state.A1, dtype=np.complex128)
    n = 1 if A1.ndim == 2 else A1.shape[0]
    src = _as_ensemble_noise(noise, grid, state.counter, n)
    if A1.ndim == 2:
        state = replace(state, **{k: (None if getattr(state, k) is None else np.asarray(getattr(state, k))[None])
                                  for k in ("A1", "A2", "A1p", "A2p", "A0", "A0p")})
    run = FullIntegrator(grid, dt, phys, src, pump_mode=pump_mode, init=state, workers=workers,
                         counter=state.counter, t=state.t)
    run.step()
    out = run.state
    if A1.ndim == 2:
        out = replace(out, **{k: (None if getattr(out, k) is None else getattr(out, k)[0])
                              for k in ("A1", "A2", "A1p", "A2p", "A0", "A0p")})
    return out


# ---------------------------------------------------------------------------
# schedules and the driver loop


@dataclass(frozen=True)
class FixedSchedule:
    """Constant reduced coefficients; ``value`` is the reported parameter value."""

    etas: tuple
    value: float = math.nan

    def at(self, tau):
        return self.value, tuple(self.etas)

    @classmethod
    def from_physical(cls, mu, delta, g, parameter="mu"):
        value = mu if parameter == "mu" else delta
        return cls(reduced_etas(mu, delta, g), value)


@dataclass(frozen=True)
class ScanSchedule:
    """Linear ramp of ``mu`` or ``delta`` after an optional hold at the start value.

    ``fixed`` is the value of the other parameter. The ramp stops at ``end``.
    """

    parameter: str
    start: float
    rate: float
    end: float
    g: float = 0.01
    fixed: float = 0.0
    hold: float = 0.0

    def __post_init__(self):
        if self.parameter not in ("mu", "delta"):
            raise ValueError("scan parameter must be 'mu' or 'delta'")
        if self.rate == 0 or not math.isfinite(self.rate):
            raise ValueError("scan rate must be finite and non-zero")
        if self.end != self.start and math.copysign(1.0, self.rate) != math.copysign(1.0, self.end - self.start):
            raise ValueError("scan rate sign contradicts the direction from start to end")
        check_positive("g", self.g)
        if self.hold < 0:
            raise ValueError("hold must be >= 0")

    @property
    def duration(self) -> float:
        return self.hold + (self.end - self.start) / self.rate

    def value(self, tau):
        v = self.start + self.rate * max(tau - self.hold, 0.0)
        return min(v, self.end) if self.rate > 0 else max(v, self.end)

    def at(self, tau):
        v = self.value(tau)
        if self.parameter == "mu":
            etas = reduced_etas(v, self.fixed, self.g)
        else:
            etas = reduced_etas(self.fixed, v, self.g)
        return v, etas


def evolve(system, schedule, n_steps, recorder: Optional[Callable] = None, record_every=1,
           max_discard=None):
    """Advance ``system`` by ``n_steps`` steps, re-deriving the coefficients every step.

    ``schedule.at(tau)`` supplies ``(value, etas)`` at the start of each step;
    ``schedule`` may be None for systems without coefficients (positive-P).
    After every ``record_every`` steps ``recorder(system, value, etas)`` is called
    with the parameter values at the new time; ``recorder`` may also be a
    sequence of such callables. Raises :class:`NumericalFailure`
    if the discarded fraction exceeds ``max_discard``.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    if recorder is None:
        recorders = ()
    elif callable(recorder):
        recorders = (recorder,)
    else:
        recorders = tuple(recorder)
    for n in range(int(n_steps)):
        if schedule is None:
            system.step()
        else:
            _, etas = schedule.at(system.tau)
            system.step(etas)
        if recorders and (n + 1) % record_every == 0:
            if schedule is None:
                value, etas = math.nan, None
            else:
                value, etas = schedule.at(system.tau)
            for rec in recorders:
                rec(system, value, etas)
    if max_discard is not None and system.discard_fraction > max_discard:
        raise NumericalFailure(
            f"discarded {system.discard_fraction:.3%} of trajectories (limit {max_discard:.3%})"
        )
    return system
