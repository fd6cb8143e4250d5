"""Gaussian-approximation closed forms, Kelvin functions and a Metropolis oracle.

In the Gaussian approximation the field relaxes linearly with the shifted gain
``eta1' = eta1 + 2 c``, where ``c = <X . X>`` is the vector trace. The
stationary trace spectrum is ``1 / (eta1' + eta2 k^2 + eta3 k^4)`` and

    c = (1 / 4 pi) int_0^inf du / (eta1' + eta2 u + eta3 u^2),

which closes the self-consistency loop. All correlations here are trace
normalized, so the real-space correlation at zero separation equals ``c``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import brentq

from ._validation import check_finite, check_nonnegative, check_positive
from .grid import GridSpec, forward, laplacian
from .noise import tag_code

__all__ = [
    "SelfConsistentSolution",
    "gaussian_self_consistency",
    "lattice_self_consistency",
    "far_field_corr",
    "kelvin_k0",
    "kelvin_kei",
    "kelvin_ker",
    "near_field_corr",
    "near_field_envelope",
    "slaved_y",
    "gl_hamiltonian",
    "MCMCResult",
    "mcmc_sample",
]

_EULER_GAMMA = 0.5772156649015329


# ---------------------------------------------------------------------------
# self-consistency


@dataclass(frozen=True)
class SelfConsistentSolution:
    c: float
    eta1_prime: float
    eta1: float = 0.0
    eta2: float = 0.0
    eta3: float = 0.5


def _trace_integral(a, b, e):
    """``(1/4 pi) int_0^inf du / (a + b u + e u^2)`` for a positive-definite quadratic."""
    D = 4.0 * a * e - b * b
    if not D > 0 and not (b >= 0 and a > 0 and D == 0):
        return math.inf
    if D == 0:
        # double root at negative u: 1/(e (u + b/2e)^2)
        return 1.0 / (4.0 * math.pi * e * (b / (2.0 * e)))
    sD = math.sqrt(D)
    return (0.5 * math.pi - math.atan(b / sD)) / (2.0 * math.pi * sD)


def gaussian_self_consistency(eta1, eta2=0.0, eta3=0.5) -> SelfConsistentSolution:
    """Positive root of ``c = (1/4 pi) int du / (eta1 + 2c + eta2 u + eta3 u^2)``.

    For ``eta2 = 0``, ``eta3 = 1/2`` this is ``c = 1 / (4 sqrt(2 (eta1 + 2c)))``,
    i.e. ``64 c^3 + 32 eta1 c^2 - 1 = 0``.
    """
    eta1 = check_finite("eta1", eta1)
    eta2 = check_finite("eta2", eta2)
    eta3 = check_positive("eta3", eta3)
    if eta1 < 0:
        raise ValueError("eta1 must be >= 0 (at or below threshold)")

    def f(c):
        return c - _trace_integral(eta1 + 2.0 * c, eta2, eta3)

    # f -> -inf where the quadratic stops being positive definite
    c_min = max(0.0, (eta2 * eta2 / (4.0 * eta3) - eta1) / 2.0) if eta2 < 0 else 0.0
    lo = c_min + max(c_min * 1e-13, 1e-300)
    hi = max(1.0, 2.0 * lo)
    while f(hi) < 0:
        hi *= 2.0
    c = brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return SelfConsistentSolution(c, eta1 + 2.0 * c, eta1, eta2, eta3)


def lattice_self_consistency(eta1, eta2, eta3, grid: GridSpec, dt=None) -> SelfConsistentSolution:
    """Self-consistent ``c`` for the mean-field equation on a periodic lattice.

    With ``dt=None`` the time-continuous value ``c = (1/A) sum_k 1/lambda_k``.
    With a step ``dt`` the stationary variance of the interaction-picture Euler
    scheme is used: the shared averages act on the interaction-frame field ``Y``
    and ``c`` is its second moment (the quantity that feeds back into the drift).
    """
    k2 = grid.k2
    lam0 = eta1 + eta2 * k2 + eta3 * k2 * k2
    N, dA = grid.size, grid.cell_area

    if dt is None:
        def f(c):
            lam = lam0 + 2.0 * c
            if lam.min() <= 0:
                return -math.inf
            return c - math.fsum((1.0 / lam).ravel()) / (N * dA)
    else:
        h = check_positive("dt", dt)

        def f(c):
            a = 1.0 - 2.0 * c * h
            q = np.exp(-2.0 * lam0 * h) * a * a
            if q.max() >= 1:
                return -math.inf
            var_y = 2.0 * (h / dA) * np.exp(-2.0 * lam0 * h) / (1.0 - q)
            return c - math.fsum(var_y.ravel()) / N

    lo = max(0.0, -lam0.min() / 2.0) + 1e-12
    hi = max(1.0, 2 * lo)
    while f(hi) < 0:
        hi *= 2.0
    c = brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return SelfConsistentSolution(c, eta1 + 2.0 * c, eta1, eta2, eta3)


def far_field_corr(k, eta1_prime, eta2=0.0, eta3=0.5):
    """Trace spectral density ``1 / (eta1' + eta2 k^2 + eta3 k^4)``."""
    k = np.asarray(k, dtype=float)
    den = eta1_prime + eta2 * k**2 + eta3 * k**4
    if np.any(den <= 0):
        raise ValueError("non-positive denominator: beyond the modulational instability")
    out = 1.0 / den
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Kelvin functions
#
# K0(x e^{i pi/4}) = ker x + i kei x. Evaluation:
#   x <= 5          ascending series (cancellation costs < 3 digits)
#   5 < x < 25      trapezoidal rule on K0(z) = int_0^inf exp(-z cosh t) dt, step 0.1;
#                   the integrand is analytic in |Im t| < pi/4, so the error is ~exp(-pi^2/(2 h))
#   x >= 25         asymptotic expansion, truncated at its smallest term


_SERIES_MAX = 5.0
_ASYMPT_MIN = 25.0
_TRAP_T = np.arange(0.0, 6.05, 0.1)
_TRAP_W = np.full(_TRAP_T.size, 0.1)
_TRAP_W[0] = 0.05


def _k0_series(x):
    q = (x * x / 4.0)
    ber = np.zeros_like(x)
    bei = np.zeros_like(x)
    s_ker = np.zeros_like(x)
    s_kei = np.zeros_like(x)
    psi = -_EULER_GAMMA  # psi(1)
    term = np.ones_like(x)  # q^n / (n!)^2
    for n in range(0, 60):
        if n > 0:
            term = term * q / (n * n)
            psi += 1.0 / n  # psi(n + 1)
        sign = 1.0 if (n // 2) % 2 == 0 else -1.0
        if n % 2 == 0:
            ber += sign * term
            s_ker += sign * psi * term
        else:
            bei += sign * term
            s_kei += sign * psi * term
        if n > 4 and np.all(term < 1e-18 * np.maximum(np.abs(ber) + np.abs(bei), 1.0)):
            break
    zero = x == 0
    lg = np.log(np.where(zero, 1.0, x) / 2.0)
    ker = np.where(zero, np.inf, -lg * ber + 0.25 * math.pi * bei + s_ker)
    kei = np.where(zero, -0.25 * math.pi, -lg * bei - 0.25 * math.pi * ber + s_kei)
    return ker + 1j * kei


def _k0_trapezoid(x):
    z = x[:, None] * np.exp(0.25j * math.pi)
    return np.exp(-z * np.cosh(_TRAP_T)[None, :]) @ _TRAP_W


def _k0_asymptotic(x):
    z = x * np.exp(0.25j * math.pi)
    total = np.ones_like(z)
    term = np.ones_like(z)
    prev = np.full(x.shape, np.inf)
    for k in range(1, 80):
        term = term * (-((2 * k - 1) ** 2)) / (k * 8.0 * z)
        mag = np.abs(term)
        grow = mag >= prev
        total = np.where(grow, total, total + term)
        term = np.where(grow, 0.0, term)
        prev = np.where(grow, 0.0, mag)
        if np.all(prev < 1e-18):
            break
    return np.sqrt(math.pi / (2.0 * z)) * np.exp(-z) * total


def kelvin_k0(x):
    """``K0(x e^{i pi/4}) = ker(x) + i kei(x)`` for ``x >= 0``."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0) or not np.all(np.isfinite(xa)):
        raise ValueError("Kelvin functions need finite x >= 0")
    flat = xa.ravel()
    out = np.empty(flat.shape, dtype=complex)
    s = flat <= _SERIES_MAX
    a = flat >= _ASYMPT_MIN
    t = ~(s | a)
    if s.any():
        out[s] = _k0_series(flat[s])
    if t.any():
        out[t] = _k0_trapezoid(flat[t])
    if a.any():
        out[a] = _k0_asymptotic(flat[a])
    out = out.reshape(xa.shape)
    return complex(out) if out.ndim == 0 else out


def kelvin_kei(x):
    """Thomson's function ``kei(x) = -int_0^inf k J0(k x) / (1 + k^4) dk``; ``kei(0) = -pi/4``."""
    v = kelvin_k0(x)
    return v.imag


def kelvin_ker(x):
    """``ker(x)``; diverges logarithmically at 0."""
    v = kelvin_k0(x)
    return v.real


def near_field_corr(r, eta1_prime, eta3=0.5):
    """Trace correlation ``<X(r) . X(0)>`` in the Gaussian approximation at ``eta2 = 0``.

    Equals ``(1/2 pi) int_0^inf k J0(k r) / (eta1' + eta3 k^4) dk``, i.e.
    ``-kei(beta r) / (2 pi sqrt(eta1' eta3))`` with ``beta = (eta1'/eta3)**(1/4)``.
    At ``r = 0`` it equals the self-consistent ``c``.
    """
    eta1_prime = float(eta1_prime)
    if not eta1_prime > 0:
        raise ValueError("eta1' must be > 0")
    check_positive("eta3", eta3)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("r must be >= 0")
    beta = (eta1_prime / eta3) ** 0.25
    out = -np.asarray(kelvin_kei(beta * r)) / (2.0 * math.pi * math.sqrt(eta1_prime * eta3))
    return float(out) if out.ndim == 0 else out


def near_field_envelope(r, eta1_prime, eta3=0.5, screened=False):
    """Envelope ``|K0(beta r e^{i pi/4})| / (2 pi sqrt(eta1' eta3))`` of the near-field correlation.

    With ``screened=False`` the exponential factor ``exp(-beta r / sqrt 2)`` is
    divided out, leaving the algebraic part that behaves as ``r**-0.5``.
    """
    eta1_prime = float(eta1_prime)
    if not eta1_prime > 0:
        raise ValueError("eta1' must be > 0")
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("envelope needs r > 0")
    beta = (eta1_prime / eta3) ** 0.25
    x = beta * r
    env = np.abs(kelvin_k0(x)) / (2.0 * math.pi * math.sqrt(eta1_prime * eta3))
    if not screened:
        env = env * np.exp(x / math.sqrt(2.0))
    return float(env) if np.ndim(env) == 0 else env


# ---------------------------------------------------------------------------
# slaved quadrature and the stationary functional


def slaved_y(X, mu, grid: GridSpec):
    """Damped quadrature slaved to ``X``: ``Y = lap X / (1 + mu)``."""
    mu = check_finite("mu", mu)
    if not mu > -1:
        raise ValueError("mu must be > -1")
    return laplacian(np.asarray(X), grid) / (1.0 + mu)


def gl_hamiltonian(X, etas, grid: GridSpec) -> float:
    """Lattice functional ``H`` with ``P[X] ~ exp(-H)``.

    ``H = dA sum_sites (eta1 |X|^2 + |X|^4 / 2) + dA sum_k (eta2 k^2 + eta3 k^4) |X(k)|^2``
    with the unitary spectrum ``X(k)``; the gradient terms are the spectral
    versions of ``eta2 grad X . grad X + eta3 lap X . lap X``. ``X`` is complex
    ``(nx, ny)`` or a real vector ``(2, nx, ny)``.
    """
    X = np.asarray(X)
    if not np.iscomplexobj(X):
        if X.ndim == 3 and X.shape[0] == 2:
            X = X[0] + 1j * X[1]
        elif X.ndim == 2:
            X = X.astype(complex)
        else:
            raise ValueError("expected a complex field or a (2, nx, ny) vector field")
    if X.shape != grid.shape:
        raise ValueError("field shape does not match grid")
    eta1, eta2, eta3 = etas
    m = X.real**2 + X.imag**2
    dA = grid.cell_area
    local = dA * math.fsum((eta1 * m + 0.5 * m * m).ravel())
    Xh = forward(X)
    w = eta2 * grid.k2 + eta3 * grid.k2**2
    grad = dA * math.fsum((w * (Xh.real**2 + Xh.imag**2)).ravel())
    return local + grad


# ---------------------------------------------------------------------------
# Metropolis sampler of exp(-H)


@numba.njit(cache=True)
def _metropolis(X, GX, kern, eta1, q4, dA, scale, prop, unif, trace):
    nx, ny = X.shape
    g0 = kern[0, 0]
    acc = 0
    for s in range(prop.shape[0]):
        for j in range(nx * ny):
            a = j // ny
            b = j - a * ny
            x = X[a, b]
            d = scale * prop[s, j]
            y = x + d
            mx = x.real * x.real + x.imag * x.imag
            my = y.real * y.real + y.imag * y.imag
            gx = GX[a, b]
            quad = 2.0 * (d.real * gx.real + d.imag * gx.imag) + g0 * (d.real * d.real + d.imag * d.imag)
            dH = dA * (eta1 * (my - mx) + q4 * (my * my - mx * mx) + quad)
            if dH <= 0.0 or unif[s, j] < math.exp(-dH):
                X[a, b] = y
                acc += 1
                for p in range(nx):
                    pa = p - a
                    if pa < 0:
                        pa += nx
                    for q in range(ny):
                        qb = q - b
                        if qb < 0:
                            qb += ny
                        GX[p, q] += d * kern[pa, qb]
        tot1 = 0.0
        tot2 = 0.0
        for a in range(nx):
            for b in range(ny):
                m = X[a, b].real ** 2 + X[a, b].imag ** 2
                tot1 += m
                tot2 += m * m
        trace[s, 0] = tot1 / (nx * ny)
        trace[s, 1] = tot2 / (nx * ny)
    return acc


def _integrated_time(x):
    """Integrated autocorrelation time with the self-consistent window ``M >= 5 tau``."""
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = x.size
    if n < 4 or not np.any(x):
        return 1.0
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * f.conjugate())[:n]
    acf /= acf[0]
    tau = 1.0
    for m in range(1, n):
        tau += 2.0 * acf[m]
        if m >= 5.0 * tau:
            break
    return max(tau, 1.0)


@dataclass
class MCMCResult:
    """Thinned samples plus per-chain means of ``X . X`` and ``(X . X)^2``."""

    samples: np.ndarray = field(repr=False)
    chain_xx: np.ndarray
    chain_xx2: np.ndarray
    acceptance: np.ndarray
    scale: np.ndarray
    tau_int: np.ndarray
    thin: int


def mcmc_sample(etas, grid: GridSpec, n_sweeps, seed=0, chains=4, burn_in=None, scale=None,
                target=0.4, block=200, nonlinear=True) -> MCMCResult:
    """Random-walk Metropolis on the lattice functional :func:`gl_hamiltonian`.

    Each sweep visits every site once with a complex Gaussian proposal. During
    burn-in the proposal scale adapts towards the ``target`` acceptance rate;
    it is frozen afterwards, so the production chain satisfies detailed balance.
    Snapshots taken every ``block`` sweeps are thinned to a spacing of at least
    twice the integrated autocorrelation time of the site-averaged ``X . X``.
    ``nonlinear=False`` drops the quartic term (Gaussian target).
    """
    eta1, eta2, eta3 = (float(e) for e in etas)
    check_positive("eta3", eta3)
    n_sweeps = int(n_sweeps)
    if n_sweeps < 10:
        raise ValueError("n_sweeps must be >= 10")
    burn = n_sweeps // 5 if burn_in is None else int(burn_in)
    if not 0 <= burn < n_sweeps:
        raise ValueError("burn_in must lie in [0, n_sweeps)")
    dA = grid.cell_area
    w = eta2 * grid.k2 + eta3 * grid.k2**2
    kern = np.ascontiguousarray(np.fft.ifft2(w).real)
    q4 = 0.5 if nonlinear else 0.0
    stiff = max(eta1 + kern[0, 0], 1e-3)
    s0 = float(scale) if scale is not None else 1.0 / math.sqrt(2.0 * dA * stiff)

    snaps, xx, xx2, accs, scales, taus = [], [], [], [], [], []
    key = (int(seed) & ((1 << 64) - 1)) | (tag_code("mcmc") << 64)
    for ch in range(int(chains)):
        rng = np.random.Generator(np.random.Philox(key=key, counter=ch << 192))
        X = np.zeros(grid.shape, dtype=np.complex128)
        GX = np.zeros_like(X)
        s = s0
        trace = np.empty((n_sweeps, 2))
        chain_snaps = []
        done = 0
        acc_prod = 0
        while done < n_sweeps:
            nb = min(block, n_sweeps - done)
            if done < burn:
                nb = min(nb, burn - done, 20)
            prop = rng.standard_normal((nb, grid.size)) + 1j * rng.standard_normal((nb, grid.size))
            prop *= math.sqrt(0.5)
            unif = rng.random((nb, grid.size))
            acc = _metropolis(X, GX, kern, eta1, q4, dA, s, prop, unif, trace[done:done + nb])
            if done < burn:
                s *= math.exp(1.5 * (acc / (nb * grid.size) - target))
            else:
                acc_prod += acc
                chain_snaps.append(X.copy())
            # refresh the cached convolution against accumulated round-off
            GX[:] = np.fft.ifft2(np.fft.fft2(X) * w)
            done += nb
        rate = acc_prod / ((n_sweeps - burn) * grid.size)
        if not 0.1 <= rate <= 0.9:
            warnings.warn(f"Metropolis acceptance {rate:.3f} outside [0.1, 0.9]", RuntimeWarning)
        prod = trace[burn:]
        xx.append(prod[:, 0].mean())
        xx2.append(prod[:, 1].mean())
        accs.append(rate)
        scales.append(s)
        taus.append(_integrated_time(prod[:, 0]))
        snaps.append(chain_snaps)
    thin = int(math.ceil(2.0 * max(taus)))
    stride = max(1, math.ceil(thin / block))
    samples = np.array([c[::stride] for c in snaps]).reshape(-1, *grid.shape)
    return MCMCResult(samples, np.array(xx), np.array(xx2), np.array(accs),
                      np.array(scales), np.array(taus), thin)
