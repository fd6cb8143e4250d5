"""Cavity parameters, dimensionless scaling and the noise-free threshold analysis.

The degenerate-frequency, orthogonal-polarization case is assumed throughout:
equal signal/idler decay rates, group velocities and carrier frequencies, and a
resonant pump (``delta0 = 0``) unless stated otherwise. The pump phase is fixed
to zero, so the driving field is stored as a non-negative magnitude.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ._validation import check_finite, check_nonnegative, check_positive

__all__ = [
    "PhysicalParams",
    "DimensionlessParams",
    "StabilityResult",
    "derive_scales",
    "reduced_etas",
    "critical_pump",
    "classical_intensity",
    "stability_eigensystem",
]

# branch selection tolerance for threshold comparisons
THRESHOLD_TOL = 1e-12


@dataclass(frozen=True)
class PhysicalParams:
    """Physical cavity parameters.

    ``gamma0`` and ``gamma`` are the pump and signal/idler amplitude decay rates,
    ``delta`` and ``delta0`` the signal and pump detunings in units of their decay
    rates, ``chi`` the parametric coupling, ``pump`` the driving amplitude
    ``|E|``, ``v`` and ``omega`` the signal group velocity and carrier frequency.
    The pump diffraction coefficient ``v0**2 / (2 omega0)`` only enters the
    resolved-pump integrator; it defaults to ``v0 = v`` and ``omega0 = 2 omega``.
    """

    gamma0: float
    gamma: float
    chi: float
    pump: float
    v: float
    omega: float
    delta: float = 0.0
    delta0: float = 0.0
    v0: Optional[float] = None
    omega0: Optional[float] = None

    def __post_init__(self):
        check_positive("gamma0", self.gamma0)
        check_positive("gamma", self.gamma)
        check_positive("chi", self.chi)
        check_nonnegative("pump", self.pump)
        check_positive("v", self.v)
        check_positive("omega", self.omega)
        check_finite("delta", self.delta)
        check_finite("delta0", self.delta0)
        if self.v0 is not None:
            check_positive("v0", self.v0)
        if self.omega0 is not None:
            check_positive("omega0", self.omega0)

    @property
    def gamma0_c(self) -> complex:
        """Complex pump decay ``gamma0 (1 + i delta0)``."""
        return self.gamma0 * complex(1.0, self.delta0)

    @property
    def gamma_c(self) -> complex:
        """Complex signal/idler decay ``gamma (1 + i delta)``."""
        return self.gamma * complex(1.0, self.delta)

    @property
    def diffraction(self) -> float:
        """Signal/idler diffraction coefficient ``v**2 / (2 omega)``."""
        return self.v**2 / (2.0 * self.omega)

    @property
    def pump_diffraction(self) -> float:
        v0 = self.v if self.v0 is None else self.v0
        omega0 = 2.0 * self.omega if self.omega0 is None else self.omega0
        return v0**2 / (2.0 * omega0)

    def with_pump(self, pump: float) -> "PhysicalParams":
        return replace(self, pump=pump)


@dataclass(frozen=True)
class DimensionlessParams:
    """Scaled coupling, pump and reduced linear-operator coefficients.

    ``x0`` and ``t0`` are the physical length and time scales; they are ``None``
    when the instance was built directly from scaled quantities.
    """

    g: float
    mu: float
    delta: float
    eta1: float
    eta2: float
    eta3: float
    x0: Optional[float] = None
    t0: Optional[float] = None

    @classmethod
    def from_scaled(cls, g: float, mu: float, delta: float = 0.0) -> "DimensionlessParams":
        eta1, eta2, eta3 = reduced_etas(mu, delta, g)
        return cls(g=float(g), mu=float(mu), delta=float(delta), eta1=eta1, eta2=eta2, eta3=eta3)

    @property
    def etas(self) -> tuple[float, float, float]:
        return (self.eta1, self.eta2, self.eta3)


def reduced_etas(mu: float, delta: float, g: float) -> tuple[float, float, float]:
    """Coefficients of ``-eta1 + eta2 lap - eta3 lap^2`` at pump ``mu`` and detuning ``delta``."""
    check_positive("g", g)
    check_nonnegative("mu", mu)
    check_finite("delta", delta)
    eta1 = (1.0 - mu) / g
    eta2 = delta / ((1.0 + mu) * math.sqrt(g))
    eta3 = 1.0 / (1.0 + mu)
    return eta1, eta2, eta3


def derive_scales(phys: PhysicalParams) -> DimensionlessParams:
    g = (phys.chi**2 * phys.omega / (2.0 * phys.gamma0 * phys.v**2)) ** (2.0 / 3.0)
    mu = phys.chi * phys.pump / (phys.gamma0 * phys.gamma)
    x0 = math.sqrt(phys.v**2 / (2.0 * phys.gamma * math.sqrt(g) * phys.omega))
    t0 = 1.0 / (g * phys.gamma)
    eta1, eta2, eta3 = reduced_etas(mu, phys.delta, g)
    return DimensionlessParams(
        g=g, mu=mu, delta=phys.delta, eta1=eta1, eta2=eta2, eta3=eta3, x0=x0, t0=t0
    )


def critical_pump(phys: PhysicalParams) -> float:
    """Driving amplitude at which the below- and above-threshold branches meet."""
    gamma_bar_sq = (phys.gamma_c * phys.gamma_c.conjugate()).real
    return math.sqrt(gamma_bar_sq) * abs(phys.gamma0_c) / phys.chi


def classical_intensity(phys: PhysicalParams) -> float:
    """Steady signal intensity ``|A1|**2`` of the noise-free uniform solution.

    Returns 0 below threshold, where only the trivial signal solution exists.
    """
    z = phys.gamma0_c * phys.gamma_c
    chi_e = phys.chi * phys.pump
    if chi_e <= abs(z) * (1.0 + THRESHOLD_TOL):
        return 0.0
    disc = chi_e**2 + z.real**2 - abs(z) ** 2
    root = (-z.real + math.sqrt(disc)) / phys.chi**2
    return max(root, 0.0)


@dataclass(frozen=True)
class StabilityResult:
    lambda_plus: complex
    lambda_minus: complex
    u_plus: np.ndarray = field(repr=False)
    u_minus: np.ndarray = field(repr=False)

    @property
    def above_threshold(self) -> bool:
        return self.lambda_plus.real > THRESHOLD_TOL


def stability_eigensystem(mu: float, delta: float) -> StabilityResult:
    """Linear stability of the trivial solution in the scaled variables.

    The eigenvalues are those of ``[[-(1 + i delta), mu], [mu, -(1 - i delta)]]``
    acting on ``(alpha1, alpha2+)``; rates are in units of the signal decay.
    Eigenvectors are returned unnormalized.
    """
    root = cmath.sqrt(mu * mu - delta * delta)
    lam_p = -1.0 + root
    lam_m = -1.0 - root
    u_p = np.array([mu, 1j * delta + root], dtype=complex)
    u_m = np.array([mu, 1j * delta - root], dtype=complex)
    if abs(lam_p.imag) < THRESHOLD_TOL:
        lam_p = complex(lam_p.real, 0.0)
        lam_m = complex(lam_m.real, 0.0)
    return StabilityResult(lam_p, lam_m, u_p, u_m)
