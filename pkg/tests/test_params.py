import cmath
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from opocrit.params import (
    DimensionlessParams,
    PhysicalParams,
    classical_intensity,
    critical_pump,
    derive_scales,
    reduced_etas,
    stability_eigensystem,
)

pos = st.floats(0.05, 20.0)


def phys(**kw):
    base = dict(gamma0=100.0, gamma=1.0, chi=0.1, pump=1000.0, v=1.0, omega=1.0)
    base.update(kw)
    return PhysicalParams(**base)


class TestDeriveScales:
    def test_unit_coupling_base(self):
        # chi^2 omega / (2 gamma0 v^2) = 1
        p = PhysicalParams(gamma0=2.0, gamma=1.0, chi=2.0, pump=0.0, v=1.0, omega=1.0)
        assert derive_scales(p).g == pytest.approx(1.0, abs=1e-15)

    def test_unit_pump(self):
        assert derive_scales(phys()).mu == pytest.approx(1.0, rel=1e-15)

    def test_lifshitz_etas(self):
        assert reduced_etas(1.0, 0.0, 0.01) == (0.0, 0.0, 0.5)

    def test_scales(self):
        p = phys(omega=3.0, v=2.0)
        d = derive_scales(p)
        g = (p.chi**2 * p.omega / (2 * p.gamma0 * p.v**2)) ** (2 / 3)
        assert d.g == pytest.approx(g)
        assert d.x0**2 == pytest.approx(p.v**2 / (2 * p.gamma * math.sqrt(g) * p.omega))
        assert d.t0 == pytest.approx(1 / (g * p.gamma))

    def test_from_scaled(self):
        d = DimensionlessParams.from_scaled(0.01, 0.9, 0.2)
        assert d.etas == pytest.approx((10.0, 0.2 / 1.9 / 0.1, 1 / 1.9))

    @pytest.mark.parametrize("field", ["gamma0", "gamma", "chi", "v", "omega"])
    def test_non_positive_rejected(self, field):
        with pytest.raises(ValueError):
            phys(**{field: 0.0})
        with pytest.raises(ValueError):
            phys(**{field: -1.0})

    def test_negative_pump_rejected(self):
        with pytest.raises(ValueError):
            phys(pump=-1.0)

    def test_bad_g(self):
        with pytest.raises(ValueError):
            reduced_etas(1.0, 0.0, 0.0)


class TestCriticalPump:
    def test_examples(self):
        assert critical_pump(phys()) == pytest.approx(1000.0)
        assert critical_pump(phys(gamma0=1.0, gamma=2.0, chi=0.5)) == pytest.approx(4.0)

    @given(pos, pos, pos, pos, pos)
    def test_threshold_mu_is_one(self, g0, g, chi, v, om):
        p = PhysicalParams(gamma0=g0, gamma=g, chi=chi, pump=0.0, v=v, omega=om)
        ec = critical_pump(p)
        assert derive_scales(p.with_pump(ec)).mu == pytest.approx(1.0, abs=1e-12)

    @given(st.floats(-3, 3))
    def test_detuned_threshold_is_critical_line(self, delta):
        p = phys(delta=delta)
        mu = derive_scales(p.with_pump(critical_pump(p))).mu
        assert mu**2 - delta**2 == pytest.approx(1.0, abs=1e-10)


class TestClassicalIntensity:
    def test_resonant(self):
        p = PhysicalParams(gamma0=1.0, gamma=1.0, chi=1.0, pump=2.0, v=1.0, omega=1.0)
        assert classical_intensity(p) == pytest.approx(1.0)

    def test_at_threshold_zero(self):
        p = phys()
        assert classical_intensity(p.with_pump(critical_pump(p))) == 0.0
        assert classical_intensity(p.with_pump(0.5 * critical_pump(p))) == 0.0

    def test_detuned_root(self):
        p = PhysicalParams(gamma0=1.0, gamma=1.0, chi=1.0, pump=2.0, v=1.0, omega=1.0, delta=0.75)
        expected = -1 + math.sqrt(4 + 1 - 1.5625)
        assert classical_intensity(p) == pytest.approx(expected, rel=1e-14)
        assert expected == pytest.approx(0.8540496217739157, rel=1e-15)

    def test_detuned_root_by_fixed_point_iteration(self):
        # noise-free steady state: A0 = (E - chi A1 A2)/g0~, g~ A1 = chi A0 A2*, I = |A1|^2
        p = PhysicalParams(gamma0=1.0, gamma=1.0, chi=1.0, pump=2.0, v=1.0, omega=1.0, delta=0.75)
        # |chi A0| = |g~| fixes |A0|; iterate on I: chi E = |g0~ g~ + chi^2 I e^{i phase}| ...
        gt = p.gamma_c
        I = 0.5
        for _ in range(200):
            # |g0~ g~ + chi^2 I| = chi E  (real positive chi, real E, Delta0 = 0)
            z = p.gamma0_c * gt
            I = I + 0.5 * ((p.chi * p.pump) - abs(z + p.chi**2 * I))
        assert I == pytest.approx(classical_intensity(p), rel=1e-12)

    @given(st.floats(0.0, 5.0), st.floats(-2, 2))
    def test_continuous_at_threshold(self, eps, delta):
        p = phys(delta=delta)
        ec = critical_pump(p)
        lo = classical_intensity(p.with_pump(ec * (1 - 1e-9 * eps)))
        hi = classical_intensity(p.with_pump(ec * (1 + 1e-9 * eps)))
        assert lo == 0.0 and 0.0 <= hi < 1e-3


class TestStability:
    def test_threshold(self):
        s = stability_eigensystem(1.0, 0.0)
        assert s.lambda_plus == 0 and s.lambda_minus == -2

    def test_critical_line(self):
        assert abs(stability_eigensystem(math.sqrt(2), 1.0).lambda_plus) < 1e-15

    def test_above(self):
        s = stability_eigensystem(2.0, 0.0)
        assert s.lambda_plus == pytest.approx(1.0)
        u = s.u_plus / s.u_plus[0]
        assert u == pytest.approx(np.array([1.0, 1.0]))
        assert s.above_threshold

    @given(st.floats(0, 5), st.floats(-5, 5))
    def test_eigenpairs(self, mu, delta):
        s = stability_eigensystem(mu, delta)
        M = np.array([[-(1 + 1j * delta), mu], [mu, -(1 - 1j * delta)]])
        for lam, u in ((s.lambda_plus, s.u_plus), (s.lambda_minus, s.u_minus)):
            if np.linalg.norm(u) > 1e-8:
                assert np.allclose(M @ u, lam * u, atol=1e-9 * (1 + mu + abs(delta)))
        assert s.lambda_plus.real >= s.lambda_minus.real
        assert s.above_threshold == (mu * mu - delta * delta > 1 + 1e-9) or abs(mu * mu - delta * delta - 1) < 1e-9

    @given(st.floats(0, 5), st.floats(0, 5))
    def test_even_in_delta(self, mu, delta):
        a = stability_eigensystem(mu, delta).lambda_plus
        b = stability_eigensystem(mu, -delta).lambda_plus
        assert cmath.isclose(a, b, abs_tol=1e-14)


@given(st.floats(0, 100), st.floats(1e-4, 1), st.floats(-2, 2))
def test_eta_invariants(mu, g, delta):
    e1, e2, e3 = reduced_etas(mu, delta, g)
    assert 0 < e3 <= 1
    assert e3 == pytest.approx(1 / (1 + mu))
    assert (e1 > 0) == (mu < 1) and (e1 < 0) == (mu > 1)
