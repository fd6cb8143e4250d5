"""Experiment drivers shared by the command line and the acceptance tests.

Every driver takes a :class:`RunConfig` and returns a result object holding
the raw recorders plus the derived estimates; nothing here touches files.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import analytics
from .dynamics import (
    FixedSchedule,
    GaussianCRNIntegrator,
    NumericalFailure,
    ScanSchedule,
    SHIntegrator,
    evolve,
)
from .grid import GridSpec, inverse
from .noise import EnsembleNoise
from .observables import (
    EnsembleEstimate,
    RadialSpectrum,
    RunSummary,
    Spectrum2D,
    SpectrumAccumulator,
    TimeSeriesRecorder,
    estimate,
    radial_average,
    step_convergence,
)
from .params import reduced_etas

__all__ = [
    "ConfigError",
    "RunConfig",
    "PRESETS",
    "SUBCOMMANDS",
    "resolve_config",
    "run_scan",
    "run_lifshitz",
    "run_nongaussian",
    "run_spectrum",
    "run_mcmc_check",
    "run_selfcheck",
    "coarse_config",
]


class ConfigError(ValueError):
    """Invalid run configuration; carries every problem found."""

    def __init__(self, problems):
        self.problems = list(problems) if not isinstance(problems, str) else [problems]
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class RunConfig:
    """All knobs of one run. Times are in units of the slowing-down time ``t0``."""

    nx: int = 48
    ny: int = 48
    lx: float = 20.0
    ly: float = 20.0
    dt: float = 1e-3
    g: float = 0.01
    mu: float = 1.0
    delta: float = 0.0
    trajectories: int = 400
    seed: int = 0
    t_equil: float = 50.0
    t_average: float = 10.0
    record_interval: float = 0.1
    method: str = "euler"
    refine: int = 0
    workers: Optional[int] = None
    scan_parameter: Optional[str] = None
    scan_start: float = 0.0
    scan_rate: float = 0.0
    scan_end: float = 0.0
    mcmc_sweeps: int = 100000
    mcmc_chains: int = 16
    max_discard: float = 0.001
    snapshot: int = 0

    @property
    def etas(self):
        return reduced_etas(self.mu, self.delta, self.g)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.nx, self.ny, self.lx, self.ly)

    def steps(self, duration) -> int:
        n = duration / self.dt
        if abs(n - round(n)) > 1e-6 * max(1.0, n):
            raise ConfigError(f"duration {duration} is not a whole number of steps of {self.dt}")
        return int(round(n))

    @property
    def record_every(self) -> int:
        n = self.record_interval / self.dt
        if n < 1 - 1e-9 or abs(n - round(n)) > 1e-6 * n:
            raise ConfigError("record_interval must be a positive multiple of dt")
        return int(round(n))

    def schedule(self):
        if self.scan_parameter is None:
            return FixedSchedule(self.etas, self.mu)
        fixed = self.delta if self.scan_parameter == "mu" else self.mu
        return ScanSchedule(self.scan_parameter, self.scan_start, self.scan_rate, self.scan_end,
                            g=self.g, fixed=fixed, hold=self.t_equil)

    def to_dict(self) -> dict:
        return asdict(self)


def _check(cfg: RunConfig) -> RunConfig:
    p = []
    if not isinstance(cfg.snapshot, int) or not 0 <= cfg.snapshot <= cfg.trajectories:
        p.append("snapshot must be an integer between 0 and trajectories")
    for name in ("nx", "ny", "trajectories", "mcmc_sweeps", "mcmc_chains"):
        v = getattr(cfg, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            p.append(f"{name} must be a positive integer, got {v!r}")
    for name in ("nx", "ny"):
        v = getattr(cfg, name)
        if isinstance(v, int) and v < 8:
            p.append(f"{name} must be >= 8")
    for name in ("lx", "ly", "dt", "g", "record_interval"):
        v = getattr(cfg, name)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            p.append(f"{name} must be a positive number, got {v!r}")
    for name in ("t_equil", "t_average", "mu", "max_discard"):
        v = getattr(cfg, name)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
            p.append(f"{name} must be a non-negative number, got {v!r}")
    if not (isinstance(cfg.delta, (int, float)) and math.isfinite(cfg.delta)):
        p.append("delta must be a finite number")
    if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2**64:
        p.append("seed must be an integer in [0, 2**64)")
    if cfg.method not in ("euler", "rk4"):
        p.append("method must be 'euler' or 'rk4'")
    if not isinstance(cfg.refine, int) or cfg.refine < 0:
        p.append("refine must be a non-negative integer")
    if cfg.workers is not None and (not isinstance(cfg.workers, int) or cfg.workers < 1):
        p.append("workers must be a positive integer")
    if cfg.scan_parameter is not None:
        if cfg.scan_parameter not in ("mu", "delta"):
            p.append("scan_parameter must be 'mu' or 'delta'")
        elif cfg.scan_rate == 0:
            p.append("scan_rate must be non-zero")
        elif cfg.scan_end != cfg.scan_start and (cfg.scan_rate > 0) != (cfg.scan_end > cfg.scan_start):
            p.append("scan_rate sign contradicts the direction from scan_start to scan_end")
    if not p:
        try:
            cfg.record_every
            cfg.steps(cfg.t_equil + cfg.t_average)
        except ConfigError as e:
            p.extend(e.problems)
    if p:
        raise ConfigError(p)
    return cfg


# desk presets shrink grids and ensembles; paper presets follow the figure captions
PRESETS = {
    "scan-pump": {
        "desk": dict(nx=48, ny=48, lx=20.0, ly=20.0, dt=0.005, mu=0.9, delta=0.0, trajectories=100,
                     t_equil=10.0, t_average=0.0, record_interval=0.02, scan_parameter="mu",
                     scan_start=0.9, scan_rate=0.004, scan_end=1.1),
        "paper": dict(nx=96, ny=96, lx=20.0, ly=20.0, dt=1 / 600, mu=0.9, delta=0.0, trajectories=300,
                      t_equil=50.0, t_average=0.0, record_interval=0.1, scan_parameter="mu",
                      scan_start=0.9, scan_rate=0.004, scan_end=1.1),
    },
    "scan-detuning": {
        "desk": dict(nx=48, ny=48, lx=20.0, ly=20.0, dt=0.005, mu=1.0, delta=-0.5, trajectories=64,
                     t_equil=10.0, t_average=0.0, record_interval=0.05, scan_parameter="delta",
                     scan_start=-0.5, scan_rate=0.005, scan_end=0.5),
        "paper": dict(nx=96, ny=96, lx=50.0, ly=50.0, dt=200 / 15000, mu=1.0, delta=-0.5,
                      trajectories=60, t_equil=0.0, t_average=0.0, record_interval=200 / 1500,
                      scan_parameter="delta", scan_start=-0.5, scan_rate=0.005, scan_end=0.5),
    },
    "lifshitz": {
        "desk": dict(nx=48, ny=48, lx=20.0, ly=20.0, dt=1e-3, mu=1.0, delta=0.0, trajectories=200,
                     t_equil=10.0, t_average=10.0, record_interval=0.1),
        "paper": dict(nx=64, ny=64, lx=10.0, ly=10.0, dt=10 / 16000, mu=1.0, delta=0.0,
                      trajectories=3200, t_equil=5.0, t_average=5.0, record_interval=0.1),
    },
    "nongaussian": {
        "desk": dict(nx=48, ny=48, lx=20.0, ly=20.0, dt=1e-3, mu=1.0, delta=0.0, trajectories=400,
                     t_equil=10.0, t_average=10.0, record_interval=0.1),
        "paper": dict(nx=48, ny=48, lx=20.0, ly=20.0, dt=1e-3, mu=1.0, delta=0.0, trajectories=3200,
                      t_equil=5.0, t_average=5.0, record_interval=0.1),
    },
    "spectrum": {
        "desk": dict(nx=48, ny=48, lx=20.0, ly=20.0, dt=0.005, mu=1.0, delta=-0.45, trajectories=64,
                     t_equil=10.0, t_average=10.0, record_interval=0.05),
        "paper": dict(nx=96, ny=96, lx=50.0, ly=50.0, dt=100 / 15000, mu=1.0, delta=-0.45,
                      trajectories=800, t_equil=50.0, t_average=50.0, record_interval=0.2),
    },
    "mcmc-check": {
        "desk": dict(nx=16, ny=16, lx=10.0, ly=10.0, dt=1e-3, mu=1.0, delta=0.0, trajectories=256,
                     t_equil=5.0, t_average=20.0, record_interval=0.1, mcmc_sweeps=100000,
                     mcmc_chains=16),
        "paper": dict(nx=16, ny=16, lx=10.0, ly=10.0, dt=5e-4, mu=1.0, delta=0.0, trajectories=1024,
                      t_equil=5.0, t_average=40.0, record_interval=0.1, mcmc_sweeps=400000,
                      mcmc_chains=64),
    },
    "selfcheck": {"desk": {}, "paper": {}},
}
SUBCOMMANDS = tuple(PRESETS)

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name, value):
    """Type-check one config entry; JSON ints are accepted where floats are expected."""
    t = _FIELD_TYPES[name]
    if value is None:
        if "Optional" in str(t):
            return None
        raise ConfigError(f"{name} must not be null")
    if t in ("int", int) or str(t) == "Optional[int]":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if t in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(value, str):
        return value
    raise ConfigError(f"{name} must be a string, got {value!r}")


def resolve_config(subcommand, preset="desk", file_values=None, flag_values=None) -> RunConfig:
    """Layered configuration: defaults < preset < file < flags. Unknown keys are rejected."""
    if subcommand not in PRESETS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    if preset not in PRESETS[subcommand]:
        raise ConfigError(f"unknown preset {preset!r}")
    merged = dict(PRESETS[subcommand][preset])
    problems = []
    for layer in (file_values or {}, flag_values or {}):
        for k, v in layer.items():
            if k not in _FIELD_TYPES:
                problems.append(f"unknown key {k!r}")
                continue
            try:
                merged[k] = _coerce(k, v)
            except ConfigError as e:
                problems.extend(e.problems)
    if problems:
        raise ConfigError(problems)
    return _check(RunConfig(**merged))


def coarse_config(cfg: RunConfig) -> RunConfig:
    """Same Brownian paths at twice the step (one extra refinement level)."""
    return replace(cfg, dt=2 * cfg.dt, refine=cfg.refine + 1)


def _snapshot(cfg: RunConfig, run):
    if not cfg.snapshot:
        return None
    return inverse(run.spectral()["X"][: cfg.snapshot])


def _noise(cfg: RunConfig, tag="sh") -> EnsembleNoise:
    return EnsembleNoise(cfg.grid, cfg.seed, tag, range(cfg.trajectories), cfg.refine)


# ---------------------------------------------------------------------------


@dataclass
class ScanResult:
    config: RunConfig
    series: TimeSeriesRecorder
    profile_tau: list = field(default_factory=list)
    profile_value: list = field(default_factory=list)
    profile_kx: Optional[np.ndarray] = None
    profile: list = field(default_factory=list)
    discard_fraction: float = 0.0
    fields: Optional[np.ndarray] = None

    def points(self) -> list[EnsembleEstimate]:
        return self.series.pointwise("X")


class _KxProfile:
    """Ensemble-mean ``S(kx, ky=0)`` at every record, for detuning-momentum maps."""

    def __init__(self, result: ScanResult, grid: GridSpec):
        self.result = result
        self.grid = grid
        order = np.argsort(grid.kx)
        self.order = order
        result.profile_kx = grid.kx[order]

    def __call__(self, system, value, etas):
        Xh = system.spectral()["X"][system.alive]
        row = Xh[:, self.order, 0]
        neg = Xh[:, (-self.order) % self.grid.nx, 0]
        s = 0.5 * (np.abs(row) ** 2 + np.abs(neg) ** 2).mean(axis=0) * self.grid.cell_area
        self.result.profile_tau.append(system.tau)
        self.result.profile_value.append(value)
        self.result.profile.append(s)


def run_scan(cfg: RunConfig, kx_profile=False) -> ScanResult:
    """Adiabatic scan of ``mu`` or ``delta`` after a hold of ``t_equil`` at the start value."""
    if cfg.scan_parameter is None:
        raise ConfigError("scan runs need scan_parameter")
    sched = cfg.schedule()
    n = cfg.steps(sched.duration)
    run = SHIntegrator(cfg.grid, cfg.dt, _noise(cfg), method=cfg.method, workers=cfg.workers)
    rec = TimeSeriesRecorder(("X",))
    result = ScanResult(cfg, rec)
    recs = [rec]
    if kx_profile:
        recs.append(_KxProfile(result, cfg.grid))
    evolve(run, sched, n, recs, cfg.record_every, max_discard=cfg.max_discard)
    result.discard_fraction = run.discard_fraction
    result.fields = _snapshot(cfg, run)
    return result


@dataclass
class SteadyResult:
    config: RunConfig
    series: TimeSeriesRecorder
    spectra: SpectrumAccumulator
    intensity: EnsembleEstimate
    spectrum: Spectrum2D
    radial: RadialSpectrum
    discard_fraction: float = 0.0
    fields: Optional[np.ndarray] = None


def _steady(cfg: RunConfig, run) -> tuple:
    rec = TimeSeriesRecorder(tuple(k for k in ("X", "Xg") if k in run.spectral()))
    acc = SpectrumAccumulator(cfg.grid, rec.keys, start=cfg.t_equil)
    n = cfg.steps(cfg.t_equil + cfg.t_average)
    evolve(run, cfg.schedule(), n, [rec, acc], cfg.record_every, max_discard=cfg.max_discard)
    return rec, acc


def run_lifshitz(cfg: RunConfig) -> SteadyResult:
    """Direct integration of the reduced equation at fixed ``(mu, delta)``."""
    run = SHIntegrator(cfg.grid, cfg.dt, _noise(cfg), method=cfg.method, workers=cfg.workers)
    rec, acc = _steady(cfg, run)
    I = rec.window_average("X", start=cfg.t_equil)
    S = acc.spectrum("X")
    return SteadyResult(cfg, rec, acc, I, S, radial_average(S), run.discard_fraction,
                        _snapshot(cfg, run))


run_spectrum = run_lifshitz


@dataclass
class NonGaussianResult:
    config: RunConfig
    series: TimeSeriesRecorder
    spectra: SpectrumAccumulator
    gaussian: EnsembleEstimate
    direct: EnsembleEstimate
    difference: EnsembleEstimate
    variance_ratio: float
    spectrum: Spectrum2D
    spectrum_gaussian: Spectrum2D
    spectrum_difference: Spectrum2D
    discard_fraction: float = 0.0
    fields: Optional[np.ndarray] = None

    @property
    def radial(self) -> RadialSpectrum:
        return radial_average(self.spectrum)

    @property
    def radial_gaussian(self) -> RadialSpectrum:
        return radial_average(self.spectrum_gaussian)

    @property
    def radial_difference(self) -> RadialSpectrum:
        return radial_average(self.spectrum_difference)

    @property
    def corrected(self) -> EnsembleEstimate:
        """Gaussian mean plus the difference estimate (the variance-reduced ``<|X|^2>``)."""
        return EnsembleEstimate(self.gaussian.mean + self.difference.mean,
                                math.hypot(self.gaussian.stderr, self.difference.stderr),
                                self.difference.n)

    def summary(self) -> RunSummary:
        c = self.config
        return RunSummary(c.seed, range(c.trajectories), c.t_equil + c.t_average, c.dt, c.refine,
                          {"direct": self.direct, "gaussian": self.gaussian,
                           "difference": self.difference, "corrected": self.corrected})


def run_nongaussian(cfg: RunConfig) -> NonGaussianResult:
    """Gaussian mean-field ensemble plus the common-random-number difference field."""
    run = GaussianCRNIntegrator(cfg.grid, cfg.dt, _noise(cfg), workers=cfg.workers)
    rec, acc = _steady(cfg, run)
    t0 = cfg.t_equil
    gauss = rec.window_average("Xg", start=t0)
    direct = rec.window_average("X", start=t0)
    diff = rec.window_average("X", start=t0, minus="Xg")
    var_ratio = (diff.stderr / direct.stderr) ** 2 if direct.stderr > 0 else math.nan
    S = acc.spectrum("X")
    Sg = acc.spectrum("Xg")
    Sd = acc.spectrum("X", minus="Xg")
    return NonGaussianResult(cfg, rec, acc, gauss, direct, diff, var_ratio, S, Sg, Sd,
                             run.discard_fraction, _snapshot(cfg, run))


@dataclass
class MCMCCheckResult:
    config: RunConfig
    mcmc: EnsembleEstimate
    mcmc_quartic: EnsembleEstimate
    sde: EnsembleEstimate
    sde_quartic: EnsembleEstimate
    acceptance: np.ndarray
    tau_int: np.ndarray

    @property
    def z_score(self) -> float:
        d = self.mcmc - self.sde
        return abs(d.mean) / d.stderr


class _QuarticRecorder:
    def __init__(self, start):
        self.start = start
        self.sum = None
        self.sum2 = None
        self.count = 0

    def __call__(self, system, value, etas):
        if system.tau < self.start - 1e-12:
            return
        X = system.X
        m = X.real**2 + X.imag**2
        a = m.mean(axis=(-2, -1))
        b = (m * m).mean(axis=(-2, -1))
        if self.sum is None:
            self.sum, self.sum2 = a, b
        else:
            self.sum = self.sum + a
            self.sum2 = self.sum2 + b
        self.count += 1


def run_mcmc_check(cfg: RunConfig) -> MCMCCheckResult:
    """Metropolis sampling of ``exp(-H)`` against the stationary reduced-equation ensemble."""
    etas = cfg.etas
    mc = analytics.mcmc_sample(etas, cfg.grid, cfg.mcmc_sweeps, seed=cfg.seed, chains=cfg.mcmc_chains)
    run = SHIntegrator(cfg.grid, cfg.dt, _noise(cfg), method=cfg.method, workers=cfg.workers)
    q = _QuarticRecorder(cfg.t_equil)
    n = cfg.steps(cfg.t_equil + cfg.t_average)
    evolve(run, cfg.schedule(), n, q, cfg.record_every, max_discard=cfg.max_discard)
    alive = run.alive
    sde = estimate((q.sum / q.count)[alive])
    sde4 = estimate((q.sum2 / q.count)[alive])
    return MCMCCheckResult(cfg, estimate(mc.chain_xx), estimate(mc.chain_xx2), sde, sde4,
                           mc.acceptance, mc.tau_int)


# ---------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    value: float
    expected: float
    tol: float

    @property
    def passed(self) -> bool:
        return abs(self.value - self.expected) <= self.tol


def run_selfcheck() -> list[Check]:
    """Closed-form checks that need no simulation."""
    from .params import stability_eigensystem

    out = []
    c0 = analytics.gaussian_self_consistency(0.0)
    out.append(Check("self-consistent c(eta1=0)", c0.c, 0.25, 1e-12))
    c1 = analytics.gaussian_self_consistency(1.0)
    out.append(Check("cubic residual at eta1=1", 64 * c1.c**3 + 32 * c1.c**2 - 1, 0.0, 1e-12))
    out.append(Check("kei(0)", analytics.kelvin_kei(0.0), -math.pi / 4, 1e-14))
    out.append(Check("near-field r=0 vs c(0)", analytics.near_field_corr(0.0, c0.eta1_prime), c0.c, 1e-12))
    out.append(Check("far-field k=0", analytics.far_field_corr(0.0, c0.eta1_prime), 2.0, 1e-12))
    s = stability_eigensystem(1.0, 0.0)
    out.append(Check("lambda+ at mu=1", s.lambda_plus.real, 0.0, 1e-14))
    out.append(Check("lambda- at mu=1", s.lambda_minus.real, -2.0, 1e-14))
    s = stability_eigensystem(math.sqrt(2.0), 1.0)
    out.append(Check("lambda+ on mu^2-delta^2=1", s.lambda_plus.real, 0.0, 1e-12))
    s = stability_eigensystem(2.0, 0.0)
    out.append(Check("lambda+ at mu=2", s.lambda_plus.real, 1.0, 1e-14))
    e1, e2, e3 = reduced_etas(1.0, 0.0, 0.01)
    out.append(Check("eta3 at mu=1", e3, 0.5, 0.0))
    out.append(Check("eta1 at mu=1", e1, 0.0, 0.0))
    return out
