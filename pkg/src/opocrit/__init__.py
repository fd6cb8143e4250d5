"""Critical-point fluctuations of a non-degenerate parametric oscillator.

Stochastic simulation of the reduced order-parameter equation near threshold
(direct, Gaussian mean-field and common-random-number difference ensembles),
a positive-P integrator for the full signal/idler/pump model, closed-form
Gaussian results, and a Metropolis sampler of the stationary distribution.
"""

__version__ = "0.1.0"

from .analytics import *  # noqa: F401,F403
from .dynamics import *  # noqa: F401,F403
from .grid import *  # noqa: F401,F403
from .noise import *  # noqa: F401,F403
from .observables import *  # noqa: F401,F403
from .params import *  # noqa: F401,F403
from .experiments import ConfigError, RunConfig, resolve_config  # noqa: F401
