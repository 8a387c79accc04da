"""Semi-Markov model of the best bid and ask queues of a limit order book.

Modules
-------
kernel
    Duration laws, the per-side semi-Markov kernel, reinitialization laws.
depletion
    Transforms, tail classes and inverted distributions of queue depletion times.
price
    The induced price-increment chain and its diffusion constants.
simulator
    Reproducible event-level simulation and Monte Carlo oracles.
calibration
    LOBSTER parsing, event classification and maximum-likelihood fits.
validation
    Cross-module acceptance checks.
cli
    The ``semilob`` command.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .kernel import (Deterministic, EmpiricalStep, Exponential, Gamma, KernelSide,  # noqa: E402
                     ReinitDistribution, Weibull, validate_side)
from .depletion import classify_tail, sigma_cdf, sigma_cf, sigma_laplace  # noqa: E402
from .price import chain_params, diffusion_constants, p1_up, p1_up_table  # noqa: E402
from .simulator import SimConfig, simulate_event_log, simulate_path  # noqa: E402

__all__ = [
    "Deterministic", "EmpiricalStep", "Exponential", "Gamma", "KernelSide",
    "ReinitDistribution", "Weibull", "validate_side", "classify_tail", "sigma_cdf", "sigma_cf",
    "sigma_laplace", "chain_params", "diffusion_constants", "p1_up", "p1_up_table",
    "SimConfig", "simulate_event_log", "simulate_path", "__version__",
]
