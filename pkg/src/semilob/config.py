"""Numerical tolerances shared by all modules, in one place."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Tolerances:
    degeneracy: float = 1e-12      # |m(z,1,1)| below this uses the degenerate root
    balanced: float = 1e-9         # |P(1,1) - P(-1,-1)| at or below this is balanced
    boundary_band: float = 1e-3    # report both coefficient sets inside this band
    inversion: float = 1e-8        # absolute tolerance of cdf inversion
    min_cells: int = 48            # first batch of oscillation cells
    max_cells: int = 6144          # give up (low confidence) beyond this many
    functional: float = 1e-9       # frequency-domain p_up and mean integrals
    reinit_mass: float = 1e-12     # reinitialization masses must sum to 1 within this
    sigma2_identity: float = 1e-12
    poisson_residual: float = 1e-12


TOLERANCES = Tolerances()


def with_overrides(**kw) -> Tolerances:
    """A copy of the defaults with some fields replaced (unknown keys rejected)."""
    unknown = set(kw) - set(Tolerances.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown tolerance keys: {sorted(unknown)}")
    return replace(TOLERANCES, **kw)


@contextmanager
def using(tolerances: Tolerances):
    """Temporarily make ``tolerances`` the package-wide defaults."""
    global TOLERANCES
    saved = TOLERANCES
    TOLERANCES = tolerances
    try:
        yield tolerances
    finally:
        TOLERANCES = saved


#: acceptance-check tolerances (per check), with run-time budgets in seconds where one applies
ACCEPTANCE = {
    "cl_reduction": {"abs": 1e-10, "budget_s": 1.0},
    "recurrence": {"abs": 1e-12, "budget_s": 10.0},
    "path_sum": {"abs": 1e-6, "budget_s": 30.0},
    "ks": {"max_distance": 0.01, "budget_s": 300.0},
    "tail": {"slope": 0.1, "prefactor_rel": 0.15, "budget_s": 600.0},
    "p_up": {"z": 3.0, "symmetric": 0.003, "budget_s": 900.0},
    "chain": {"z": 3.0},
    "sigma2": {"reduction": 1e-12, "poisson": 1e-12, "routes": 1e-10},
    "diffusion": {"rel": 0.15, "budget_s": 600.0},
    "calibration": {"P_abs": 0.01, "coverage": 0.90},
}

#: loosened acceptance tolerances for the reduced (``--fast``) sample sizes
ACCEPTANCE_FAST = {
    "ks": {"max_distance": 0.02},
    "tail": {"slope": 0.15, "prefactor_rel": 0.25},
    "p_up": {"symmetric": 0.006},
    "diffusion": {"rel": 0.25},
    "calibration": {"coverage": 0.85},
}
