"""Spectral construction of the Brox diffusion generator on the circle.

The package builds the singular operator (1/2) Lap + grad W . grad for a
periodic Brownian environment W through a paracontrolled parametrization
of its domain, and ships desk-scale experiments for the renormalized
enhanced noise, resolvent and semigroup limits, Gaussian kernel bounds,
the spectral gap and invariant measure, exponential mixing, and the
martingale problem of the associated diffusion.
"""

from .besov import BesovSpec, besov_norm, holder_norm, lp_block
from .calculus import (
    ParacontrolledFunction,
    SourcedField,
    corrector_cnabla,
    corrector_s,
    estimate_N_Xi,
    gamma_map,
    para,
    para_tilde,
    phi_map,
    probe_set,
    resonant,
)
from .fields import (
    FourierField,
    PeriodicGrid,
    apply_multiplier,
    derivative,
    heat_flow,
    laplacian,
    parametrix_inverse,
    product,
)
from .noise import (
    EnhancedNoise,
    NoiseRealization,
    delta_W,
    enhance,
    potential,
    resonant_lift,
    sample_noise,
    solve_X1,
    truncate,
    xalpha_distance,
    xalpha_norm,
)

__version__ = "0.1.0"

__all__ = [
    "BesovSpec",
    "EnhancedNoise",
    "FourierField",
    "NoiseRealization",
    "ParacontrolledFunction",
    "PeriodicGrid",
    "SourcedField",
    "apply_multiplier",
    "besov_norm",
    "corrector_cnabla",
    "corrector_s",
    "delta_W",
    "derivative",
    "enhance",
    "estimate_N_Xi",
    "gamma_map",
    "heat_flow",
    "holder_norm",
    "laplacian",
    "lp_block",
    "para",
    "para_tilde",
    "parametrix_inverse",
    "phi_map",
    "potential",
    "probe_set",
    "product",
    "resonant",
    "resonant_lift",
    "sample_noise",
    "solve_X1",
    "truncate",
    "xalpha_distance",
    "xalpha_norm",
]
