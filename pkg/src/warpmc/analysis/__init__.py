"""Evaluation tools for chains and trained proposals."""
from .conditionals import compare_conditionals
from .ess import (EssError, autocorrelation, effective_sample_size, ess_per_second, integrated_time,
                  speedup_factor)
from .free_energy import FreeEnergyProfile, free_energy_profile
from .tica import TicaError, TicaModel, chain_features, tica_fit
from .validation import validate_new_states

__all__ = [
    "EssError", "FreeEnergyProfile", "TicaError", "TicaModel", "autocorrelation", "chain_features",
    "compare_conditionals", "effective_sample_size", "ess_per_second", "free_energy_profile",
    "integrated_time", "speedup_factor", "tica_fit", "validate_new_states",
]
