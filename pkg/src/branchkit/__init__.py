"""Branching Markov chains in varying environments.

Simulation of trait-dependent branching populations, exact auxiliary-chain
machinery on finite trait spaces, and experiments that check the limit
statements tied to it: many-to-one identities, growth rates, trait
proportions, local densities and extremal particles.
"""

from .counts import CountPath, backward_lineage, simulate_counts
from .deviations import (CouplingReport, DensityRecord, ExtremesReport,
                         GrowthProbeReport, LocalDensityReport, TubeMeasure,
                         TubeSpec, assumption_mg_probe, bpve_couple,
                         extremal_particle_experiment,
                         local_density_experiment, predicted_speed,
                         tube_measure)
from .environments import (ConstantEnvironment, EnvironmentSequence,
                           EnvironmentToken, IIDEnvironment,
                           PeriodicEnvironment, constant, explicit,
                           iid_seeded, periodic)
from .errors import (BranchkitError, ConfigError, EnumerationBudgetExceeded,
                     ExtinctEverywhere, PopulationExceededCap,
                     SupercriticalityUnmet)
from .growth import (GrowthReport, LineageExperimentReport,
                     RateFunctionEvaluator, growth_report, growth_slope,
                     rho_eig, typical_lineage_experiment, variational_growth)
from .kernels import (DoeblinReport, MeanSemigroup, doeblin_consequences,
                      doeblin_constant, many_to_one_check, q_compose,
                      q_kernel)
from .lln import (LLNRecord, LLNReport, corollary_d_conditions,
                  ergodicity_profile, lln_experiment, separation_profile,
                  vi_bound)
from .measures import EmpiricalMeasure
from .models import (BranchingModel, FiniteModel, OffspringCountLaw,
                     TraitSpace, builtin, check_monotone, neutral_gw,
                     two_type_m2)
from .rng import replicate_generator
from .simulate import PopulationTree, simulate

__version__ = "0.1.0"

__all__ = [
    "BranchingModel",
    "BranchkitError",
    "ConfigError",
    "ConstantEnvironment",
    "CountPath",
    "CouplingReport",
    "DensityRecord",
    "DoeblinReport",
    "EmpiricalMeasure",
    "EnumerationBudgetExceeded",
    "EnvironmentSequence",
    "EnvironmentToken",
    "ExtinctEverywhere",
    "ExtremesReport",
    "FiniteModel",
    "GrowthProbeReport",
    "GrowthReport",
    "IIDEnvironment",
    "LLNRecord",
    "LLNReport",
    "LineageExperimentReport",
    "LocalDensityReport",
    "MeanSemigroup",
    "OffspringCountLaw",
    "PeriodicEnvironment",
    "PopulationExceededCap",
    "PopulationTree",
    "RateFunctionEvaluator",
    "SupercriticalityUnmet",
    "TraitSpace",
    "TubeMeasure",
    "TubeSpec",
    "assumption_mg_probe",
    "backward_lineage",
    "bpve_couple",
    "builtin",
    "check_monotone",
    "constant",
    "corollary_d_conditions",
    "doeblin_consequences",
    "doeblin_constant",
    "ergodicity_profile",
    "explicit",
    "extremal_particle_experiment",
    "growth_report",
    "growth_slope",
    "iid_seeded",
    "lln_experiment",
    "local_density_experiment",
    "many_to_one_check",
    "neutral_gw",
    "periodic",
    "predicted_speed",
    "q_compose",
    "q_kernel",
    "replicate_generator",
    "rho_eig",
    "separation_profile",
    "simulate",
    "simulate_counts",
    "tube_measure",
    "two_type_m2",
    "typical_lineage_experiment",
    "variational_growth",
    "vi_bound",
    "__version__",
]
