"""Two-speed Vicsek model toolkit.

Simulates the microscopic moving/resting particle system, computes the
coefficients of its macroscopic limit (von Mises constants, generalized
collisional invariants, exchange operators and their closure), and integrates
the two-phase and closed averaged hydrodynamic systems in 1-D, with
cross-scale validation tying the levels together.
"""

from .errors import (ConfigError, ConsistencyError, DomainError, EvaluationError,
                     NumericsError, PositivityError, RangeError, SamplingError,
                     StiffnessError, Vicsek2pError)
from .vonmises import (GeneralizedInvariant, PhaseCoefficients, PhaseParams,
                       bracket_average, elliptic_residual, gci_build,
                       normalization_constant, order_parameter_c,
                       phase_coefficients, sample_von_mises)
from .exchange import (ClosureCoefficients, ExchangeParams, MacroState, Perturbation,
                       closure_A, closure_MNP, density_equilibrium_f,
                       equilibrium_scan, invert_total_density_k, linearized_DR,
                       linearized_DS, local_alignment_phi, mass_exchange_R,
                       momentum_exchange_S, positivity_bound,
                       projected_linearized_exchange, projected_S)
from .particle import (MacroFields, MicroParams, ParticleEnsemble, init_ensemble,
                       jump_rates, neighbor_mean_direction, observables, simulate,
                       step, step_orientations, step_positions, step_speed_jumps)
from .hydro import (ClosedField, SolverConfig, TwoPhaseField, mass_total,
                    relax_uniform_ode, run_closed, run_two_phase, step_closed,
                    step_two_phase)

__version__ = "0.1.0"
