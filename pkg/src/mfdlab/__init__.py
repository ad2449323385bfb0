"""Learning-based perimeter control on multi-region MFD networks."""

__version__ = "0.1.0"

from .mfd import (AccumulationState, ConfigurationError, DomainError, InfeasibleSteadyState,
                  MfdParams, RegionNetwork, SteadyState, critical_accumulation, solve_steady_state,
                  state_derivative, step)
from .cost import ControlBounds, CostWeights
from .basis import BasisSpec, gen_critic_basis
from .irl import AcWeights, IrlLearner, LearnerConfig, LearnerDivergence, ReplayBuffer
from .scenarios import (DemandSpec, RunResult, ScenarioConfig, get_scenario, make_demand,
                        run_scenario, settling_time, total_time_spent)

__all__ = [
    "AccumulationState", "AcWeights", "BasisSpec", "ConfigurationError", "ControlBounds",
    "CostWeights", "DemandSpec", "DomainError", "InfeasibleSteadyState", "IrlLearner",
    "LearnerConfig", "LearnerDivergence", "MfdParams", "RegionNetwork", "ReplayBuffer",
    "RunResult", "ScenarioConfig", "SteadyState", "critical_accumulation", "gen_critic_basis",
    "get_scenario", "make_demand", "run_scenario", "settling_time", "solve_steady_state",
    "state_derivative", "step", "total_time_spent",
]
