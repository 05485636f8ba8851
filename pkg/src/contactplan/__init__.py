"""Contact-rich motion planning toolkit.

Hybrid contact-mode estimation with a particle filter over mode-conditioned
EKFs, impedance-setpoint planning with a weighted cross-entropy warmstart, and
a belief-weighted multiple-shooting MPC solved by an in-house primal-dual
interior-point method.
"""

from .cem import CemParams, CemResult, SamplingDistribution, colored_noise, icem_plan, rollout_cost
from .dynamics import (
    CalibrationResult,
    ContactMode,
    ContactPoint,
    ImpedanceGains,
    JointState,
    NoiseModel,
    RobotModel,
    calibrate_contact,
    contact_force,
    dynamics_jacobians,
    external_torque,
    forward_kinematics,
    impedance_torque,
    jacobian,
    observation_jacobian,
    observe,
    step,
)
from .estimator import (
    HybridBelief,
    HybridParticleFilter,
    Particle,
    RobotHybridSystem,
    TransitionMatrix,
    ekf_step,
    mode_belief,
    mode_conditioned_state,
    pf_step,
    systematic_resample,
)
from .nlp import (
    CostParams,
    NlpParams,
    NlpProblem,
    NlpSolution,
    SolveOptions,
    SolveStats,
    build_nlp,
    force_constraint,
    solve,
    stage_cost,
)
from .planner import EpisodeLog, PlannerConfig, plan_step, simulate_episode, true_step
from .scenarios import Scenario, ScenarioError, load_builtin, load_scenario, scenario_from_dict

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
