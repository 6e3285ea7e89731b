"""Online feedback optimization with a momentum-mixed gradient for grid flexibility."""

from .controller import (
    ControllerConfig,
    ControllerState,
    ObjectiveSpec,
    StepRecord,
    controller_step,
)
from .grid import Actuator, Branch, Bus, GridError, Network, load_network, save_network
from .powerflow import (
    OutputSpec,
    PowerFlowDivergence,
    PowerFlowSolution,
    SensitivityMatrix,
    compute_sensitivities,
    solve_power_flow,
)
from .qp import ConstraintSpec, QpProblem, QpSolution, build_projection_qp, solve_qp
from .scenarios import (
    Event,
    Scenario,
    SweepResult,
    Trajectory,
    detect_settled,
    parameter_sweep,
    run_scenario,
)

__version__ = "0.1.0"
