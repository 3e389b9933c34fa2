"""Resource allocation and simulation for sensing-enabled vertical federated edge learning."""

from .aircomp import DomainError, aggregate, mse_bound
from .convergence import ConvergenceConstants, avg_grad_bound, omega
from .model import (AllocationPlan, ChannelState, DeviceParams, NetworkParams, SystemConfig, check_feasibility,
                    sample_channels)
from .optimizer import (BASELINES, SCHEMES, InfeasibleError, SolveOptions, SolveTrace, algorithm1, algorithm2,
                        baseline_plan, solve_all)
from .sim import make_task, train

__version__ = "0.1.0"

__all__ = [
    "AllocationPlan", "BASELINES", "ChannelState", "ConvergenceConstants", "DeviceParams", "DomainError",
    "InfeasibleError", "NetworkParams", "SCHEMES", "SolveOptions", "SolveTrace", "SystemConfig", "aggregate",
    "algorithm1", "algorithm2", "avg_grad_bound", "baseline_plan", "check_feasibility", "make_task", "mse_bound",
    "omega", "sample_channels", "solve_all", "train",
]
