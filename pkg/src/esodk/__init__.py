"""Deep Koopman MPC with an extended state observer for vehicle path tracking."""

from .controllers import BicycleModel, MpcConfig, solve_dkmpc, solve_eso_dkmpc, solve_lmpc
from .eso import EsoGains, EsoState, design_gains, spectral_radius
from .koopman import KoopmanModel, TrainingConfig, TrajectoryDataset, load_checkpoint, save_checkpoint, train
from .sim import SCENARIOS, compare, compute_metrics, run_closed_loop
from .vehicle import ControlInput, Pose, VehicleParams, VehicleState, step_dynamics

__version__ = "0.1.0"
