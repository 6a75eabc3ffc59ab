"""Plan and simulate decentralized localization of drone light-point swarms."""

from .engine import ExperimentConfig, Mode, Policy, RunLogs, run
from .exceptions import SwarmLocError
from .mesh import PointCloud, TriangleMesh, load_mesh, poisson_disk_sample
from .metrics import chamfer, hausdorff, metrics_series
from .planner import FlsSpec, Plan, SwarmPlanner, load_plan, plan_swarm
from .protocol import Message, MessageKind, decode_message, encode_message
from .sensor import DeadReckoning, SensorModel, measure_relative

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "Mode", "Policy", "RunLogs", "run", "SwarmLocError",
    "PointCloud", "TriangleMesh", "load_mesh", "poisson_disk_sample",
    "chamfer", "hausdorff", "metrics_series",
    "FlsSpec", "Plan", "SwarmPlanner", "load_plan", "plan_swarm",
    "Message", "MessageKind", "decode_message", "encode_message",
    "DeadReckoning", "SensorModel", "measure_relative",
]
