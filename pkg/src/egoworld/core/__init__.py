from .errors import EgoWorldError, ConfigError, FormatError, DataError, NumericalError, TrainingAborted
from .models import PoseFrame, ActionVector, AtomicSegment, Scene, BodyState, Trajectory, LatentSequence, RunResult
from .config import RunConfig, load_config
from .engine import WorldModel, fit, rollout
from .planner import cem_plan
from .evalkit import eval_single_step, eval_horizon_curve, eval_atomic
from .selftests import EgoWorldSelfTests

__all__ = [
    "EgoWorldError","ConfigError","FormatError","DataError","NumericalError","TrainingAborted",
    "PoseFrame","ActionVector","AtomicSegment","Scene","BodyState","Trajectory","LatentSequence","RunResult",
    "RunConfig","load_config","WorldModel","fit","rollout","cem_plan",
    "eval_single_step","eval_horizon_curve","eval_atomic","EgoWorldSelfTests",
]
