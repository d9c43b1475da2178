"""safenav: constrained-RL navigation policies for tube environments,
with complete ReLU-network safety verification and model selection."""

__version__ = "0.1.0"

from .geometry import BUILTIN_TUBE_IDS, TubeModel, builtin_tube, resolve_tube
from .network import (GradientTape, PolicyNetwork, greedy_action, load_network,
                      policy_distribution, sample_action, save_network,
                      select_action)
from .simulator import (CapsuleState, EnvConfig, StepOutcome, TubeEnv,
                        distance_traveled, make_pose, observe,
                        render_observation)

__all__ = [
    "BUILTIN_TUBE_IDS", "TubeModel", "builtin_tube", "resolve_tube",
    "GradientTape", "PolicyNetwork", "greedy_action", "load_network",
    "policy_distribution", "sample_action", "save_network", "select_action",
    "CapsuleState", "EnvConfig", "StepOutcome", "TubeEnv",
    "distance_traveled", "make_pose", "observe", "render_observation",
    "__version__",
]
