from .double_pendulum import DoublePendulumParams, true_system, end_effector
from .sampling import SamplingSpec, sample_transitions, random_actuation_rollout
