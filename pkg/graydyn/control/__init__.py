from .policy import TrackingPolicy, OpenLoopPolicy, rollout_policy
from .tvlqr import TvlqrPolicy, linearize, riccati_gains, tvlqr, apply_policy
from .dircol import Trajectory, CostWeights, DircolConfig, dircol_plan, perturb_nominal
from .mbrl import MbrlConfig, EpisodeRecord, performance_metric, hold_distance, mbrl_loop
