"""PPO with GAE, running observation normalisation, separated evaluation and
an optional forward-dynamics auxiliary head, on a small numpy autodiff."""
from .buffer import RolloutBuffer
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gae import compute_gae
from .nn import MLP, Adam, global_norm
from .normalizer import RunningNormState
from .policy import ActorCritic, LossCoefs, NetworkSpec, aux_forward_dynamics_loss, gaussian_entropy
from .trainer import EvalResult, NetworkConfig, PPOHyperparams, PPOTrainer, evaluate_policy, stream_rng

__all__ = [
    "RolloutBuffer", "CheckpointError", "load_checkpoint", "save_checkpoint", "compute_gae", "MLP",
    "Adam", "global_norm", "RunningNormState", "ActorCritic", "LossCoefs", "NetworkSpec",
    "aux_forward_dynamics_loss", "gaussian_entropy", "EvalResult", "NetworkConfig",
    "PPOHyperparams", "PPOTrainer", "evaluate_policy", "stream_rng",
]
