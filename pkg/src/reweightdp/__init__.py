"""Fast per-example gradient clipping for differentially private training."""

from .autograd import Tape, Var, backward, backward_per_example
from .clipping import ClipConfig, clip, clipped_batch_gradient, weights
from .privacy import RdpLedger, calibrate_sigma, gaussian_rdp_eps, to_dp
from .trainer import TrainConfig, evaluate, train, train_step

__version__ = "0.1.0"

__all__ = [
    "ClipConfig", "RdpLedger", "Tape", "TrainConfig", "Var", "backward", "backward_per_example",
    "calibrate_sigma", "clip", "clipped_batch_gradient", "evaluate", "gaussian_rdp_eps",
    "to_dp", "train", "train_step", "weights",
]
