"""Self-training guided disentangled adaptation for cross-domain segmentation."""
from .data import ShiftSpec, synth_dataset, tile_grid
from .ddm import DomainDisentangledModule, ddm_forward
from .metrics import ConfusionMatrix, EvalReport, summarize
from .network import StudentEnsemble, ensemble_predict, forward_full
from .train import TrainConfig, TrainState, evaluate, fit, train_step

__version__ = "0.1.0"
