"""LinkGAN desk-scale lab: locality-linked latent regularization on 16x16 scenes."""

from .checkpoint import CheckpointError, PartitionMismatchError, load_checkpoint, save_checkpoint
from .evaluation import ablation_sweep, evaluate, locality_report, masked_mse, quality_proxy
from .inversion import invert, local_edit, local_edit_many
from .linkreg import locality_losses, multi_link_loss
from .models import EvalReportV1, ExperimentConfigV1, LatentPartition, LinkSpec
from .networks import Synthesizer, init_params
from .pipeline import Trainer
from .training import TrainingDivergedError, train_step

__all__ = [
    "ExperimentConfigV1",
    "EvalReportV1",
    "LatentPartition",
    "LinkSpec",
    "Synthesizer",
    "init_params",
    "locality_losses",
    "multi_link_loss",
    "train_step",
    "Trainer",
    "TrainingDivergedError",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "PartitionMismatchError",
    "evaluate",
    "locality_report",
    "masked_mse",
    "quality_proxy",
    "ablation_sweep",
    "invert",
    "local_edit",
    "local_edit_many",
]
