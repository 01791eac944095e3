from .schedule import NoiseSchedule, forward_noise, make_schedule
from .condition import ConditionBundle, assemble_condition
from .nets import ContextEmbedder, ControlBranch, Denoiser, LatentCodec, SmallUNet
from .sampling import generate_coarse_pool, sample_coarse
from .training import (
    CoarseModel,
    DiffusionTrainConfig,
    TrainingDiverged,
    build_freeze_mask,
    train_diffusion,
    training_step,
)

__all__ = [
    "NoiseSchedule", "make_schedule", "forward_noise",
    "ConditionBundle", "assemble_condition",
    "LatentCodec", "Denoiser", "ControlBranch", "ContextEmbedder", "SmallUNet",
    "sample_coarse", "generate_coarse_pool",
    "CoarseModel", "DiffusionTrainConfig", "TrainingDiverged",
    "build_freeze_mask", "train_diffusion", "training_step",
]
