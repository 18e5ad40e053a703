"""Two-stage egocentric stereo pose estimation at desk scale.

A small convolutional encoder feeds a pose proposal network (global
pooling plus an MLP) whose coarse joints are refined by a transformer that
samples image features around each joint's fish-eye projection in every
view.  Everything runs on synthetic data: joints of a kinematic skeleton
rendered as coloured Gaussian blobs in two downward fish-eye views.
"""

from .camera import FisheyeCamera, default_rig, project, project_points, visibility_count
from .config import ModelConfig, TrainConfig
from .errors import (
    CheckpointError,
    ContractError,
    DatasetError,
    EgoPoseError,
    InvalidInputError,
    NonFiniteError,
    ShapeMismatchError,
)
from .metrics import MetricsReport, build_report, mpjpe, multi_stage_loss, pa_mpjpe, procrustes_align
from .model import EgoPoseFormer, build_model
from .skeleton import KinematicTree, default_tree, forward_kinematics, sample_pose
from .synthdata import SyntheticDataset, generate_dataset, read_dataset, write_dataset
from .trainer import (
    Checkpoint,
    EncoderCheckpoint,
    ablate_proposal_noise,
    evaluate,
    grad_check,
    pretrain_heatmaps,
    train,
)

__version__ = "0.1.0"
