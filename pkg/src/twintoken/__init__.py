"""Two-token masked vision transformer for unsupervised domain adaptation,
built on a small numpy reverse-mode autodiff core."""

from . import autodiff, config, data, losses, model, refine, train
from .autodiff import Tensor
from .config import RunConfig
from .data import DomainSet, ShiftSpec, SyntheticTaskSpec, generate, load_dataset, save_dataset
from .losses import LossBundle, cross_entropy, mmd_transfer, mstn_center_transfer, \
    source_view_transfer_loss, supervised_contrastive, target_view_transfer_loss, total_loss
from .model import ForwardOutput, ModelConfig, TwoTokenTransformer, build_token_mask, \
    load_checkpoint, save_checkpoint, token_cosine_similarity
from .refine import PseudoLabelState, knn_refine, select_refinement_features, weighted_kmeans_refine
from .train import ExperimentResult, SGD, TrainReport, evaluate, run_experiment, \
    stage1_pretrain, stage2_train

__version__ = "0.1.0"
