"""Local and global self-supervised pretraining for dense and image-level features."""

from .config import TrainConfig, load_config
from .data import ShapesConfig, ShapesDataset, gen_shapes, read_dataset, render_shapes
from .estimator import VICRegL
from .eval import (LinearProbeClassifier, LinearProbeSegmenter, ProbeConfig, ProbeResult,
                   linear_probe_classify, linear_probe_segment, miou)
from .geometry import CropRect, PositionGrid, SeedSample, apply_view, position_grid, sample_view_spec
from .losses import (LossBreakdown, VicregWeights, total_loss_multicrop, total_loss_two_view,
                     vicreg_loss)
from .matching import MatchSet, feature_match, location_match, top_gamma
from .model import (Checkpoint, VICRegLNet, build_model, load_checkpoint, save_checkpoint)
from .trainer import Trainer, pretrain
from .verify import finite_diff_check, run_suite

__version__ = "0.1.0"
