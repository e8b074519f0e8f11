"""Multi-granularity contrastive pretraining on synthetic shapes.

Instance, pixel, and semantic-cluster contrastive objectives over a small
CNN encoder with a momentum twin, plus frozen-encoder probes and trend
experiments at desk scale.
"""

from .augment import AugmentConfig, AugmentRecord, ViewPair, two_views
from .cluster import (
    Centroids,
    PrototypeBank,
    align_centroids,
    ce_strategy_loss,
    km_loss,
    minibatch_kmeans,
    sinkhorn_codes,
    swapped_prediction_loss,
)
from .config import TrainConfig, desk_config, load_config, paper_scale_config
from .encoder import Encoder, EncoderConfig, NegativeQueue, make_momentum_encoder, momentum_update
from .errors import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    NumericsError,
)
from .losses import (
    Margin,
    Temperature,
    info_nce,
    instance_loss,
    neighbor_loss,
    pixel_loss,
    triplet_loss,
)
from .probes import emit_heatmap, linear_probe, mean_iou, pixel_probe
from .similarity import correspondence, cosine, discover_neighbors, pairwise_similarity
from .synthdata import SyntheticSample, generate_dataset
from .trainer import cosine_lr, fit, total_loss, train_step

__version__ = "0.1.0"
