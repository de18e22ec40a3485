"""Unsupervised part discovery via aligned part and pixel representations."""

from .augment import AffineParams, AugmentSpec, make_pair
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .core import (
    CheckpointError,
    ConfigError,
    EmptyForegroundError,
    FeatureMap,
    Image,
    NumericError,
    PartMask,
    PartRepresentations,
    ProbabilityMap,
    SyntheticFeatureMap,
    bilinear_resize,
    coordinate_grid,
)
from .pipeline import (
    EmbeddingBank,
    PartDiscoveryModel,
    TrainState,
    build_model,
    discover_parts,
    init_state,
    select_embeddings,
    swap_reconstruct,
    train_step,
)
from .synth import SyntheticSpec
from .transfer import TransferConfig, exchange, probability_map, synthesize

__version__ = "0.1.0"
