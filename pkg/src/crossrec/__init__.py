"""Cross-domain collaborative filtering with a wide (collective factorization)
network, a deep (stacked encoder-decoder) network and their fusion."""

from .data import (
    CrossDomainDataset,
    ProtocolSpec,
    RatingsDataset,
    align_domains,
    apply_protocol,
    cold_start_users,
    full_cold_start,
    load_ratings,
    sparsify,
    split,
)
from .eval import EvalReport, evaluate, mae, paired_t_test, rmse
from .neucdcf import (
    KINDS,
    Model,
    TrainConfig,
    TrainLog,
    fuse_predict,
    init_model,
    load_checkpoint,
    save_checkpoint,
    total_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "CrossDomainDataset",
    "EvalReport",
    "KINDS",
    "Model",
    "ProtocolSpec",
    "RatingsDataset",
    "TrainConfig",
    "TrainLog",
    "align_domains",
    "apply_protocol",
    "cold_start_users",
    "evaluate",
    "full_cold_start",
    "fuse_predict",
    "init_model",
    "load_checkpoint",
    "load_ratings",
    "mae",
    "paired_t_test",
    "rmse",
    "save_checkpoint",
    "sparsify",
    "split",
    "total_loss",
    "train",
]
