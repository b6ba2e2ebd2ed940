"""Layer Ensembles with shared-prefix (OLE) inference, an NNGP uncertainty benchmark
and greedy layer-sample ranking."""

from .ensemble import (
    GaussianPrediction,
    LayerEnsembleModel,
    deep_ensemble_samples,
    forward_sample,
    full_samples,
    load_model,
    predict,
    random_samples,
    sample_layers,
    save_model,
    sub_ensemble_samples,
    train_epoch,
)
from .nn import arch_from_sizes
from .ole import build_plan, measure, naive_eval, ole_eval, sort_samples
from .ranking import rank_samples

__all__ = [
    "GaussianPrediction",
    "LayerEnsembleModel",
    "arch_from_sizes",
    "build_plan",
    "deep_ensemble_samples",
    "forward_sample",
    "full_samples",
    "load_model",
    "measure",
    "naive_eval",
    "ole_eval",
    "predict",
    "random_samples",
    "rank_samples",
    "sample_layers",
    "save_model",
    "sort_samples",
    "sub_ensemble_samples",
    "train_epoch",
]
