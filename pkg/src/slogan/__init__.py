"""Unsupervised graph domain adaptation with causal/spurious disentanglement,
generative intervention, and class-adaptive pseudo-label calibration."""

from .gradcore import Rng, Tensor, ParamStore, adam_step, finite_diff_check, set_default_dtype
from .graphdata import (
    Dataset, Graph, GraphBatch, SynthConfig, density_split, gen_synthetic_biased,
    make_batch, parse_tudataset, write_tudataset,
)
from .model import ModelConfig, SloganModel, load_model, save_model
from .trainer import (
    TrainConfig, adapt, ablate, bench_scaling, bound_audit, dump_features,
    evaluate, warmup,
)

__all__ = [
    "Rng", "Tensor", "ParamStore", "adam_step", "finite_diff_check", "set_default_dtype",
    "Dataset", "Graph", "GraphBatch", "SynthConfig", "density_split",
    "gen_synthetic_biased", "make_batch", "parse_tudataset", "write_tudataset",
    "ModelConfig", "SloganModel", "load_model", "save_model",
    "TrainConfig", "adapt", "ablate", "bench_scaling", "bound_audit",
    "dump_features", "evaluate", "warmup",
]

__version__ = "0.1.0"
