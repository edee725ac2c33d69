"""Conditional local convolution recurrent network for forecasting signals on the sphere."""

from .data import AdvectionParams, Dataset, gen_synthetic, load_dataset, save_dataset
from .graph import knn_graph, pack_geometry
from .kernel import CondLocalKernel, clc_conv
from .model import (ModelConfig, Seq2SeqModel, TrainConfig, evaluate, load_checkpoint,
                    save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "AdvectionParams", "CondLocalKernel", "Dataset", "ModelConfig", "Seq2SeqModel", "TrainConfig",
    "clc_conv", "evaluate", "gen_synthetic", "knn_graph", "load_checkpoint", "load_dataset",
    "pack_geometry", "save_checkpoint", "save_dataset", "train",
]
