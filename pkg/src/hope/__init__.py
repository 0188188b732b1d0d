"""HOPE: an orthogonal-prototype mixture-of-experts projection head, on a small numpy autodiff core."""
from .head import HopeConfig, HopeHead, ViewBatch, elastic_select, forward, init_head
from .synthetic import DatasetSpec, generate, load_dataset, save_dataset
from .train import TrainConfig, Variant, evaluate, train

__all__ = ["HopeConfig", "HopeHead", "ViewBatch", "elastic_select", "forward", "init_head",
           "DatasetSpec", "generate", "load_dataset", "save_dataset", "TrainConfig", "Variant",
           "evaluate", "train"]
