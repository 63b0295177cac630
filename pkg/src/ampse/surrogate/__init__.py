"""Neural-network surrogates of module and system metrics."""

from .data import (
    Dataset,
    ModuleOracle,
    SystemOracle,
    load_dataset,
    sample_dataset,
    sample_points,
    save_dataset,
)
from .nn import (
    Hyper,
    SurrogateModel,
    as_evaluator,
    evaluate_model,
    gradient,
    init_model,
    nrmse,
    predict,
    train,
)

__all__ = [
    "Dataset", "Hyper", "ModuleOracle", "SurrogateModel", "SystemOracle", "as_evaluator", "evaluate_model",
    "gradient", "init_model", "load_dataset", "nrmse", "predict", "sample_dataset", "sample_points",
    "save_dataset", "train",
]
