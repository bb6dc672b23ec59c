from .bundle import load_model, read_manifest, save_model
from .compositional import (
    AccessCase,
    CateEstimate,
    CompositionalModel,
    MissingClassError,
    fit_compositional,
    infer_cate_hierarchical,
    infer_cate_parallel,
    pooled_component_data,
    predict_cate,
)
from .unitary import (
    LogisticModel,
    UnitaryModel,
    fit_logistic,
    fit_unitary,
    fit_xlearner,
    infer_cate_unitary,
    predict_cate_unitary,
)


def estimate(model, units, n_samples=None, seed=0):
    """CATE estimates from either model family."""
    if isinstance(model, CompositionalModel):
        return predict_cate(model, units, n_samples, seed)
    return predict_cate_unitary(model, units)


__all__ = [
    "AccessCase",
    "CateEstimate",
    "CompositionalModel",
    "LogisticModel",
    "MissingClassError",
    "UnitaryModel",
    "estimate",
    "fit_compositional",
    "fit_logistic",
    "fit_unitary",
    "fit_xlearner",
    "infer_cate_hierarchical",
    "infer_cate_parallel",
    "infer_cate_unitary",
    "load_model",
    "pooled_component_data",
    "predict_cate",
    "predict_cate_unitary",
    "read_manifest",
    "save_model",
]
