from .layers import (ActNormLayer, CouplingLayer, InvLinearLayer, MLPNet, actnorm_initialize,
                     half_partition)
from .model import FlowModel, NumericalError, build_flow, parameter_gradients
from .io import load_model, model_from_dict, model_to_dict, save_model

__all__ = [
    "ActNormLayer", "CouplingLayer", "InvLinearLayer", "MLPNet", "FlowModel", "NumericalError",
    "actnorm_initialize", "build_flow", "half_partition", "load_model", "model_from_dict",
    "model_to_dict", "parameter_gradients", "save_model",
]
