"""Declarative network specs and the forward/backward engine."""

from .spec import (
    LayerKind,
    LayerSpec,
    NetworkSpec,
    SpliceSpec,
    build_preset,
    flop_count,
    layer_flop_count,
    layer_names,
    layer_param_count,
    make_factorized,
    make_lstmp,
    make_output,
    make_relu,
    make_tdnn,
    param_count,
    spec_from_dict,
    spec_to_dict,
    toy_spec,
)
from .network import (
    AffineParams,
    FactorizedAffineParams,
    LstmpParams,
    Model,
    backward,
    forward,
    frame_accuracy,
    init_params,
    load_model,
    loss_and_gradients,
    save_model,
    validate_params,
)

__all__ = [
    "AffineParams",
    "FactorizedAffineParams",
    "LayerKind",
    "LayerSpec",
    "LstmpParams",
    "Model",
    "NetworkSpec",
    "SpliceSpec",
    "backward",
    "build_preset",
    "flop_count",
    "forward",
    "frame_accuracy",
    "init_params",
    "layer_flop_count",
    "layer_names",
    "layer_param_count",
    "load_model",
    "loss_and_gradients",
    "make_factorized",
    "make_lstmp",
    "make_output",
    "make_relu",
    "make_tdnn",
    "param_count",
    "save_model",
    "spec_from_dict",
    "spec_to_dict",
    "toy_spec",
    "validate_params",
]
