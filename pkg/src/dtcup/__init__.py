"""Deformable transposed-convolution upsampling for 2D/3D feature maps.

Dependency-light building blocks (dense tensors, convolution, transposed
convolution, grid sampling, all with hand-derived backward passes), the
deformable transposed-convolution upsampling unit, a miniature
encoder-decoder segmentation network with pluggable upsamplers, metrics,
synthetic datasets, and an experiment CLI.
"""

from .dtc import (
    ABLATION_ROWS,
    AblationSwitches,
    DtcParams,
    ReceptiveField,
    coordinate_gen,
    dtc_backward,
    dtc_forward,
    init_dtc,
    receptive_field_to_lambda,
)
from .ops import (
    ConvSpec,
    SampleGrid,
    TConvSpec,
    conv_backward,
    conv_forward,
    grid_sample,
    grid_sample_backward,
    interp_upsample,
    make_base_grid,
    tconv_backward,
    tconv_forward,
)
from .tensor import (
    Shape,
    ShapeError,
    Tensor,
    activation_sigmoid,
    activation_tanh,
    ew_add,
    tensor,
    zeros,
    zeros_like,
)
from .unet import UNetConfig, UNetParams, build_unet, count_params_flops, unet_backward, unet_forward

__version__ = "0.1.0"

__all__ = [
    "ABLATION_ROWS",
    "AblationSwitches",
    "ConvSpec",
    "DtcParams",
    "ReceptiveField",
    "SampleGrid",
    "Shape",
    "ShapeError",
    "TConvSpec",
    "Tensor",
    "UNetConfig",
    "UNetParams",
    "activation_sigmoid",
    "activation_tanh",
    "build_unet",
    "conv_backward",
    "conv_forward",
    "coordinate_gen",
    "count_params_flops",
    "dtc_backward",
    "dtc_forward",
    "ew_add",
    "grid_sample",
    "grid_sample_backward",
    "init_dtc",
    "interp_upsample",
    "make_base_grid",
    "receptive_field_to_lambda",
    "tconv_backward",
    "tconv_forward",
    "tensor",
    "unet_backward",
    "unet_forward",
    "zeros",
    "zeros_like",
]
