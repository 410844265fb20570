"""Trainable non-local reaction-diffusion image denoising.

A denoiser is a small unrolled network: T diffusion stages, each with
learned zero-mean local filters, learned weights over block-matched
similar patches, learned pointwise influence functions, and a learned
data-fidelity weight.  Training minimizes a loss against clean targets
with analytic gradients and full-batch limited-memory BFGS.
"""

from .diffusion import (
    DiffusionModel,
    ModelHyper,
    StageParameters,
    denoise,
    denoise_with_trace,
    diffusion_step,
)
from .image import (
    add_gaussian_noise,
    convolve,
    convolve_adjoint,
    convolve_kernel_gradient,
    mirror_pad,
    psnr,
    read_image,
    rotate180,
    ssim,
    ssim_and_gradient,
    write_image,
)
from .matching import compute_neighbor_table, patch_distance
from .nonlocal_op import apply_nonlocal, apply_nonlocal_adjoint, nonlocal_weight_gradient
from .params import (
    InfluenceWeights,
    dct_filter_bank,
    influence_eval,
    local_filter_chain,
    make_local_filter,
    make_nonlocal_filter,
    nonlocal_filter_chain,
    rbf_centers,
    rbf_design_row,
)
from .training import (
    TrainingSample,
    TrainResult,
    backprop_stage,
    finite_difference_check,
    initialize_model,
    load_model,
    loss_and_grad_output,
    loss_and_gradient,
    make_dataset,
    pack_parameters,
    save_model,
    train,
    unpack_parameters,
)

__version__ = "0.1.0"

__all__ = [
    "DiffusionModel",
    "InfluenceWeights",
    "ModelHyper",
    "StageParameters",
    "TrainResult",
    "TrainingSample",
    "add_gaussian_noise",
    "apply_nonlocal",
    "apply_nonlocal_adjoint",
    "backprop_stage",
    "compute_neighbor_table",
    "convolve",
    "convolve_adjoint",
    "convolve_kernel_gradient",
    "dct_filter_bank",
    "denoise",
    "denoise_with_trace",
    "diffusion_step",
    "finite_difference_check",
    "influence_eval",
    "initialize_model",
    "load_model",
    "local_filter_chain",
    "loss_and_grad_output",
    "loss_and_gradient",
    "make_dataset",
    "make_local_filter",
    "make_nonlocal_filter",
    "mirror_pad",
    "nonlocal_filter_chain",
    "nonlocal_weight_gradient",
    "pack_parameters",
    "patch_distance",
    "psnr",
    "rbf_centers",
    "rbf_design_row",
    "read_image",
    "rotate180",
    "save_model",
    "ssim",
    "ssim_and_gradient",
    "train",
    "unpack_parameters",
    "write_image",
]
