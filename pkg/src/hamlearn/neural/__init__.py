"""Differentiable core, graph network and optimiser."""
from .autodiff import Segments, Tensor, concat, segment_max, segment_mean, segment_min, segment_sum
from .model import (
    AGGREGATORS,
    GraphBatch,
    ModelConfig,
    Standardizer,
    count_parameters,
    degree_histogram,
    forward,
    init_params,
    mlp_forward,
    pna_layer,
    task_predict,
)
from .optim import EPOCHS_DEFAULT, LR_END, LR_START, AdamWState, adamw_step, lr_schedule
from .gradcheck import gradcheck, numerical_gradient, relative_errors
