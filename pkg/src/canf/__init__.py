"""Condition-aware neural network engine with a fused grouped batch path."""

from .condaware import (
    AdaptiveKernelBank,
    CondConv2d,
    CondLinear,
    ConditionEmbedder,
    WeightGenerator,
    conditional_conv_reference,
    conditional_linear_reference,
    fused_conditional_conv,
    fused_conditional_linear,
)
from .config import Config, ConfigError, ModelConfig, RunSettings, parse_config, serialize_config
from .data import SyntheticDataset, gen_dataset
from .diffusion import GuidanceSpec, NoiseSchedule, cfg_combine, ddim_sample, denoise_loss, make_schedule, q_sample
from .gradcheck import grad_check
from .harness import ExperimentReport, run_ablation, run_train
from .model import ToyDiffusionTransformer, build_model, count_parameters
from .tensor import ShapeError, Tensor, cat, conv2d, layer_norm, matmul, no_grad, softmax

__version__ = "0.1.0"
