"""Minimal numpy autodiff: tensors, layers, optimizers, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check, grad_check_report
from .layers import Attention, Block, Conv2d, LayerNorm, Linear, Module, Parameter, trunc_normal
from .optim import SGD, Adam, make_optimizer
from .tensor import (
    Tensor, add, avg_pool2, backward, bce_with_logits, clip, concat, conv2d, div, exp, gelu,
    is_grad_enabled, layernorm, log,
    matmul, mean, mul, no_grad, power, record_kinks, relu, reshape, sigmoid, softmax, sub, sum,
    take, tensor, transpose, upsample2,
)
