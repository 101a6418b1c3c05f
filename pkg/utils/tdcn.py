#!/usr/bin/env python3
"""
Time-domain convolutional network (TDCN) used both as the speech separator
and as the virtual microphone estimator.

The network follows the Conv-TasNet layout: a strided convolutional encoder,
a stack of dilated depthwise-separable blocks producing per-head masks over
the encoder basis, and a transposed-convolution decoder. Parameters are a
flat, name-sorted dict of DiffTensors so they can be checkpointed and updated
by the optimizer without any module machinery.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from utils import autodiff as ad
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

MASK_ACTIVATIONS = ('relu', 'sigmoid', 'linear')
NORM_EPS = 1e-8


@dataclass(frozen=True)
class TdcnConfig:
    """Network sizes: N basis, L kernel, B bottleneck, H hidden, P conv kernel, X blocks, R repeats"""

    basis_size: int = 64
    kernel_length: int = 16
    bottleneck: int = 32
    hidden: int = 64
    conv_kernel: int = 3
    blocks_per_repeat: int = 4
    repeats: int = 2
    output_heads: int = 1
    input_channels: int = 2
    mask_activation: str = 'linear'

    def __post_init__(self):
        for name in ('basis_size', 'kernel_length', 'bottleneck', 'hidden', 'conv_kernel',
                     'blocks_per_repeat', 'repeats', 'output_heads', 'input_channels'):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise ConfigError(f"TDCN {name} must be a positive integer, got {value}")
        if self.kernel_length % 2:
            raise ConfigError(f"TDCN kernel_length must be even, got {self.kernel_length}")
        if self.mask_activation not in MASK_ACTIVATIONS:
            raise ConfigError(f"unknown mask activation '{self.mask_activation}', expected one of {MASK_ACTIVATIONS}")

    @property
    def stride(self):
        return self.kernel_length // 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _block_names(cfg):
    for r in range(cfg.repeats):
        for x in range(cfg.blocks_per_repeat):
            yield f"blocks.{r}.{x}", 2 ** x


def parameter_shapes(cfg):
    """Ordered mapping of parameter name to (shape, init kind, fan_in)."""
    n, b, h = cfg.basis_size, cfg.bottleneck, cfg.hidden
    shapes = {
        'encoder.weight': ((n, cfg.input_channels, cfg.kernel_length), 'uniform', cfg.input_channels * cfg.kernel_length),
        'ln_in.gamma': ((1, n, 1), 'ones', None),
        'ln_in.beta': ((1, n, 1), 'zeros', None),
        'bottleneck.weight': ((b, n, 1), 'uniform', n),
        'bottleneck.bias': ((1, b, 1), 'zeros', None),
    }
    for name, _ in _block_names(cfg):
        shapes.update({
            f"{name}.conv_in.weight": ((h, b, 1), 'uniform', b),
            f"{name}.conv_in.bias": ((1, h, 1), 'zeros', None),
            f"{name}.prelu1.alpha": ((1,), 'prelu', None),
            f"{name}.norm1.gamma": ((1, h, 1), 'ones', None),
            f"{name}.norm1.beta": ((1, h, 1), 'zeros', None),
            f"{name}.dconv.weight": ((h, 1, cfg.conv_kernel), 'uniform', cfg.conv_kernel),
            f"{name}.dconv.bias": ((1, h, 1), 'zeros', None),
            f"{name}.prelu2.alpha": ((1,), 'prelu', None),
            f"{name}.norm2.gamma": ((1, h, 1), 'ones', None),
            f"{name}.norm2.beta": ((1, h, 1), 'zeros', None),
            f"{name}.conv_out.weight": ((b, h, 1), 'uniform', h),
            f"{name}.conv_out.bias": ((1, b, 1), 'zeros', None),
        })
    shapes.update({
        'prelu_out.alpha': ((1,), 'prelu', None),
        'mask.weight': ((cfg.output_heads * n, b, 1), 'uniform', b),
        'mask.bias': ((1, cfg.output_heads * n, 1), 'zeros', None),
        'decoder.weight': ((n, 1, cfg.kernel_length), 'uniform', n),
    })
    return shapes


def init_params(cfg, seed=0):
    """
    Initialize TDCN parameters.

    Weights are uniform in +-1/sqrt(fan_in), biases and norm shifts zero,
    norm gains one and PReLU slopes 0.25.

    Returns:
        dict: parameter name -> DiffTensor (requires_grad), sorted by name
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, kind, fan_in) in parameter_shapes(cfg).items():
        if kind == 'uniform':
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        elif kind == 'ones':
            value = np.ones(shape)
        elif kind == 'prelu':
            value = np.full(shape, 0.25)
        else:
            value = np.zeros(shape)
        params[name] = ad.parameter(value)
    logger.debug(f"Initialized TDCN with {num_parameters(params)} parameters (seed={seed})")
    return dict(sorted(params.items()))


def num_parameters(params):
    return int(sum(p.size for p in params.values()))


def prelu(x, alpha):
    return ad.relu(x) - alpha * ad.relu(-x)


def global_layer_norm(x, gamma, beta):
    """Normalize each batch item over channels and time, [B, C, T]."""
    mu = x.mean(axis=(1, 2), keepdims=True)
    centered = x - mu
    variance = (centered * centered).mean(axis=(1, 2), keepdims=True)
    return centered / ad.sqrt(variance + NORM_EPS) * gamma + beta


def _pointwise(x, weight, bias):
    return ad.conv1d(x, weight) + bias


def _separable_block(x, params, name, dilation, cfg):
    y = _pointwise(x, params[f"{name}.conv_in.weight"], params[f"{name}.conv_in.bias"])
    y = global_layer_norm(prelu(y, params[f"{name}.prelu1.alpha"]),
                          params[f"{name}.norm1.gamma"], params[f"{name}.norm1.beta"])
    total = (cfg.conv_kernel - 1) * dilation
    y = ad.conv1d(y, params[f"{name}.dconv.weight"], dilation=dilation,
                  padding=(total // 2, total - total // 2), groups=cfg.hidden) + params[f"{name}.dconv.bias"]
    y = global_layer_norm(prelu(y, params[f"{name}.prelu2.alpha"]),
                          params[f"{name}.norm2.gamma"], params[f"{name}.norm2.beta"])
    return x + _pointwise(y, params[f"{name}.conv_out.weight"], params[f"{name}.conv_out.bias"])


def _mask_nonlinearity(x, activation):
    if activation == 'relu':
        return ad.relu(x)
    if activation == 'sigmoid':
        return ad.sigmoid(x)
    return x


def encoder_padding(length, cfg):
    """Right padding that makes the strided encoder frames cover the signal exactly."""
    if length < cfg.kernel_length:
        return cfg.kernel_length - length
    return (cfg.stride - (length - cfg.kernel_length) % cfg.stride) % cfg.stride


def tdcn_forward(params, cfg, x):
    """
    Run the network on a batch of multichannel waveforms.

    Args:
        params: dict from init_params
        cfg: TdcnConfig
        x: DiffTensor or array [batch, input_channels, T]

    Returns:
        DiffTensor [batch, output_heads, T]
    """
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1] != cfg.input_channels:
        raise ShapeError(f"TDCN expects [batch, {cfg.input_channels}, T] input, got {x.shape}")
    batch, _, length = x.shape
    right = encoder_padding(length, cfg)
    if right:
        x = ad.pad(x, ((0, 0), (0, 0), (0, right)))

    basis = ad.relu(ad.conv1d(x, params['encoder.weight'], stride=cfg.stride))
    frames = basis.shape[2]
    y = global_layer_norm(basis, params['ln_in.gamma'], params['ln_in.beta'])
    y = _pointwise(y, params['bottleneck.weight'], params['bottleneck.bias'])
    for name, dilation in _block_names(cfg):
        y = _separable_block(y, params, name, dilation, cfg)
    y = prelu(y, params['prelu_out.alpha'])
    masks = _mask_nonlinearity(_pointwise(y, params['mask.weight'], params['mask.bias']), cfg.mask_activation)

    heads = cfg.output_heads
    masked = masks.reshape(batch, heads, cfg.basis_size, frames) * basis.reshape(batch, 1, cfg.basis_size, frames)
    decoded = ad.conv_transpose1d(masked.reshape(batch * heads, cfg.basis_size, frames),
                                  params['decoder.weight'], stride=cfg.stride)
    return decoded[:, 0, :length].reshape(batch, heads, length)


def _batched(x, channels):
    x = ad.as_tensor(x)
    if x.ndim == 1 and channels == 1:
        return x.reshape(1, 1, x.shape[0]), 'mono'
    if x.ndim == 2:
        return x.reshape(1, x.shape[0], x.shape[1]), 'single'
    if x.ndim == 3:
        return x, 'batch'
    raise ShapeError(f"expected [{channels}, T] or [batch, {channels}, T] input, got {x.shape}")


def vme_forward(params, cfg, r):
    """
    Estimate the virtual microphone signal from the real microphones.

    Args:
        r: [C_r, T] or [batch, C_r, T]

    Returns:
        DiffTensor [1, T] or [batch, 1, T]
    """
    if cfg.output_heads != 1:
        raise ShapeError(f"a VME network has a single output head, config has {cfg.output_heads}")
    x, layout = _batched(r, cfg.input_channels)
    out = tdcn_forward(params, cfg, x)
    return out if layout == 'batch' else out[0]


def separator_forward(params, cfg, mixture):
    """
    Separate a single-channel mixture into ``output_heads`` sources.

    Args:
        mixture: [T], [1, T] or [batch, 1, T]

    Returns:
        DiffTensor [I, T] or [batch, I, T]
    """
    if cfg.input_channels != 1:
        raise ShapeError(f"a separator takes one input channel, config has {cfg.input_channels}")
    x, layout = _batched(mixture, 1)
    out = tdcn_forward(params, cfg, x)
    return out if layout == 'batch' else out[0]


class TdcnModel:
    """Config and parameters of one network, the unit the trainers and checkpoints handle"""

    def __init__(self, cfg, params=None, seed=0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        missing = set(parameter_shapes(cfg)) - set(self.params)
        if missing:
            raise ShapeError(f"missing TDCN parameters: {sorted(missing)[:5]}")

    def __call__(self, x):
        if self.cfg.input_channels == 1:
            return separator_forward(self.params, self.cfg, x)
        return vme_forward(self.params, self.cfg, x)

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def frozen(self):
        """Copy whose parameters do not collect gradients."""
        return TdcnModel(self.cfg, {k: ad.DiffTensor(v.data) for k, v in self.params.items()})

    def state_dict(self):
        return {name: param.data for name, param in self.params.items()}

    def load_state_dict(self, state):
        for name, shape_info in parameter_shapes(self.cfg).items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != shape_info[0]:
                raise ShapeError(f"parameter {name} has shape {value.shape}, expected {shape_info[0]}")
            self.params[name] = ad.parameter(value)
