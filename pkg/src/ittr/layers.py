"""Layers used by the stem, hybrid blocks, decoder, discriminator and heads.

MAC counting conventions (one multiply-accumulate = 1):
  conv:   out_ch * H' * W' * (in_ch / groups) * kh * kw
  linear: in * out per token
  instance norm: 2 per element (normalize + affine)
  activations, resampling: 0
Counts exclude the batch dimension and are exact integers.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _rng(rng):
    return rng if rng is not None else np.random.default_rng()


def kaiming_uniform(rng, shape, fan_in, dtype=None):
    bound = np.sqrt(6.0 / fan_in)
    arr = rng.uniform(-bound, bound, size=shape)
    return arr.astype(dtype or T.get_default_dtype())


class Module:
    """Minimal parameter container: children discovered via attributes."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}{name}", value)
        for name, child in self._children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def param_count(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    """Affine map on the last axis; weight stored as [out, in]."""

    def __init__(self, in_features, out_features, bias=True, rng=None):
        rng = _rng(rng)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(kaiming_uniform(rng, (out_features, in_features), in_features),
                             requires_grad=True)
        if bias:
            bound = 1.0 / np.sqrt(in_features)
            self.bias = Tensor(rng.uniform(-bound, bound, size=out_features)
                               .astype(T.get_default_dtype()), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        out = T.matmul(x, T.transpose(self.weight))
        if self.bias is not None:
            out = out + self.bias
        return out

    __call__ = forward

    def complexity(self, input_shape):
        tokens = int(np.prod(input_shape[:-1])) if len(input_shape) > 1 else 1
        if input_shape[-1] != self.in_features:
            raise T.ShapeError(f"linear expects {self.in_features} features, got {input_shape}")
        params = self.weight.size + (self.bias.size if self.bias is not None else 0)
        macs = tokens * self.in_features * self.out_features
        return params, macs, tuple(input_shape[:-1]) + (self.out_features,)


class Conv2d(Module):
    """Strided/grouped 2-d convolution (cross-correlation) on NCHW tensors."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 groups=1, bias=True, rng=None):
        if in_channels % groups or out_channels % groups:
            raise T.ShapeError(
                f"channels ({in_channels}->{out_channels}) not divisible by groups={groups}")
        rng = _rng(rng)
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_channels // groups) * kh * kw
        self.weight = Tensor(
            kaiming_uniform(rng, (out_channels, in_channels // groups, kh, kw), fan_in),
            requires_grad=True)
        if bias:
            bound = 1.0 / np.sqrt(fan_in)
            self.bias = Tensor(rng.uniform(-bound, bound, size=out_channels)
                               .astype(T.get_default_dtype()), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)

    __call__ = forward

    def complexity(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise T.ShapeError(f"conv expects {self.in_channels} channels, got {input_shape}")
        kh, kw = self.kernel
        hout = (h + 2 * self.padding - kh) // self.stride + 1
        wout = (w + 2 * self.padding - kw) // self.stride + 1
        params = self.weight.size + (self.bias.size if self.bias is not None else 0)
        macs = self.out_channels * hout * wout * (self.in_channels // self.groups) * kh * kw
        return params, macs, (self.out_channels, hout, wout)


class InstanceNorm2d(Module):
    """Per-(sample, channel) normalization over the spatial plane."""

    def __init__(self, channels, eps=1e-5):
        self.channels = channels
        self.eps = eps
        dt = T.get_default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)

    def forward(self, x):
        return T.instance_norm2d(x, self.gamma, self.beta, eps=self.eps)

    __call__ = forward

    def complexity(self, input_shape):
        c, h, w = input_shape
        return 2 * c, 2 * c * h * w, input_shape


def count_params_and_macs(module_or_spec, input_shape):
    """(learnable scalar count, forward MACs) for a layer, network, or spec.

    Anything exposing ``complexity(input_shape)`` is accepted; the counter
    is additive over composition by construction.
    """
    params, macs, _ = module_or_spec.complexity(tuple(input_shape))
    return int(params), int(macs)
