"""Translation generator: conv stem, a body of hybrid blocks, conv decoder.

The stem embeds overlapping patches with three convolutions (7x7 stride 1,
then two 3x3 stride 2), for an effective 13x13 receptive field at total
stride 4. Each hybrid block mixes tokens through a local depth-wise conv
branch and a global pruned-attention branch, fuses them channel-wise with a
linear layer, and refines with a convolutional feed-forward (expand ->
depth-wise conv -> GELU -> reduce). The decoder mirrors the stem with
nearest-neighbor upsampling followed by 3x3 convolutions, ending in a 7x7
conv to RGB and tanh.
"""

import os
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .attention import DPSA, AttentionConfig, ConfigError, SelfAttention2d
from .layers import Conv2d, InstanceNorm2d, Linear, Module
from .serialization import load_tensors, save_tensors
from .tensor import Tensor

STEM_PLAN = ((7, 1), (3, 2), (3, 2))  # (kernel, stride) per stem conv


def receptive_field(plan=STEM_PLAN):
    """(effective receptive field, total stride) of a conv chain."""
    rf, jump = 1, 1
    for k, s in plan:
        rf += (k - 1) * jump
        jump *= s
    return rf, jump


@dataclass
class HpbConfig:
    channels: int
    heads: int = 8
    n_s: int = 8
    dw_kernel: int = 3
    ffn_expansion: int = 4
    l2_normalize: bool = True
    attention_variant: str = DPSA
    enable_local: bool = True
    enable_global: bool = True

    def __post_init__(self):
        if not (self.enable_local or self.enable_global):
            raise ConfigError("hybrid block needs at least one branch enabled")


def _to_tokens(x):
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


def _to_map(tokens, h, w):
    b, n, c = tokens.shape
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (b, c, h, w))


class HybridBlock(Module):
    """Local + global token mixing with residuals and a conv feed-forward."""

    def __init__(self, cfg: HpbConfig, rng=None):
        self.cfg = cfg
        c = cfg.channels
        self.norm1 = InstanceNorm2d(c)
        self.local_dw = Conv2d(c, c, cfg.dw_kernel, padding=cfg.dw_kernel // 2,
                               groups=c, rng=rng)
        self.attn = SelfAttention2d(
            AttentionConfig(channels=c, heads=cfg.heads, n_s=cfg.n_s,
                            l2_normalize=cfg.l2_normalize,
                            variant=cfg.attention_variant), rng=rng)
        self.fuse = Linear(2 * c, c, rng=rng)
        self.norm2 = InstanceNorm2d(c)
        e = cfg.ffn_expansion * c
        self.ffn_expand = Linear(c, e, rng=rng)
        self.ffn_dw = Conv2d(e, e, 3, padding=1, groups=e, rng=rng)
        self.ffn_reduce = Linear(e, c, rng=rng)

    def forward(self, x):
        cfg = self.cfg
        b, c, h, w = x.shape
        u = self.norm1(x)
        # a disabled branch passes u through unchanged, keeping fusion width
        local = self.local_dw(u) if cfg.enable_local else u
        glob = self.attn(u) if cfg.enable_global else u
        cat = T.concat([_to_tokens(local), _to_tokens(glob)], axis=2)
        mixed = x + _to_map(self.fuse(cat), h, w)

        z = self.norm2(mixed)
        t = self.ffn_expand(_to_tokens(z))
        t = self.ffn_dw(_to_map(t, h, w))
        t = T.gelu(t)
        t = self.ffn_reduce(_to_tokens(t))
        return mixed + _to_map(t, h, w)

    __call__ = forward

    def complexity(self, input_shape):
        c, h, w = input_shape
        n = h * w
        params = macs = 0
        for mod, shape in ((self.norm1, input_shape),
                           (self.local_dw, input_shape),
                           (self.attn, input_shape),
                           (self.fuse, (n, 2 * c)),
                           (self.norm2, input_shape),
                           (self.ffn_expand, (n, c)),
                           (self.ffn_dw, (self.cfg.ffn_expansion * c, h, w)),
                           (self.ffn_reduce, (n, self.cfg.ffn_expansion * c))):
            p, m, _ = mod.complexity(shape)
            params += p
            macs += m
        return params, macs, input_shape


class Stem(Module):
    """Three convs embedding overlapping patches at total stride 4."""

    def __init__(self, channels, rng=None):
        c4, c2 = channels // 4, channels // 2
        (k1, s1), (k2, s2), (k3, s3) = STEM_PLAN
        self.conv1 = Conv2d(3, c4, k1, stride=s1, padding=k1 // 2, rng=rng)
        self.norm1 = InstanceNorm2d(c4)
        self.conv2 = Conv2d(c4, c2, k2, stride=s2, padding=k2 // 2, rng=rng)
        self.norm2 = InstanceNorm2d(c2)
        self.conv3 = Conv2d(c2, channels, k3, stride=s3, padding=k3 // 2, rng=rng)
        self.norm3 = InstanceNorm2d(channels)

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        if h % 4 or w % 4:
            raise T.ShapeError(f"spatial dims must be divisible by 4, got {h}x{w}")
        x = T.gelu(self.norm1(self.conv1(x)))
        x = T.gelu(self.norm2(self.conv2(x)))
        x = T.gelu(self.norm3(self.conv3(x)))
        return x

    __call__ = forward

    def complexity(self, input_shape):
        params = macs = 0
        shape = input_shape
        for conv, norm in ((self.conv1, self.norm1), (self.conv2, self.norm2),
                           (self.conv3, self.norm3)):
            p, m, shape = conv.complexity(shape)
            params += p
            macs += m
            p, m, shape = norm.complexity(shape)
            params += p
            macs += m
        return params, macs, shape


class Decoder(Module):
    """Mirror of the stem: two upsample+conv stages, then 7x7 conv to RGB."""

    def __init__(self, channels, rng=None):
        c4, c2 = channels // 4, channels // 2
        self.conv1 = Conv2d(channels, c2, 3, padding=1, rng=rng)
        self.norm1 = InstanceNorm2d(c2)
        self.conv2 = Conv2d(c2, c4, 3, padding=1, rng=rng)
        self.norm2 = InstanceNorm2d(c4)
        self.conv3 = Conv2d(c4, 3, 7, padding=3, rng=rng)

    def forward(self, x):
        x = T.gelu(self.norm1(self.conv1(T.upsample_nearest2x(x))))
        x = T.gelu(self.norm2(self.conv2(T.upsample_nearest2x(x))))
        return T.tanh(self.conv3(x))

    __call__ = forward

    def complexity(self, input_shape):
        c, h, w = input_shape
        params = macs = 0
        shape = (c, 2 * h, 2 * w)
        p, m, shape = self.conv1.complexity(shape)
        params, macs = params + p, macs + m
        p, m, shape = self.norm1.complexity(shape)
        params, macs = params + p, macs + m
        shape = (shape[0], 2 * shape[1], 2 * shape[2])
        p, m, shape = self.conv2.complexity(shape)
        params, macs = params + p, macs + m
        p, m, shape = self.norm2.complexity(shape)
        params, macs = params + p, macs + m
        p, m, shape = self.conv3.complexity(shape)
        return params + p, macs + m, shape


@dataclass
class GeneratorSpec:
    """Topology of the generator; parameter/MAC counts derive from it."""
    channels: int = 256
    hpb_count: int = 9
    heads: int = 8
    n_s: int = 8
    ffn_expansion: int = 4
    l2_normalize: bool = True
    attention_variant: str = DPSA
    enable_local: bool = True
    enable_global: bool = True

    def __post_init__(self):
        if self.hpb_count < 1:
            raise ConfigError("need at least one hybrid block")
        if self.channels % 4:
            raise ConfigError("channels must be divisible by 4 (stem widths)")
        if self.channels % self.heads:
            raise ConfigError("channels must be divisible by heads")

    def build(self, seed=0):
        return Generator(self, rng=np.random.default_rng(seed))

    def block_config(self):
        return HpbConfig(channels=self.channels, heads=self.heads, n_s=self.n_s,
                         ffn_expansion=self.ffn_expansion,
                         l2_normalize=self.l2_normalize,
                         attention_variant=self.attention_variant,
                         enable_local=self.enable_local,
                         enable_global=self.enable_global)

    def to_manifest(self):
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            if key not in known:
                continue
            if known[key] == "bool" or known[key] is bool:
                kwargs[key] = value.strip() in ("True", "true", "1")
            elif known[key] == "int" or known[key] is int:
                kwargs[key] = int(value)
            else:
                kwargs[key] = value.strip()
        return cls(**kwargs)

    def complexity(self, input_shape):
        return self.build(seed=0).complexity(input_shape)


class Generator(Module):
    """Full image translator; exposes encoder feature taps for training."""

    def __init__(self, spec: GeneratorSpec, rng=None):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng()
        self.stem = Stem(spec.channels, rng=rng)
        blk_cfg = spec.block_config()
        self.blocks = [HybridBlock(blk_cfg, rng=rng) for _ in range(spec.hpb_count)]
        self.decoder = Decoder(spec.channels, rng=rng)

    def tap_indices(self):
        """1-based hybrid-block indices whose outputs are tapped."""
        return [i for i in (1, 3, 5, 7, 9) if i <= self.spec.hpb_count]

    def encode(self, x):
        """Stem + body only; returns the tapped feature list (stem first)."""
        h = self.stem(x)
        feats = [h]
        taps = set(self.tap_indices())
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if i in taps:
                feats.append(h)
        return h, feats

    def forward(self, x, return_features=False):
        h, feats = self.encode(x)
        y = self.decoder(h)
        if return_features:
            return y, feats
        return y

    __call__ = forward

    def complexity(self, input_shape):
        params = macs = 0
        p, m, shape = self.stem.complexity(input_shape)
        params, macs = params + p, macs + m
        for block in self.blocks:
            p, m, shape = block.complexity(shape)
            params, macs = params + p, macs + m
        p, m, shape = self.decoder.complexity(shape)
        return params + p, macs + m, shape


# -- checkpoint files ---------------------------------------------------------

def save_generator(path, gen, extra_manifest=None):
    """Parameter file at ``path`` plus a self-describing ``path.manifest``."""
    dtype = next(iter(gen.parameters())).data.dtype
    save_tensors(path, dict(gen.named_parameters()), dtype=dtype)
    manifest = gen.spec.to_manifest() + f"precision={np.dtype(dtype).name}\n"
    if extra_manifest:
        manifest += "".join(f"{k}={v}\n" for k, v in extra_manifest.items())
    tmp = f"{path}.manifest.tmp"
    with open(tmp, "w") as fh:
        fh.write(manifest)
    os.replace(tmp, f"{path}.manifest")


def load_generator(path):
    """Rebuild a generator from a checkpoint written by save_generator."""
    manifest_path = f"{path}.manifest"
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"missing manifest {manifest_path}")
    with open(manifest_path) as fh:
        text = fh.read()
    spec = GeneratorSpec.from_manifest(text)
    precision = "float32"
    for line in text.splitlines():
        if line.startswith("precision="):
            precision = line.split("=", 1)[1].strip()
    gen = spec.build(seed=0)
    state = load_tensors(path, dtype=np.dtype(precision))
    own = {name for name, _ in gen.named_parameters()}
    gen.load_state_dict({k: v for k, v in state.items() if k in own})
    return gen
