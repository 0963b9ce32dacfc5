"""Training objectives: least-squares adversarial losses and the patch-level
contrastive loss with per-tap projection heads, plus the patch discriminator.

The contrastive term compares encoder features of the translated image
against encoder features of its source at the same spatial positions;
negatives are the other sampled positions of the same image.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, InstanceNorm2d, Linear, Module
from .tensor import Tensor

log = logging.getLogger(__name__)


class PatchGanDiscriminator(Module):
    """Fully-convolutional discriminator emitting a spatial logit map.

    4x4 kernels, three stride-2 stages then stride-1, channels
    64-128-256-512-1, instance norm after all but the first conv,
    leaky-ReLU slope 0.2, no sigmoid (least-squares objective).
    """

    def __init__(self, in_channels=3, base=64, rng=None):
        self.conv1 = Conv2d(in_channels, base, 4, stride=2, padding=1, rng=rng)
        self.conv2 = Conv2d(base, base * 2, 4, stride=2, padding=1, rng=rng)
        self.norm2 = InstanceNorm2d(base * 2)
        self.conv3 = Conv2d(base * 2, base * 4, 4, stride=2, padding=1, rng=rng)
        self.norm3 = InstanceNorm2d(base * 4)
        self.conv4 = Conv2d(base * 4, base * 8, 4, stride=1, padding=1, rng=rng)
        self.norm4 = InstanceNorm2d(base * 8)
        self.conv5 = Conv2d(base * 8, 1, 4, stride=1, padding=1, rng=rng)

    def forward(self, x):
        x = T.leaky_relu(self.conv1(x), 0.2)
        x = T.leaky_relu(self.norm2(self.conv2(x)), 0.2)
        x = T.leaky_relu(self.norm3(self.conv3(x)), 0.2)
        x = T.leaky_relu(self.norm4(self.conv4(x)), 0.2)
        return self.conv5(x)

    __call__ = forward


class ProjectionHead(Module):
    """Two-layer MLP embedding one tapped feature; output is unit-norm."""

    def __init__(self, in_dim, embed_dim=256, rng=None):
        self.fc1 = Linear(in_dim, embed_dim, rng=rng)
        self.fc2 = Linear(embed_dim, embed_dim, rng=rng)

    def forward(self, x):
        return T.l2_normalize_tokens(self.fc2(T.relu(self.fc1(x))))

    __call__ = forward


class ProjectionHeadBank(Module):
    """One projection head per tapped layer, created lazily on first use
    (their input widths depend on the tap shapes)."""

    def __init__(self, embed_dim=256, seed=0):
        self.embed_dim = embed_dim
        self.heads = []
        self._rng = np.random.default_rng(seed)

    def ensure(self, count, in_dims):
        while len(self.heads) < count:
            idx = len(self.heads)
            self.heads.append(ProjectionHead(in_dims[idx], self.embed_dim,
                                             rng=self._rng))

    def embed(self, index, tokens):
        return self.heads[index](tokens)


# -- adversarial losses ---------------------------------------------------

def lsgan_generator_loss(d_fake):
    """mean((1 - D(G(x)))^2) over all spatial logits and batch."""
    one = d_fake.dtype.type(1.0)
    return T.tmean(T.square(one - d_fake))


def lsgan_discriminator_loss(d_real, d_fake):
    """mean((1 - D(y))^2) + mean(D(G(x))^2)."""
    one = d_real.dtype.type(1.0)
    return T.tmean(T.square(one - d_real)) + T.tmean(T.square(d_fake))


# -- contrastive loss ------------------------------------------------------

def info_nce(emb_out, emb_src, tau):
    """Cross-entropy over in-image similarities.

    emb_out, emb_src: Tensor[B, S, d], rows unit-norm. For each position s
    the positive is emb_src[s]; the other S-1 source positions act as
    negatives. Returns the mean over batch and positions.
    """
    b, s, _ = emb_out.shape
    inv_tau = emb_out.dtype.type(1.0 / tau)
    logits = T.matmul(emb_out, T.transpose(emb_src, (0, 2, 1))) * inv_tau
    logp = T.log_softmax(logits, axis=-1)
    eye = Tensor(np.eye(s, dtype=logits.dtype))
    return -T.tsum(logp * eye) / (b * s)


def sample_positions(rng, available, num_patches):
    if num_patches > available:
        log.warning("requested %d patches but only %d positions; clamping",
                    num_patches, available)
        num_patches = available
    return np.sort(rng.choice(available, size=num_patches, replace=False))


def patchnce_loss(feats_src, feats_out, bank, tau=0.07, num_patches=256, rng=None):
    """Patch-level contrastive loss over the tapped feature pairs.

    feats_src: encoder features of the source image; feats_out: encoder
    features of the translated image (same tap set). For each tap a shared
    set of spatial positions is sampled, embedded through that tap's head,
    and scored with ``info_nce``. Returns the mean over taps.
    """
    if len(feats_src) != len(feats_out):
        raise T.ShapeError(
            f"tap sets differ: {len(feats_src)} vs {len(feats_out)}")
    rng = rng if rng is not None else np.random.default_rng()
    bank.ensure(len(feats_src), [f.shape[1] for f in feats_src])

    total = None
    for i, (fs, fo) in enumerate(zip(feats_src, feats_out)):
        b, c, h, w = fs.shape
        pos = sample_positions(rng, h * w, num_patches)
        ts = T.index_select(_tokens(fs), pos, axis=1)
        to = T.index_select(_tokens(fo), pos, axis=1)
        emb_src = bank.embed(i, ts)
        emb_out = bank.embed(i, to)
        term = info_nce(emb_out, emb_src, tau)
        total = term if total is None else total + term
    return total / len(feats_src)


def _tokens(x):
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


# -- bundle ---------------------------------------------------------------

@dataclass
class LossBundle:
    """Generator-side objective terms plus the discriminator loss."""
    loss_g: Tensor
    loss_nce_x: Tensor
    loss_nce_y: Tensor
    loss_total: Tensor
    loss_d: Tensor = None
    lambda_x: float = 1.0
    lambda_y: float = 1.0

    def check_finite(self):
        vals = self.scalars()
        if not all(np.isfinite(v) for v in vals.values()):
            raise T.NumericError(f"non-finite loss components: {vals}")

    def scalars(self):
        out = {}
        for key in ("loss_g", "loss_nce_x", "loss_nce_y", "loss_total", "loss_d"):
            val = getattr(self, key)
            out[key] = float(val.item()) if isinstance(val, Tensor) else val
        return out


def total_generator_objective(d_fake, feats_x_src, feats_x_out,
                              feats_y_src, feats_y_out, bank,
                              tau=0.07, num_patches=256, rng=None,
                              lambda_x=1.0, lambda_y=1.0):
    """Assemble loss_total = loss_g + lambda_x * NCE_x + lambda_y * NCE_y."""
    loss_g = lsgan_generator_loss(d_fake)
    zero = Tensor(np.zeros((), dtype=loss_g.dtype))
    if lambda_x != 0.0:
        nce_x = patchnce_loss(feats_x_src, feats_x_out, bank,
                              tau=tau, num_patches=num_patches, rng=rng)
    else:
        nce_x = zero
    if lambda_y != 0.0:
        nce_y = patchnce_loss(feats_y_src, feats_y_out, bank,
                              tau=tau, num_patches=num_patches, rng=rng)
    else:
        nce_y = zero
    total = loss_g + nce_x * loss_g.dtype.type(lambda_x) \
        + nce_y * loss_g.dtype.type(lambda_y)
    return LossBundle(loss_g=loss_g, loss_nce_x=nce_x, loss_nce_y=nce_y,
                      loss_total=total, lambda_x=lambda_x, lambda_y=lambda_y)
