"""Self-attention over 2-d token grids: a dense reference and a pruned variant.

The pruned variant ranks Key rows and columns by a factored contribution
score (a product of summed Query and summed Key tokens, valid because the
inner product distributes over sums), keeps the top ``n_s`` of each, and
attends only to the ``n_s**2`` tokens at their intersections. With token-wise
L2 normalization of Q and K the attention logits are bounded to (-1, 1), so
no 1/sqrt(head_dim) temperature is applied and the output projection carries
no bias. Attention-map cost per head drops from 2*N^2*head_dim to
2*N*n_s^2*head_dim multiply-accumulates.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Linear, Module
from .tensor import Tensor

log = logging.getLogger(__name__)

DENSE = "dense"
DPSA = "dpsa"


class ConfigError(ValueError):
    """Raised for invalid attention configurations."""


@dataclass
class AttentionConfig:
    channels: int
    heads: int
    n_s: int = 8
    l2_normalize: bool = True
    variant: str = DPSA

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(
                f"channels={self.channels} not divisible by heads={self.heads}")
        if self.n_s < 1:
            raise ConfigError(f"n_s must be >= 1, got {self.n_s}")
        if self.variant not in (DENSE, DPSA):
            raise ConfigError(f"unknown attention variant {self.variant!r}")

    @property
    def head_dim(self):
        return self.channels // self.heads


@dataclass
class ScoreVectors:
    """Row/column contribution scores and the selected top indices."""
    score_rows: np.ndarray
    score_cols: np.ndarray
    index_rows: np.ndarray = field(default=None)
    index_cols: np.ndarray = field(default=None)


def select_topk(scores, n_s):
    """Indices of the ``n_s`` largest scores, descending, ties by low index."""
    scores = np.asarray(scores)
    if not 1 <= n_s <= scores.shape[-1]:
        raise ConfigError(f"n_s={n_s} out of range for {scores.shape[-1]} scores")
    # stable sort on the negated scores: equal scores keep ascending index
    return np.argsort(-scores, axis=-1, kind="stable")[..., :n_s]


def _factored_scores(q_sum, k_grid):
    """score_rows[r] = q_sum . sum_j k[r, j];  score_cols likewise.

    Shapes: q_sum [..., D], k_grid [..., H, W, D]. Never forms the N x N map;
    cost is O(H*W*D) for the sums plus O((H + W) * D) for the dot products.
    """
    k_rows = k_grid.sum(axis=-2)   # [..., H, D]
    k_cols = k_grid.sum(axis=-3)   # [..., W, D]
    score_r = np.einsum("...d,...rd->...r", q_sum, k_rows)
    score_c = np.einsum("...d,...cd->...c", q_sum, k_cols)
    return score_r, score_c


def contribution_scores(q, k_grid, n_s=None, l2_normalized=True):
    """Factored contribution scores for one head.

    q: [N, D] query tokens; k_grid: [H, W, D] key tokens on their grid.
    Both are expected token-wise L2-normalized; passing unnormalized tokens
    is allowed (the no-normalization ablation) but logged, since the scores
    are only a meaningful ranking when every token has unit norm.
    """
    q = q.data if isinstance(q, Tensor) else np.asarray(q)
    k_grid = k_grid.data if isinstance(k_grid, Tensor) else np.asarray(k_grid)
    if not l2_normalized:
        log.warning("contribution scores computed without token-wise L2 "
                    "normalization; ranking is unbounded and unreliable")
    score_r, score_c = _factored_scores(q.sum(axis=0), k_grid)
    sv = ScoreVectors(score_rows=score_r, score_cols=score_c)
    if n_s is not None:
        sv.index_rows = select_topk(score_r, n_s)
        sv.index_cols = select_topk(score_c, n_s)
    return sv


def attention_map_macs_per_head(variant, n_tokens, head_dim, n_s=None):
    """Exact MACs of the two attention-map products for a single head."""
    if variant == DENSE:
        return 2 * n_tokens * n_tokens * head_dim
    if variant == DPSA:
        if n_s is None:
            raise ConfigError("n_s required for the pruned variant")
        return 2 * n_tokens * n_s * n_s * head_dim
    raise ConfigError(f"unknown attention variant {variant!r}")


class SelfAttention2d(Module):
    """Multi-head self-attention layer on NCHW feature maps.

    variant "dense": Softmax(Q K^T / sqrt(head_dim)) V per head, concat,
    output projection with bias (the unpruned reference).
    variant "dpsa": row/column pruned attention as described in the module
    docstring; no temperature, output projection without bias.
    """

    def __init__(self, cfg: AttentionConfig, rng=None):
        self.cfg = cfg
        c = cfg.channels
        self.wq = Linear(c, c, bias=False, rng=rng)
        self.wk = Linear(c, c, bias=False, rng=rng)
        self.wv = Linear(c, c, bias=False, rng=rng)
        self.out = Linear(c, c, bias=(cfg.variant == DENSE), rng=rng)

    # -- projections --------------------------------------------------------

    def qkv_project(self, tokens):
        """tokens [B, N, C] -> per-head (Q, K, V), each [B, heads, N, head_dim].

        Q and K rows are token-wise L2-normalized when the config asks for
        it; V is never normalized.
        """
        cfg = self.cfg
        b, n, c = tokens.shape
        if c != cfg.channels:
            raise T.ShapeError(f"expected {cfg.channels} channels, got {c}")

        def split(t):
            return T.transpose(T.reshape(t, (b, n, cfg.heads, cfg.head_dim)),
                               (0, 2, 1, 3))

        q = split(self.wq(tokens))
        k = split(self.wk(tokens))
        v = split(self.wv(tokens))
        if cfg.l2_normalize:
            q = T.l2_normalize_tokens(q)
            k = T.l2_normalize_tokens(k)
        return q, k, v

    # -- selection -----------------------------------------------------------

    def select_indices(self, q, k_grid):
        """Top row/column indices per (batch, head) from the factored scores.

        q: [B, h, N, D] (Tensor or array), k_grid: [B, h, H, W, D].
        Deterministic: ties broken by ascending index.
        """
        qd = q.data if isinstance(q, Tensor) else q
        kd = k_grid.data if isinstance(k_grid, Tensor) else k_grid
        if not self.cfg.l2_normalize:
            log.warning("contribution scores computed without token-wise L2 "
                        "normalization; ranking is unbounded and unreliable")
        score_r, score_c = _factored_scores(qd.sum(axis=2), kd)
        rows = select_topk(score_r, self.cfg.n_s)
        cols = select_topk(score_c, self.cfg.n_s)
        return rows, cols

    # -- forward -------------------------------------------------------------

    def forward(self, x, fixed_indices=None):
        """x: Tensor[B, C, H, W] -> Tensor[B, C, H, W].

        ``fixed_indices`` (rows, cols arrays of shape [B, heads, n_s])
        bypasses score-based selection; used to hold the (non-differentiable)
        selection constant in gradient checks.
        """
        cfg = self.cfg
        b, c, h, w = x.shape
        n = h * w
        tokens = T.transpose(T.reshape(x, (b, c, n)), (0, 2, 1))
        q, k, v = self.qkv_project(tokens)

        if cfg.variant == DENSE:
            scale = x.dtype.type(1.0 / np.sqrt(cfg.head_dim))
            logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
            attn = T.softmax(logits, axis=-1)
            heads_out = T.matmul(attn, v)
        else:
            if cfg.n_s > min(h, w):
                raise ConfigError(
                    f"n_s={cfg.n_s} exceeds grid min(H, W)={min(h, w)}")
            k_grid = T.reshape(k, (b, cfg.heads, h, w, cfg.head_dim))
            v_grid = T.reshape(v, (b, cfg.heads, h, w, cfg.head_dim))
            if fixed_indices is None:
                rows, cols = self.select_indices(q, k_grid)
            else:
                rows, cols = fixed_indices
            ks = T.reshape(T.gather_grid(k_grid, rows, cols),
                           (b, cfg.heads, cfg.n_s * cfg.n_s, cfg.head_dim))
            vs = T.reshape(T.gather_grid(v_grid, rows, cols),
                           (b, cfg.heads, cfg.n_s * cfg.n_s, cfg.head_dim))
            logits = T.matmul(q, T.transpose(ks, (0, 1, 3, 2)))
            attn = T.softmax(logits, axis=-1)
            heads_out = T.matmul(attn, vs)

        merged = T.reshape(T.transpose(heads_out, (0, 2, 1, 3)), (b, n, c))
        out_tokens = self.out(merged)
        return T.reshape(T.transpose(out_tokens, (0, 2, 1)), (b, c, h, w))

    __call__ = forward

    def forward_tokens(self, tokens_2d, grid_hw=None):
        """Single-sample convenience: [N, C] tokens on an H x W grid."""
        n, c = tokens_2d.shape
        if grid_hw is None:
            side = int(round(np.sqrt(n)))
            if side * side != n:
                raise T.ShapeError(f"{n} tokens is not a square grid; pass grid_hw")
            grid_hw = (side, side)
        h, w = grid_hw
        x = T.reshape(T.transpose(tokens_2d), (1, c, h, w))
        y = self.forward(x)
        return T.transpose(T.reshape(y, (c, n)))

    # -- accounting ------------------------------------------------------

    def complexity(self, input_shape):
        c, h, w = input_shape
        cfg = self.cfg
        if c != cfg.channels:
            raise T.ShapeError(f"expected {cfg.channels} channels, got {input_shape}")
        n = h * w
        params = sum(p.size for p in self.parameters())
        macs = 4 * n * c * c  # three input projections + output projection
        macs += cfg.heads * attention_map_macs_per_head(
            cfg.variant, n, cfg.head_dim, cfg.n_s)
        if cfg.variant == DPSA:
            macs += cfg.heads * (h + w) * cfg.head_dim  # factored score dots
        return params, macs, input_shape
