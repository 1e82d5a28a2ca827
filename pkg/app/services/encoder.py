"""
View-set encoder.

Each block injects pairwise view correlations: an M x M row-stochastic matrix with
one entry per ordered view pair, applied to the (projected) view rows. Without
position embeddings or a class token, every block is permutation-equivariant.
"""
import logging
from typing import List, Optional

import numpy as np

from app.models.schemas import EncoderConfig
from app.services.numerics import (
    Module,
    Parameter,
    Tensor,
    columns,
    concat,
    dropout,
    glorot_uniform,
    layer_norm,
    matmul,
    pairwise_dot,
    relu,
    rows,
    set_matmul,
    softmax_rows,
)
from app.utils.error_handler import DimensionError, InputError

logger = logging.getLogger(__name__)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.g = Parameter(np.ones(dim))
        self.b = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b, self.eps)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = Parameter(glorot_uniform(rng, dim, hidden))
        self.b1 = Parameter(np.zeros(hidden))
        self.w2 = Parameter(glorot_uniform(rng, hidden, dim))
        self.b2 = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(relu(matmul(x, self.w1) + self.b1), self.w2) + self.b2


class AttentionBlockParams(Module):
    """W_Q, W_K, W_V, W_O (D x D), two layer norms and the MLP of one block"""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.view_dim
        self.wq = Parameter(glorot_uniform(rng, d, d))
        self.wk = Parameter(glorot_uniform(rng, d, d))
        self.wv = Parameter(glorot_uniform(rng, d, d))
        self.wo = Parameter(glorot_uniform(rng, d, d))
        self.ln1 = LayerNorm(d, cfg.layer_norm_eps)
        self.mlp = MLP(d, cfg.mlp_ratio * d, rng)
        self.ln2 = LayerNorm(d, cfg.layer_norm_eps)


# ===== CORRELATION INJECTION =====

def correlation_matrix(z: Tensor, w_q: Tensor, w_k: Tensor, tau: float) -> Tensor:
    """A = softmax_rows(Z W_Q (Z W_K)^T / tau), one entry per ordered view pair"""
    if not tau > 0:
        raise InputError(f"temperature must be positive, got {tau}")
    q = matmul(z, w_q)
    k = matmul(z, w_k)
    return softmax_rows(pairwise_dot(q, k) / tau)


def apply_correlations(a: Tensor, z: Tensor, w_v: Tensor) -> Tensor:
    """A Z W_V"""
    if a.shape != (z.shape[0], z.shape[0]):
        raise DimensionError(f"correlation matrix {a.shape} does not match {z.shape[0]} views")
    return set_matmul(a, matmul(z, w_v))


def msa_forward(
    z: Tensor,
    params: AttentionBlockParams,
    cfg: EncoderConfig,
    attention_sink: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """Multi-head self-attention: per-head correlations on D/h-wide slices, concat, W_O"""
    if z.shape[1] != cfg.view_dim:
        raise DimensionError(f"view rows have width {z.shape[1]}, encoder expects {cfg.view_dim}")
    width = cfg.head_dim
    heads = []
    for head in range(cfg.num_heads):
        start, stop = head * width, (head + 1) * width
        a = correlation_matrix(z, columns(params.wq, start, stop), columns(params.wk, start, stop), cfg.tau)
        if attention_sink is not None:
            attention_sink.append(a.data)
        heads.append(apply_correlations(a, z, columns(params.wv, start, stop)))
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return matmul(merged, params.wo)


def attention_block_forward(
    z: Tensor,
    params: AttentionBlockParams,
    cfg: EncoderConfig,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    attention_sink: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """Pre-LN block: Z' = DP(MSA(LN(Z))) + Z, out = DP(MLP(LN(Z'))) + Z'"""
    attended = msa_forward(params.ln1.forward(z), params, cfg, attention_sink)
    z_hat = dropout(attended, cfg.dropout_rate, rng, training) + z
    transformed = params.mlp.forward(params.ln2.forward(z_hat))
    return dropout(transformed, cfg.dropout_rate, rng, training) + z_hat


class ViewSetEncoder(Module):
    """L attention blocks plus the optional position-embedding and class-token variants"""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.blocks = [AttentionBlockParams(cfg, rng) for _ in range(cfg.num_blocks)]
        if cfg.use_position_encoding:
            self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_views, cfg.view_dim)))
        if cfg.use_class_token:
            self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(1, cfg.view_dim)))

    def _children(self):
        yield from super()._children()
        for index, block in enumerate(self.blocks):
            yield f"block{index}", block

    def forward(
        self,
        z0: Tensor,
        training: Optional[bool] = None,
        rng: Optional[np.random.Generator] = None,
        attention_sink: Optional[List[np.ndarray]] = None,
    ) -> Tensor:
        training = self.training if training is None else training
        return encoder_forward(z0, self, self.cfg, training, rng, attention_sink)


def encoder_forward(
    z0: Tensor,
    encoder: ViewSetEncoder,
    cfg: EncoderConfig,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    attention_sink: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """Z(L) from Z(0) through every block; a class-token row is stripped before returning"""
    m = z0.shape[0]
    z = z0
    if cfg.use_position_encoding:
        if m > cfg.max_views:
            raise InputError(f"{m} views exceed the position table size {cfg.max_views}")
        z = z + rows(encoder.pos_embed, 0, m)
    if cfg.use_class_token:
        z = concat([encoder.cls_token, z], axis=0)
    for params in encoder.blocks:
        z = attention_block_forward(z, params, cfg, training, rng, attention_sink)
    if cfg.use_class_token:
        z = rows(z, 1, m + 1)
    return z
