"""Pre-selection of context utterances and knowledge sentences.

A multi-head attention block self-attends every unit; queries built from
the last 1..m context utterances score each unit; per-hop distributions
are mixed by a learned vector and used to rescale the encoder outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .numerics import EmptySupport, LAYER_NORM_EPS, layer_norm, masked_max, masked_mean, masked_softmax


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, mask: Tensor | None = None,
                         strict: bool = False) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k)) V`` with masked key positions getting zero weight.

    Shapes: ``Q [..., q, d]``, ``K [..., k, d]``, ``V [..., k, d_v]``,
    ``mask [..., k]``.
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError("keys and values must have the same length")
    logits = Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    if mask is None:
        mask = torch.ones(K.shape[:-1], dtype=torch.bool, device=K.device)
    weights = masked_softmax(logits, mask.bool()[..., None, :].expand_as(logits), dim=-1, strict=strict)
    return weights @ V


class AttentionBlock(nn.Module):
    """Multi-head attention + residual/layer norm + ReLU FFN + residual/layer norm.

    Head width is ``width // heads``; when that does not divide evenly the
    output projection maps the concatenated heads back to ``width``.
    """

    def __init__(self, width: int, heads: int = 3, init_scale: float = 0.08,
                 generator: torch.Generator | None = None, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.width, self.heads = width, heads
        self.head_dim = max(1, width // heads)
        inner = 2 * width

        def uniform(*shape):
            return nn.Parameter((torch.rand(*shape, generator=generator, dtype=dtype) * 2 - 1) * init_scale)

        self.W_q = uniform(heads, width, self.head_dim)
        self.W_k = uniform(heads, width, self.head_dim)
        self.W_v = uniform(heads, width, self.head_dim)
        self.W_o = uniform(heads * self.head_dim, width)
        self.W_1 = uniform(width, inner)
        self.b_1 = nn.Parameter(torch.zeros(inner, dtype=dtype))
        self.W_2 = uniform(inner, width)
        self.b_2 = nn.Parameter(torch.zeros(width, dtype=dtype))
        self.ln1_gain = nn.Parameter(torch.ones(width, dtype=dtype))
        self.ln1_bias = nn.Parameter(torch.zeros(width, dtype=dtype))
        self.ln2_gain = nn.Parameter(torch.ones(width, dtype=dtype))
        self.ln2_bias = nn.Parameter(torch.zeros(width, dtype=dtype))

    def forward(self, Q: Tensor, K: Tensor, V: Tensor, mask: Tensor | None = None, strict: bool = False) -> Tensor:
        return attention_block(Q, K, V, mask, self, strict=strict)


def attention_block(Q: Tensor, K: Tensor, V: Tensor, mask: Tensor | None, params: AttentionBlock,
                    strict: bool = False) -> Tensor:
    q = torch.einsum("...qw,hwd->...hqd", Q, params.W_q)
    k = torch.einsum("...kw,hwd->...hkd", K, params.W_k)
    v = torch.einsum("...kw,hwd->...hkd", V, params.W_v)
    head_mask = None if mask is None else mask.bool()[..., None, :]
    if head_mask is not None:
        head_mask = head_mask.expand(*k.shape[:-1])
    o = scaled_dot_attention(q, k, v, head_mask, strict=strict)       # [..., h, q, d]
    o = o.transpose(-3, -2).reshape(*Q.shape[:-1], params.heads * params.head_dim)
    x = layer_norm(Q + o @ params.W_o, params.ln1_gain, params.ln1_bias, LAYER_NORM_EPS)
    ffn = torch.relu(x @ params.W_1 + params.b_1) @ params.W_2 + params.b_2
    return layer_norm(x + ffn, params.ln2_gain, params.ln2_bias, LAYER_NORM_EPS)


def self_attend(U: Tensor, mask: Tensor, params: AttentionBlock) -> Tensor:
    """Self-attention transform of each unit; padded rows come out as zeros."""
    out = attention_block(U, U, U, mask, params)
    return out * mask.to(out.dtype)[..., None]


def hop_query(units: Tensor, token_mask: Tensor, unit_mask: Tensor, hops: int) -> tuple[Tensor, Tensor]:
    """Position-wise masked mean over the last ``hops`` real utterances.

    ``units [B, n, l, W]``, ``token_mask [B, n, l]``, ``unit_mask [B, n]``.
    Returns the query ``[B, l, W]`` and its mask ``[B, l]`` (a position is
    real when any contributing utterance has a real token there). Samples
    with fewer real utterances than ``hops`` use all of them.
    """
    um = unit_mask.bool()
    # 1 for the latest real utterance, 2 for the one before, ...
    from_end = torch.flip(torch.cumsum(torch.flip(um.long(), [-1]), -1), [-1])
    chosen = um & (from_end <= hops)
    weights = chosen[..., None] & token_mask.bool()                       # [B, n, l]
    w = weights.to(units.dtype)
    total = (units * w[..., None]).sum(dim=1)
    count = w.sum(dim=1)
    query = total / count.clamp_min(1.0)[..., None]
    return query, weights.any(dim=1)


@dataclass
class UnitScores:
    scores: Tensor        # [B, n] distribution over real units
    max_pool: Tensor      # s_1 [B, n]
    mean_pool: Tensor     # s_2 [B, n]


def unit_scores(query: Tensor, query_mask: Tensor, units: Tensor, token_mask: Tensor, unit_mask: Tensor,
                alpha: Tensor | float, strict: bool = False) -> UnitScores:
    """Relevance distribution of each unit given a token-sequence query.

    ``phi_i = Q U_i^T / sqrt(W)``; max over query tokens; per unit, masked
    max (``s_1``) and masked mean (``s_2``) over unit tokens; fuse as
    ``alpha * s_1 + (1 - alpha) * s_2`` and softmax over real units.
    """
    width = query.shape[-1]
    phi = torch.einsum("bqw,bnpw->bnqp", query, units) / math.sqrt(width)
    qm = query_mask.bool()[:, None, :, None]
    best = masked_max(phi, qm, dim=2)                                     # [B, n, p]
    tm = token_mask.bool()
    s1 = masked_max(best, tm, dim=-1)
    s2 = masked_mean(best, tm, dim=-1)
    fused = alpha * s1 + (1 - alpha) * s2
    if strict and not bool(unit_mask.bool().any(dim=-1).all()):
        raise EmptySupport("no real unit to score")
    return UnitScores(masked_softmax(fused, unit_mask, dim=-1), s1, s2)


def fuse_hops(per_hop: Tensor, pi: Tensor, renormalize: bool = False, unit_mask: Tensor | None = None) -> Tensor:
    """``per_hop [..., n, m] @ pi [m]`` -> ``[..., n]``."""
    if per_hop.shape[-1] != pi.shape[-1]:
        raise ValueError(f"{per_hop.shape[-1]} hop distributions but pi has length {pi.shape[-1]}")
    fused = per_hop @ pi
    if renormalize:
        fused = masked_softmax(fused, unit_mask if unit_mask is not None else torch.ones_like(fused, dtype=torch.bool))
    return fused


class SelectorParams(nn.Module):
    def __init__(self, hops: int = 3, alpha: float = 0.5, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.hops = hops
        self.alpha = nn.Parameter(torch.tensor(alpha, dtype=dtype))
        self.pi = nn.Parameter(torch.full((hops,), 1.0 / hops, dtype=dtype))


@dataclass
class SelectionResult:
    reweighted: Tensor    # [B, n, l, W]
    weights: Tensor       # s-bar [B, n]
    per_hop: Tensor       # [B, n, m]


def reweight(units: Tensor, weights: Tensor) -> Tensor:
    return units + weights[..., None, None] * units


def select_units(units: Tensor, transformed: Tensor, token_mask: Tensor, unit_mask: Tensor,
                 queries: list[tuple[Tensor, Tensor]], params: SelectorParams,
                 renormalize: bool = False) -> SelectionResult:
    """Score ``transformed`` units against every hop query and rescale ``units``.

    ``units`` are the encoder outputs, ``transformed`` their self-attended
    versions; the rescaling uses the former.
    """
    per_hop = torch.stack(
        [unit_scores(q, qm, transformed, token_mask, unit_mask, params.alpha).scores for q, qm in queries],
        dim=-1)
    weights = fuse_hops(per_hop, params.pi, renormalize, unit_mask)
    weights = weights * unit_mask.to(weights.dtype)
    return SelectionResult(reweight(units, weights), weights, per_hop)


def build_queries(transformed_context: Tensor, token_mask: Tensor, unit_mask: Tensor,
                  hops: int) -> list[tuple[Tensor, Tensor]]:
    return [hop_query(transformed_context, token_mask, unit_mask, j) for j in range(1, hops + 1)]
