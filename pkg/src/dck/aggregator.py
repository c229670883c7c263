"""Aggregation of token-level matching features into the final feature vector."""
from __future__ import annotations

import torch
from torch import Tensor

from .encoder import BiLSTM, last_real
from .numerics import EmptySupport, masked_max, masked_softmax


def pool_states(states: Tensor, mask: Tensor) -> Tensor:
    """``[max over real positions ; state at the last real position]``."""
    m = mask.bool()
    return torch.cat([masked_max(states, m[..., None], dim=-2), last_real(states, m)], dim=-1)


def sentence_aggregate(features: Tensor, mask: Tensor, params: BiLSTM) -> Tensor:
    """``features [..., l, F]`` -> ``[..., 4h]``; an all-PAD sentence yields zeros."""
    return pool_states(params(features, mask), mask)


def session_aggregate(utterance_features: Tensor, unit_mask: Tensor, params: BiLSTM,
                      strict: bool = False) -> Tensor:
    if strict and not bool(unit_mask.bool().any(dim=-1).all()):
        raise EmptySupport("session aggregation needs at least one real utterance")
    return pool_states(params(utterance_features, unit_mask), unit_mask)


def knowledge_post_select(knowledge_features: Tensor, knowledge_mask: Tensor, response_features: Tensor,
                          uniform: bool = False, strict: bool = False) -> tuple[Tensor, Tensor]:
    """Attend over per-sentence knowledge features with the knowledge-aware response feature.

    ``knowledge_features [..., n_k, F]``, ``response_features [..., F]``.
    With ``uniform`` the weights are a plain mean over real sentences.
    Returns ``(M_k [..., F], gamma [..., n_k])``.
    """
    km = knowledge_mask.bool()
    if strict and not bool(km.any(dim=-1).all()):
        raise EmptySupport("no real knowledge entry")
    logits = (knowledge_features * response_features[..., None, :]).sum(dim=-1)
    if uniform:
        logits = torch.zeros_like(logits)
    gamma = masked_softmax(logits, km, dim=-1)
    return (gamma[..., None] * knowledge_features).sum(dim=-2), gamma


def assemble_final(m_c: Tensor, m_k: Tensor, m_r: Tensor, m_rc: Tensor,
                   drop_context: bool = False, drop_knowledge: bool = False) -> Tensor:
    """``[M_c; M_k; M_r; M_r^c]`` with ablated parts zero-filled at full width."""
    if drop_context:
        m_c, m_r = torch.zeros_like(m_c), torch.zeros_like(m_r)
    if drop_knowledge:
        m_k, m_rc = torch.zeros_like(m_k), torch.zeros_like(m_rc)
    return torch.cat([m_c, m_k, m_r, m_rc], dim=-1)
