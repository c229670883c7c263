"""Cross-attention matching between a long unit sequence and a candidate."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .numerics import EmptySupport, masked_softmax


@dataclass
class LongSequence:
    states: Tensor     # [..., L, W]
    mask: Tensor       # [..., L]
    segments: Tensor   # [L] unit index of every position


def flatten_units(units: Tensor, mask: Tensor) -> LongSequence:
    """``[..., n, l, W]`` -> ``[..., n * l, W]`` keeping token order."""
    *lead, n, l, width = units.shape
    segments = torch.arange(n, device=units.device).repeat_interleave(l)
    return LongSequence(units.reshape(*lead, n * l, width), mask.reshape(*lead, n * l), segments)


@dataclass
class Alignment:
    aligned_x: Tensor   # X-hat: each x_i's view of R
    aligned_r: Tensor   # R-hat: each r_j's view of X
    similarity: Tensor  # E [.., L, l_r]
    alpha: Tensor       # softmax over j
    beta: Tensor        # softmax over i


def cross_attend(X: Tensor, R: Tensor, x_mask: Tensor, r_mask: Tensor, strict: bool = False) -> Alignment:
    """Soft alignment between ``X [..., L, W]`` and ``R [..., l_r, W]``.

    ``E = X R^T``, ``alpha`` normalizes each row over R's real tokens,
    ``beta`` each column over X's real tokens; ``X_hat = alpha R`` and
    ``R_hat = beta^T X``.
    """
    xm, rm = x_mask.bool(), r_mask.bool()
    if strict and not (bool(xm.any(dim=-1).all()) and bool(rm.any(dim=-1).all())):
        raise EmptySupport("cross attention needs at least one real token on each side")
    E = X @ R.transpose(-1, -2)
    alpha = masked_softmax(E, rm[..., None, :].expand_as(E), dim=-1)
    beta = masked_softmax(E, xm[..., :, None].expand_as(E), dim=-2)
    return Alignment(alpha @ R, beta.transpose(-1, -2) @ X, E, alpha, beta)


def enrich(X: Tensor, X_hat: Tensor) -> Tensor:
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch {tuple(X.shape)} vs {tuple(X_hat.shape)}")
    return torch.cat([X, X_hat, X - X_hat, X * X_hat], dim=-1)


def match_pair(units: Tensor, unit_token_mask: Tensor, candidate: Tensor, candidate_mask: Tensor) -> tuple[Tensor, Tensor, LongSequence]:
    """Enriched features for one side (context or knowledge) against candidates.

    ``units [B, n_units, l, W]`` are broadcast against ``candidate
    [B, n_cand, l_r, W]``. Returns ``(side [B, n_cand, L, 4W],
    response [B, n_cand, l_r, 4W], flattened side)``.
    """
    long_seq = flatten_units(units, unit_token_mask)
    X = long_seq.states[:, None]
    xm = long_seq.mask[:, None].expand(-1, candidate.shape[1], -1)
    X = X.expand(-1, candidate.shape[1], -1, -1)
    align = cross_attend(X, candidate, xm, candidate_mask)
    return enrich(X, align.aligned_x), enrich(candidate, align.aligned_r), long_seq
