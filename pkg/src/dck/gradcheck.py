"""Finite-difference verification of every trainable op and of the full loss.

Each check builds small random inputs sized from a (64-bit) config, projects
the op's output onto a fixed random direction to get a scalar, and compares
autograd against central differences for every parameter and input entry.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from .aggregator import knowledge_post_select, sentence_aggregate, session_aggregate
from .config import ModelConfig, tiny_config
from .corpus import Vocabulary, build_vocabulary
from .embed import ALPHABET_SIZE, CharConv
from .encoder import BiLSTM, LSTMParams, bilstm_encode, lstm_cell
from .matcher import match_pair
from .model import MatchingNetwork, PredictionHead, batch_loss, score
from .numerics import GradCheckReport, gradient_check_report, jitter_parameters, layer_norm
from .selector import AttentionBlock, SelectorParams, build_queries, select_units, self_attend

DEFAULT_EPS = 1e-4
# smaller steps for entries where the first one straddles a max-pool/ReLU switch
RETRY_EPS = (1e-5, 1e-6)
TOLERANCE = 1e-3


@dataclass
class SuiteResult:
    reports: dict[str, GradCheckReport]
    seconds: float

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.reports.values())

    def passed(self, tolerance: float = TOLERANCE) -> bool:
        return self.max_rel_error < tolerance

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "passed": self.passed(),
            "seconds": self.seconds,
            "checks": {name: {"max_rel_error": r.max_rel_error, "entries": r.n_entries, "retried": r.n_retried}
                       for name, r in self.reports.items()},
        }


class _Inputs:
    """Seeded float64 leaf tensors."""

    def __init__(self, seed: int, eps: float = DEFAULT_EPS, retry_eps=RETRY_EPS):
        self.gen = torch.Generator().manual_seed(seed)
        self.eps, self.retry_eps = eps, tuple(retry_eps)

    def check(self, fn: Callable[[], Tensor], params) -> GradCheckReport:
        return gradient_check_report(fn, params, self.eps, self.retry_eps, TOLERANCE)

    def leaf(self, *shape) -> Tensor:
        return (torch.rand(*shape, generator=self.gen, dtype=torch.float64) * 2 - 1).requires_grad_()

    def direction(self, like: Tensor) -> Tensor:
        return torch.randn(like.shape, generator=self.gen, dtype=torch.float64)

    def mask(self, *shape, keep_first: bool = True) -> Tensor:
        m = torch.rand(*shape, generator=self.gen) < 0.75
        if keep_first:
            m[..., 0] = True
        return m


def _projected(fn: Callable[[], Tensor], inputs: _Inputs) -> Callable[[], Tensor]:
    direction = inputs.direction(fn().detach())
    return lambda: (fn() * direction).sum()


def _module_params(module: nn.Module, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{n}": p for n, p in module.named_parameters() if p.requires_grad}


def check_layer_norm(cfg: ModelConfig, inputs: _Inputs) -> GradCheckReport:
    width = 2 * cfg.hidden
    x, gain, bias = inputs.leaf(3, width), inputs.leaf(width), inputs.leaf(width)
    fn = _projected(lambda: layer_norm(x, gain, bias, cfg.layer_norm_eps), inputs)
    return inputs.check(fn, {"x": x, "gain": gain, "bias": bias})


def check_lstm_cell(cfg: ModelConfig, inputs: _Inputs) -> GradCheckReport:
    d_in, h = cfg.embed_dim, cfg.hidden
    params = LSTMParams(d_in, h, generator=inputs.gen)
    jitter_parameters(params, 0.3, 1)
    x, h0, c0 = inputs.leaf(2, d_in), inputs.leaf(2, h), inputs.leaf(2, h)

    def run():
        h1, c1 = lstm_cell(x, h0, c0, params)
        return torch.cat([h1, c1], dim=-1)

    fn = _projected(run, inputs)
    return inputs.check(fn, {"x": x, "h": h0, "c": c0, **_module_params(params, "cell")})


def check_bilstm(cfg: ModelConfig, inputs: _Inputs) -> GradCheckReport:
    lstm = BiLSTM(cfg.embed_dim, cfg.hidden, generator=inputs.gen)
    jitter_parameters(lstm, 0.3, 2)
    seq = inputs.leaf(2, cfg.max_tokens, cfg.embed_dim)
    mask = inputs.mask(2, cfg.max_tokens)
    fn = _projected(lambda: bilstm_encode(seq, mask, lstm), inputs)
    return inputs.check(fn, {"seq": seq, **_module_params(lstm, "bilstm")})


def check_attention_block(cfg: ModelConfig, inputs: _Inputs) -> GradCheckReport:
    width = 2 * cfg.hidden
    block = AttentionBlock(width, cfg.heads, 0.3, inputs.gen)
    jitter_parameters(block, 0.1, 3)
    U = inputs.leaf(2, cfg.max_utterances, cfg.max_tokens, width)
    mask = inputs.mask(2, cfg.max_utterances, cfg.max_tokens)
    fn = _projected(lambda: self_attend(U, mask, block), inputs)
    return inputs.check(fn, {"units": U, **_module_params(block, "block")})


def check_char_conv(cfg: ModelConfig, inputs: _Inputs) -> GradCheckReport:
    conv = CharConv(cfg.char_dim, cfg.char_filters, cfg.char_windows, 0.3, inputs.gen)
    jitter_parameters(conv, 0.1, 4)
    width = max(cfg.char_windows) + 3
    chars = torch.randint(2, ALPHABET_SIZE, (3, width), generator=inputs.gen)
    lengths = torch.tensor([width, width - 1, max(cfg.char_windows)])
    fn = _projected(lambda: conv(chars, lengths), inputs)
    return inputs.check(fn, _module_params(conv, "conv"))


def check_selector(cfg: ModelConfig, inputs: _Inputs) -> GradCheckReport:
    width = 2 * cfg.hidden
    shape = (2, cfg.max_utterances, cfg.max_tokens, width)
    units, transformed = inputs.leaf(*shape), inputs.leaf(*shape)
    token_mask = inputs.mask(*shape[:3])
    unit_mask = token_mask.any(-1)
    sel = SelectorParams(cfg.hops)
    jitter_parameters(sel, 0.1, 5)

    def run():
        queries = build_queries(transformed, token_mask, unit_mask, cfg.hops)
        return select_units(units, transformed, token_mask, unit_mask, queries, sel,
                            cfg.renormalize_hop_scores).reweighted

    fn = _projected(run, inputs)
    return inputs.check(fn, {"units": units, "transformed": transformed,
                                      **_module_params(sel, "selector")})


def check_matcher(cfg: ModelConfig, inputs: _Inputs) -> GradCheckReport:
    width = 2 * cfg.hidden
    units = inputs.leaf(2, cfg.max_knowledge, cfg.max_tokens, width)
    cand = inputs.leaf(2, cfg.n_candidates, cfg.max_tokens, width)
    umask = inputs.mask(2, cfg.max_knowledge, cfg.max_tokens)
    cmask = inputs.mask(2, cfg.n_candidates, cfg.max_tokens)

    def run():
        side, resp, _ = match_pair(units, umask, cand, cmask)
        return torch.cat([side.flatten(1), resp.flatten(1)], dim=1)

    fn = _projected(run, inputs)
    return inputs.check(fn, {"units": units, "candidates": cand})


def check_aggregation(cfg: ModelConfig, inputs: _Inputs) -> GradCheckReport:
    h, feat = cfg.hidden, 8 * cfg.hidden
    sentence, session = BiLSTM(feat, h, generator=inputs.gen), BiLSTM(4 * h, h, generator=inputs.gen)
    jitter_parameters(sentence, 0.3, 6)
    jitter_parameters(session, 0.3, 7)
    n_units = max(cfg.max_utterances, cfg.max_knowledge)
    feats = inputs.leaf(2, n_units, cfg.max_tokens, feat)
    resp = inputs.leaf(2, cfg.max_tokens, feat)
    tmask = inputs.mask(2, n_units, cfg.max_tokens)
    rmask = inputs.mask(2, cfg.max_tokens)
    umask = tmask.any(-1)

    def run():
        per_unit = sentence_aggregate(feats, tmask, sentence)
        m_r = sentence_aggregate(resp, rmask, sentence)
        m_c = session_aggregate(per_unit, umask, session)
        m_k, _ = knowledge_post_select(per_unit, umask, m_r)
        return torch.cat([m_c, m_k, m_r], dim=-1)

    fn = _projected(run, inputs)
    params = {"features": feats, "response": resp, **_module_params(sentence, "sentence"),
              **_module_params(session, "session")}
    return inputs.check(fn, params)


def check_head(cfg: ModelConfig, inputs: _Inputs) -> GradCheckReport:
    head = PredictionHead(16 * cfg.hidden, cfg.mlp_hidden, cfg.head_activation, 0.3, inputs.gen)
    jitter_parameters(head, 0.1, 8)
    feats = inputs.leaf(2, cfg.n_candidates, 16 * cfg.hidden)
    labels = torch.randint(0, cfg.n_candidates, (2,), generator=inputs.gen)
    fn = lambda: batch_loss(score(feats, head), labels)  # noqa: E731
    return inputs.check(fn, {"features": feats, **_module_params(head, "head")})


def synthetic_model(cfg: ModelConfig, n_words: int = 30, seed: int = 0) -> tuple[MatchingNetwork, Vocabulary]:
    vocab = build_vocabulary([[f"w{i}" for i in range(n_words)]])
    rng = np.random.default_rng(seed)
    model = MatchingNetwork(cfg, vocab, rng.normal(size=(len(vocab), cfg.pretrained_dim)),
                            rng.normal(size=(len(vocab), cfg.corpus_dim)))
    return model, vocab


def check_full_loss(cfg: ModelConfig, inputs: _Inputs) -> GradCheckReport:
    model, vocab = synthetic_model(cfg)
    # structured init (unit layer-norm gains, zero biases) puts max-pools on exact ties
    jitter_parameters(model, 0.1, 9)
    hi = len(vocab)

    def ids(*shape):
        block = torch.randint(2, hi, shape, generator=inputs.gen)
        block[..., -1] = torch.where(torch.rand(shape[:-1], generator=inputs.gen) < 0.5, 0, block[..., -1])
        return block

    B = 2
    context = ids(B, cfg.max_utterances, cfg.max_tokens)
    context[0, 0] = 0                   # one leading padded utterance
    knowledge = ids(B, cfg.max_knowledge, cfg.max_tokens)
    candidates = ids(B, cfg.n_candidates, cfg.max_tokens)
    labels = torch.arange(B) % cfg.n_candidates
    fn = lambda: batch_loss(model(context, knowledge, candidates).logits, labels)  # noqa: E731
    return inputs.check(fn, _module_params(model, "model"))


CHECKS: dict[str, Callable[[ModelConfig, _Inputs], GradCheckReport]] = {
    "layer_norm": check_layer_norm,
    "lstm_cell": check_lstm_cell,
    "bilstm": check_bilstm,
    "attention_block": check_attention_block,
    "char_conv": check_char_conv,
    "selector": check_selector,
    "matcher": check_matcher,
    "aggregation": check_aggregation,
    "head_and_loss": check_head,
    "full_loss": check_full_loss,
}


def run_suite(config: ModelConfig | None = None, eps: float = DEFAULT_EPS, names=None, seed: int = 0,
              retry_eps=RETRY_EPS) -> SuiteResult:
    """Run the named checks (all by default); ``config`` must be 64-bit."""
    cfg = config or tiny_config()
    if cfg.dtype != "float64":
        raise ValueError("gradient checks need dtype = float64")
    unknown = set(names or ()) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks {sorted(unknown)}; available: {', '.join(CHECKS)}")
    start = time.perf_counter()
    reports = {}
    for i, name in enumerate(names or CHECKS):
        reports[name] = CHECKS[name](cfg, _Inputs(seed * 100 + i, eps, retry_eps))
    return SuiteResult(reports, time.perf_counter() - start)
