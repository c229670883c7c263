"""The full matching network: representation, encoding, selection, matching,
aggregation and prediction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .aggregator import assemble_final, knowledge_post_select, sentence_aggregate, session_aggregate
from .config import ModelConfig
from .corpus import PAD, TokenizedBatch, Vocabulary
from .embed import CharConv, Embedder
from .encoder import BiLSTM
from .matcher import match_pair
from .selector import AttentionBlock, SelectorParams, build_queries, select_units, self_attend


class LabelOutOfRange(IndexError):
    pass


DTYPES = {"float32": torch.float32, "float64": torch.float64}


class PredictionHead(nn.Module):
    def __init__(self, d_in: int, hidden: int, activation: str = "relu", init_scale: float = 0.08,
                 generator: torch.Generator | None = None, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.activation = activation
        self.W_1 = nn.Parameter((torch.rand(d_in, hidden, generator=generator, dtype=dtype) * 2 - 1) * init_scale)
        self.b_1 = nn.Parameter(torch.zeros(hidden, dtype=dtype))
        self.W_2 = nn.Parameter((torch.rand(hidden, generator=generator, dtype=dtype) * 2 - 1) * init_scale)
        self.b_2 = nn.Parameter(torch.zeros((), dtype=dtype))

    def forward(self, features: Tensor) -> Tensor:
        return score(features, self)


def score(features: Tensor, head: PredictionHead) -> Tensor:
    """One unnormalized logit per feature vector (softmax happens across candidates in the loss)."""
    hidden = features @ head.W_1 + head.b_1
    hidden = torch.relu(hidden) if head.activation == "relu" else torch.tanh(hidden)
    return hidden @ head.W_2 + head.b_2


def batch_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean cross-entropy of the true candidate under a softmax over each row."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n):
        raise LabelOutOfRange(f"labels must lie in [0, {n})")
    log_probs = torch.log_softmax(logits, dim=-1)
    return -log_probs.gather(-1, labels[:, None]).mean()


@dataclass
class ForwardOutput:
    logits: Tensor                                   # [B, n]
    details: dict[str, Tensor] = field(default_factory=dict)


class MatchingNetwork(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary, pretrained: np.ndarray, corpus: np.ndarray):
        super().__init__()
        self.config = config
        dtype = DTYPES[config.dtype]
        gen = torch.Generator().manual_seed(config.seed)
        scale = config.init_scale
        h = config.hidden
        width = 2 * h

        conv = CharConv(config.char_dim, config.char_filters, config.char_windows, scale, gen, dtype)
        self.embedder = Embedder(vocab, pretrained, corpus, conv, config.max_word_chars, dtype,
                                 freeze_char_conv=config.freeze_char_conv)
        self.encoder = BiLSTM(self.embedder.out_dim, h, scale, gen, dtype)
        self.context_block = AttentionBlock(width, config.heads, scale, gen, dtype)
        self.knowledge_block = AttentionBlock(width, config.heads, scale, gen, dtype)
        self.context_selector = SelectorParams(config.hops, 0.5, dtype)
        self.knowledge_selector = SelectorParams(config.hops, 0.5, dtype)
        self.sentence_lstm = BiLSTM(4 * width, h, scale, gen, dtype)
        if config.separate_aggregators:
            self.knowledge_lstm = BiLSTM(4 * width, h, scale, gen, dtype)
            self.response_lstm = BiLSTM(4 * width, h, scale, gen, dtype)
        else:
            self.knowledge_lstm = self.response_lstm = self.sentence_lstm
        self.session_lstm = BiLSTM(4 * h, h, scale, gen, dtype)
        self.head = PredictionHead(16 * h, config.mlp_hidden, config.head_activation, scale, gen, dtype)

    @property
    def feature_width(self) -> int:
        """Width of each of the four final feature blocks."""
        return 4 * self.config.hidden

    def encode(self, *id_blocks: Tensor) -> list[Tensor]:
        """Embed and encode several ``[B, k, l]`` id blocks in one recurrent pass."""
        sizes = [b.shape[1] for b in id_blocks]
        lengths = [b.shape[2] for b in id_blocks]
        longest = max(lengths)
        ids = torch.cat([nn.functional.pad(b, (0, longest - b.shape[2]), value=PAD) for b in id_blocks], dim=1)
        states = self.encoder(self.embedder(ids), ids != PAD)
        return [s[:, :, :l] for s, l in zip(torch.split(states, sizes, dim=1), lengths)]

    def aggregate_sentences(self, groups: list[tuple[Tensor, Tensor, BiLSTM]]) -> list[Tensor]:
        """``sentence_aggregate`` over several ``(features [..., l, F], mask, lstm)`` groups,
        sharing one recurrent pass per distinct LSTM."""
        results: list[Tensor | None] = [None] * len(groups)
        by_lstm: dict[int, list[int]] = {}
        for i, (_, _, lstm) in enumerate(groups):
            by_lstm.setdefault(id(lstm), []).append(i)
        for members in by_lstm.values():
            lstm = groups[members[0]][2]
            feats = [groups[i][0] for i in members]
            masks = [groups[i][1] for i in members]
            l = max(f.shape[-2] for f in feats)
            # trailing padding is inert in the recurrence and the pooling
            flat = torch.cat([nn.functional.pad(f, (0, 0, 0, l - f.shape[-2])).reshape(-1, l, f.shape[-1])
                              for f in feats])
            flat_mask = torch.cat([nn.functional.pad(m, (0, l - m.shape[-1])).reshape(-1, l) for m in masks])
            pooled = sentence_aggregate(flat, flat_mask, lstm)
            offset = 0
            for i, f in zip(members, feats):
                count = f[..., 0, 0].numel()
                results[i] = pooled[offset:offset + count].reshape(*f.shape[:-2], -1)
                offset += count
        return results

    def forward(self, context: Tensor, knowledge: Tensor, candidates: Tensor) -> ForwardOutput:
        cfg = self.config
        flags = cfg.ablations
        B, n, _ = candidates.shape
        cmask, kmask, rmask = context != PAD, knowledge != PAD, candidates != PAD
        unit_c, unit_k = cmask.any(-1), kmask.any(-1)
        use_context = not flags.drop_context
        use_knowledge = not flags.drop_knowledge
        details: dict[str, Tensor] = {}

        blocks = [candidates] + ([context] if use_context else []) + ([knowledge] if use_knowledge else [])
        encoded = self.encode(*blocks)
        R = encoded.pop(0)                                                    # [B, n, l, W]
        U = encoded.pop(0) if use_context else None
        K = encoded.pop(0) if use_knowledge else None

        queries = None
        if use_context and not (flags.disable_context_selector and flags.disable_knowledge_selector):
            U_hat = self_attend(U, cmask, self.context_block)
            queries = build_queries(U_hat, cmask, unit_c, cfg.hops)

        groups = []
        if use_context:
            if flags.disable_context_selector:
                U_bar = U
            else:
                sel = select_units(U, U_hat, cmask, unit_c, queries, self.context_selector,
                                   cfg.renormalize_hop_scores)
                U_bar = sel.reweighted
                details["context_weights"] = sel.weights
                details["context_per_hop"] = sel.per_hop
            C_bar, R_bar, _ = match_pair(U_bar, cmask, R, rmask)
            nc, l = context.shape[1], context.shape[2]
            groups += [(C_bar.reshape(B, n, nc, l, -1), cmask[:, None].expand(B, n, nc, l), self.sentence_lstm),
                       (R_bar, rmask, self.response_lstm)]
        if use_knowledge:
            if flags.disable_knowledge_selector or queries is None:
                K_bar = K
            else:
                K_hat = self_attend(K, kmask, self.knowledge_block)
                sel = select_units(K, K_hat, kmask, unit_k, queries, self.knowledge_selector,
                                   cfg.renormalize_hop_scores)
                K_bar = sel.reweighted
                details["knowledge_weights"] = sel.weights
                details["knowledge_per_hop"] = sel.per_hop
            Kc_bar, Rc_bar, _ = match_pair(K_bar, kmask, R, rmask)
            nk, l = knowledge.shape[1], knowledge.shape[2]
            groups += [(Kc_bar.reshape(B, n, nk, l, -1), kmask[:, None].expand(B, n, nk, l), self.knowledge_lstm),
                       (Rc_bar, rmask, self.response_lstm)]
        pooled = self.aggregate_sentences(groups)

        zeros = R.new_zeros(B, n, self.feature_width)
        m_c = m_r = m_k = m_rc = zeros
        if use_context:
            utt, m_r = pooled.pop(0), pooled.pop(0)
            m_c = session_aggregate(utt, unit_c[:, None].expand(B, n, -1), self.session_lstm)
        if use_knowledge:
            k_s, m_rc = pooled.pop(0), pooled.pop(0)
            m_k, gamma = knowledge_post_select(k_s, unit_k[:, None].expand(B, n, -1), m_rc,
                                               uniform=flags.disable_post_selection)
            details["gamma"] = gamma

        final = assemble_final(m_c, m_k, m_r, m_rc, flags.drop_context, flags.drop_knowledge)
        details.update(m_c=m_c, m_k=m_k, m_r=m_r, m_rc=m_rc, final=final)
        return ForwardOutput(self.head(final), details)

    def forward_batch(self, batch: TokenizedBatch) -> ForwardOutput:
        return self(*batch_tensors(batch))


def batch_tensors(batch: TokenizedBatch) -> tuple[Tensor, Tensor, Tensor]:
    return (torch.as_tensor(batch.context, dtype=torch.long),
            torch.as_tensor(batch.knowledge, dtype=torch.long),
            torch.as_tensor(batch.candidates, dtype=torch.long))
