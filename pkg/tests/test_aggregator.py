import numpy as np
import pytest
import torch

from dck.aggregator import assemble_final, knowledge_post_select, sentence_aggregate, session_aggregate
from dck.encoder import BiLSTM
from dck.numerics import EmptySupport
from helpers import rand64, rand_mask, t64


def lstm(in_dim=4, hidden=3, seed=0):
    return BiLSTM(in_dim, hidden, init_scale=0.5, generator=torch.Generator().manual_seed(seed))


class TestSentence:
    def test_width_is_four_hidden(self):
        out = sentence_aggregate(rand64(np.random.default_rng(0), 2, 5, 4), torch.ones(2, 5, dtype=torch.bool), lstm())
        assert out.shape == (2, 12)

    def test_all_pad_is_zero(self):
        out = sentence_aggregate(torch.zeros(1, 4, 4, dtype=torch.float64), torch.zeros(1, 4, dtype=torch.bool), lstm())
        assert not out.any()

    def test_single_token_halves_agree(self):
        out = sentence_aggregate(rand64(np.random.default_rng(1), 1, 1, 4), torch.ones(1, 1, dtype=torch.bool), lstm())
        assert torch.equal(out[0, :6], out[0, 6:])

    def test_trailing_pad_invariance(self):
        rng = np.random.default_rng(2)
        x = rand64(rng, 1, 3, 4)
        padded = torch.cat([x, torch.zeros(1, 4, 4, dtype=torch.float64)], dim=1)
        mask = torch.tensor([[True] * 3 + [False] * 4])
        a = sentence_aggregate(x, torch.ones(1, 3, dtype=torch.bool), lstm())
        b = sentence_aggregate(padded, mask, lstm())
        assert torch.allclose(a, b, atol=1e-14)


class TestSession:
    def test_single_utterance(self):
        out = session_aggregate(rand64(np.random.default_rng(0), 1, 1, 4), torch.ones(1, 1, dtype=torch.bool), lstm())
        assert torch.equal(out[0, :6], out[0, 6:])

    def test_appended_pad_utterance(self):
        rng = np.random.default_rng(1)
        feats = rand64(rng, 1, 3, 4)
        grown = torch.cat([feats, torch.zeros(1, 1, 4, dtype=torch.float64)], dim=1)
        a = session_aggregate(feats, torch.ones(1, 3, dtype=torch.bool), lstm())
        b = session_aggregate(grown, torch.tensor([[True, True, True, False]]), lstm())
        assert torch.allclose(a, b, atol=1e-14)

    def test_strict_empty(self):
        with pytest.raises(EmptySupport):
            session_aggregate(torch.zeros(1, 2, 4, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.bool), lstm(),
                              strict=True)


class TestKnowledgePostSelect:
    def test_single_entry(self):
        k = rand64(np.random.default_rng(0), 1, 1, 5)
        m_k, gamma = knowledge_post_select(k, torch.ones(1, 1, dtype=torch.bool), rand64(np.random.default_rng(1), 1, 5))
        assert gamma.tolist() == [[1.0]] and torch.equal(m_k, k[:, 0])

    def test_identical_rows_uniform(self):
        row = rand64(np.random.default_rng(2), 1, 1, 5)
        _, gamma = knowledge_post_select(row.expand(1, 4, 5), torch.ones(1, 4, dtype=torch.bool),
                                         rand64(np.random.default_rng(3), 1, 5))
        assert gamma[0].tolist() == pytest.approx([0.25] * 4, abs=1e-15)

    def test_distribution_and_convex_hull(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            k = rand64(rng, 3, 4, 5)
            mask = rand_mask(rng, 3, 4)
            m_k, gamma = knowledge_post_select(k, mask, rand64(rng, 3, 5))
            assert torch.allclose(gamma.sum(-1), torch.ones(3, dtype=torch.float64), atol=1e-12)
            assert (gamma[~mask] == 0).all()
            for b in range(3):
                real = k[b][mask[b]]
                assert (m_k[b] >= real.min(0).values - 1e-12).all() and (m_k[b] <= real.max(0).values + 1e-12).all()

    def test_uniform_flag(self):
        rng = np.random.default_rng(5)
        k = rand64(rng, 1, 3, 2)
        m_k, gamma = knowledge_post_select(k, torch.tensor([[True, True, False]]), rand64(rng, 1, 2), uniform=True)
        assert gamma[0].tolist() == [0.5, 0.5, 0.0]
        assert torch.allclose(m_k[0], k[0, :2].mean(0))

    def test_response_dot_product_weights(self):
        k = t64([[[1.0, 0.0], [0.0, 1.0]]])
        _, gamma = knowledge_post_select(k, torch.ones(1, 2, dtype=torch.bool), t64([[2.0, 0.0]]))
        e2 = np.exp(2.0)
        assert gamma[0].tolist() == pytest.approx([e2 / (e2 + 1), 1 / (e2 + 1)], abs=1e-15)


class TestAssemble:
    def parts(self):
        return [torch.full((2, w), float(i + 1), dtype=torch.float64) for i, w in enumerate([6, 6, 6, 6])]

    def test_width_and_order(self):
        out = assemble_final(*self.parts())
        assert out.shape == (2, 24) and out[0, ::6].tolist() == [1, 2, 3, 4]

    def test_ablations_zero_slices_keep_width(self):
        out = assemble_final(*self.parts(), drop_context=True)
        assert out.shape == (2, 24)
        assert not out[:, :6].any() and not out[:, 12:18].any()
        assert (out[:, 6:12] == 2).all() and (out[:, 18:] == 4).all()
        out = assemble_final(*self.parts(), drop_knowledge=True)
        assert not out[:, 6:12].any() and not out[:, 18:].any() and (out[:, :6] == 1).all()
