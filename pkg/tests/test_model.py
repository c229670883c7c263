import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dck.config import ConfigError, tiny_config
from dck.gradcheck import synthetic_model
from dck.model import LabelOutOfRange, PredictionHead, batch_loss, score
from dck.numerics import jitter_parameters
from helpers import pad_block, rand64, random_ids, t64


def inputs(cfg, vocab, seed=0, batch=2):
    gen = np.random.default_rng(seed)
    n = len(vocab)
    return (random_ids(gen, n, batch, cfg.max_utterances, cfg.max_tokens),
            random_ids(gen, n, batch, cfg.max_knowledge, cfg.max_tokens),
            random_ids(gen, n, batch, cfg.n_candidates, cfg.max_tokens, pad_rate=0.0))


def jittered(cfg, seed=3):
    model, vocab = synthetic_model(cfg)
    jitter_parameters(model, 0.1, seed)
    return model, vocab


class TestScore:
    def test_zero_weights_give_zero(self):
        head = PredictionHead(6, 4)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        assert not score(rand64(np.random.default_rng(0), 3, 6), head).any()

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_loop_oracle(self, activation):
        head = PredictionHead(5, 3, activation, 0.7, torch.Generator().manual_seed(1))
        with torch.no_grad():
            head.b_1.uniform_(-0.3, 0.3)
            head.b_2.fill_(0.2)
        x = rand64(np.random.default_rng(1), 4, 5)
        got = score(x, head)
        W1, b1, W2, b2 = (p.detach().numpy() for p in (head.W_1, head.b_1, head.W_2, head.b_2))
        for row, g in zip(x.numpy(), got):
            assert g.item() == pytest.approx(oracles.mlp(row, W1, b1, W2, float(b2), activation), abs=1e-10)


class TestBatchLoss:
    def test_uniform_logits(self):
        loss = batch_loss(torch.zeros(3, 20, dtype=torch.float64), torch.tensor([0, 5, 19]))
        assert loss.item() == pytest.approx(math.log(20), abs=1e-12)

    def test_confident_limit(self):
        logits = torch.zeros(1, 4, dtype=torch.float64)
        logits[0, 2] = 60.0
        assert batch_loss(logits, torch.tensor([2])).item() < 1e-20

    def test_three_candidate_case(self):
        logits = t64([[1.0, 2.0, 3.0]])
        z = math.e + math.e ** 2 + math.e ** 3
        assert batch_loss(logits, torch.tensor([1])).item() == pytest.approx(-math.log(math.e ** 2 / z), abs=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            batch_loss(torch.zeros(2, 3), torch.tensor([0, 3]))
        with pytest.raises(LabelOutOfRange):
            batch_loss(torch.zeros(1, 3), torch.tensor([-1]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-100, 100))
    def test_shift_and_permutation_invariance(self, seed, shift):
        rng = np.random.default_rng(seed)
        logits = rand64(rng, 4, 6, scale=5.0)
        labels = torch.as_tensor(rng.integers(0, 6, 4))
        base = batch_loss(logits, labels).item()
        ref = oracles.cross_entropy(logits.tolist(), labels.tolist())
        assert base == pytest.approx(ref, abs=1e-10)
        assert batch_loss(logits + shift, labels).item() == pytest.approx(base, abs=1e-9)
        perm = torch.as_tensor(rng.permutation(6))
        inverse = torch.argsort(perm)
        assert batch_loss(logits[:, perm], inverse[labels]).item() == pytest.approx(base, abs=1e-12)


class TestForward:
    def test_shapes_and_details(self):
        cfg = tiny_config()
        model, vocab = jittered(cfg)
        out = model(*inputs(cfg, vocab))
        assert out.logits.shape == (2, cfg.n_candidates)
        assert out.details["final"].shape == (2, cfg.n_candidates, 16 * cfg.hidden)
        assert out.details["gamma"].shape == (2, cfg.n_candidates, cfg.max_knowledge)
        assert out.details["context_weights"].shape == (2, cfg.max_utterances)
        assert out.details["context_per_hop"].shape == (2, cfg.max_utterances, cfg.hops)

    def test_batch_rows_independent(self):
        cfg = tiny_config()
        model, vocab = jittered(cfg)
        c, k, r = inputs(cfg, vocab, batch=3)
        whole = model(c, k, r).logits
        for i in range(3):
            assert torch.allclose(whole[i], model(c[i:i + 1], k[i:i + 1], r[i:i + 1]).logits[0], atol=1e-12)

    @pytest.mark.parametrize("grow", [dict(tokens=2), dict(rows=1), dict(front_rows=1), dict(rows=1, tokens=1)])
    def test_padding_equals_deletion(self, grow):
        cfg = tiny_config()
        model, vocab = jittered(cfg)
        c, k, r = inputs(cfg, vocab, seed=5)
        base = model(c, k, r).logits
        grown = model(pad_block(c, **grow), pad_block(k, **grow), pad_block(r, tokens=grow.get("tokens", 0))).logits
        assert torch.allclose(base, grown, atol=1e-10, rtol=0)

    def test_candidate_permutation_equivariance(self):
        cfg = tiny_config()
        model, vocab = jittered(cfg)
        c, k, r = inputs(cfg, vocab, seed=6)
        perm = torch.tensor([2, 0, 1])
        assert torch.allclose(model(c, k, r).logits[:, perm], model(c, k, r[:, perm]).logits, atol=1e-12)


class TestAblations:
    def run(self, *names, seed=7):
        cfg = tiny_config().with_ablations(names)
        model, vocab = jittered(cfg)
        return cfg, model(*inputs(cfg, vocab, seed))

    def test_drop_context_zeroes_context_slices(self):
        cfg, out = self.run("drop_context")
        w = 4 * cfg.hidden
        final = out.details["final"]
        assert final.shape[-1] == 4 * w
        assert not final[..., :w].any() and not final[..., 2 * w:3 * w].any()
        assert final[..., w:2 * w].abs().sum() > 0 and final[..., 3 * w:].abs().sum() > 0
        assert "context_weights" not in out.details and "knowledge_weights" not in out.details

    def test_drop_knowledge_zeroes_knowledge_slices(self):
        cfg, out = self.run("drop_knowledge")
        w = 4 * cfg.hidden
        final = out.details["final"]
        assert not final[..., w:2 * w].any() and not final[..., 3 * w:].any()
        assert final[..., :w].abs().sum() > 0 and "gamma" not in out.details

    def test_disabled_selectors_skip_weights(self):
        _, out = self.run("disable_context_selector")
        assert "context_weights" not in out.details and "knowledge_weights" in out.details
        _, out = self.run("disable_knowledge_selector")
        assert "knowledge_weights" not in out.details and "context_weights" in out.details

    def test_disabled_post_selection_is_uniform(self):
        cfg = tiny_config(disable_post_selection=True)
        model, vocab = jittered(cfg)
        c, k, r = inputs(cfg, vocab, seed=8)
        gamma = model(c, k, r).details["gamma"]
        real = (k != 0).any(-1)
        expected = real.double() / real.sum(-1, keepdim=True)
        assert torch.allclose(gamma, expected[:, None].expand_as(gamma), atol=1e-15)

    def test_both_drops_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config().with_ablations(["drop_context", "drop_knowledge"])
        with pytest.raises(ConfigError):
            tiny_config().with_ablations(["no_such_flag"])

    def test_ablations_change_logits(self):
        full = self.run()[1].logits
        for name in ["disable_context_selector", "disable_knowledge_selector", "disable_post_selection",
                     "drop_context", "drop_knowledge"]:
            assert not torch.allclose(full, self.run(name)[1].logits)


def test_embedding_tables_are_not_trainable(tiny_model):
    model, _ = tiny_model
    names = {n for n, p in model.named_parameters()}
    assert not any("word_table" in n for n in names)
    assert any(n.startswith("embedder.conv") for n in names)
