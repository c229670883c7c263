import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dck.matcher import cross_attend, enrich, flatten_units, match_pair
from helpers import rand64, rand_mask, t64


@pytest.mark.parametrize("n,l", [(10, 30), (16, 50)])
def test_flatten_lengths(n, l):
    units = torch.zeros(1, n, l, 2, dtype=torch.float64)
    seq = flatten_units(units, torch.ones(1, n, l, dtype=torch.bool))
    assert seq.states.shape == (1, n * l, 2) and seq.mask.shape == (1, n * l)
    assert seq.segments[l - 1] == 0 and seq.segments[l] == 1


def test_flatten_keeps_order():
    units = t64(np.arange(12, dtype=float).reshape(1, 2, 3, 2))
    seq = flatten_units(units, torch.ones(1, 2, 3, dtype=torch.bool))
    assert seq.states[0, :, 0].tolist() == [0, 2, 4, 6, 8, 10]


class TestCrossAttend:
    def test_identical_r_rows(self):
        rng = np.random.default_rng(0)
        X = rand64(rng, 4, 3)
        R = t64([[0.5, -1.0, 2.0]] * 3)
        res = cross_attend(X, R, torch.ones(4, dtype=torch.bool), torch.ones(3, dtype=torch.bool))
        assert torch.allclose(res.aligned_x, R[:1].expand(4, 3), atol=1e-15)

    def test_basis_case(self):
        I = t64(np.eye(2))
        res = cross_attend(I, I, torch.ones(2, dtype=torch.bool), torch.ones(2, dtype=torch.bool))
        e = np.e / (1 + np.e)
        assert res.aligned_x.numpy() == pytest.approx(np.array([[e, 1 - e], [1 - e, e]]), abs=1e-12)
        assert round(e, 3) == 0.731

    def test_distributions(self):
        rng = np.random.default_rng(1)
        X, R = rand64(rng, 5, 3), rand64(rng, 4, 3)
        xm, rm = rand_mask(rng, 5), rand_mask(rng, 4)
        res = cross_attend(X, R, xm, rm)
        assert torch.allclose(res.alpha.sum(-1), torch.ones(5, dtype=torch.float64), atol=1e-12)
        assert torch.allclose(res.beta.sum(0), torch.ones(4, dtype=torch.float64), atol=1e-12)
        assert (res.alpha[:, ~rm] == 0).all() and (res.beta[~xm] == 0).all()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        X, R = rand64(rng, 6, 3), rand64(rng, 4, 3)
        xm, rm = rand_mask(rng, 6), rand_mask(rng, 4)
        res = cross_attend(X, R, xm, rm)
        E, alpha, beta, X_hat, R_hat = oracles.cross_attend(X.numpy(), R.numpy(), xm.numpy(), rm.numpy())
        for got, ref in [(res.similarity, E), (res.alpha, alpha), (res.beta, beta), (res.aligned_x, X_hat),
                         (res.aligned_r, R_hat)]:
            assert got.numpy() == pytest.approx(ref, abs=1e-12)


class TestEnrich:
    def test_identity_alignment(self):
        X = rand64(np.random.default_rng(0), 3, 4)
        out = enrich(X, X)
        assert torch.equal(out[:, 4:8], X) and not out[:, 8:12].any()
        assert torch.equal(out[:, 12:], X * X)

    def test_width(self):
        assert enrich(torch.zeros(2, 600), torch.zeros(2, 600)).shape == (2, 2400)

    def test_oracle(self):
        rng = np.random.default_rng(1)
        X, Xh = rand64(rng, 3, 2), rand64(rng, 3, 2)
        assert enrich(X, Xh).numpy() == pytest.approx(oracles.enrich(X.numpy(), Xh.numpy()), abs=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            enrich(torch.zeros(2, 3), torch.zeros(3, 3))


class TestMatchPair:
    def case(self, seed=0):
        rng = np.random.default_rng(seed)
        units, umask = rand64(rng, 2, 3, 4, 5), rand_mask(rng, 2, 3, 4)
        cand, cmask = rand64(rng, 2, 6, 3, 5), rand_mask(rng, 2, 6, 3)
        return units * umask[..., None], umask, cand * cmask[..., None], cmask

    def test_shapes(self):
        side, resp, seq = match_pair(*self.case())
        assert side.shape == (2, 6, 12, 20) and resp.shape == (2, 6, 3, 20)
        assert seq.states.shape == (2, 12, 5)

    def test_per_candidate_composition(self):
        units, umask, cand, cmask = self.case(1)
        side, resp, seq = match_pair(units, umask, cand, cmask)
        b, c = 1, 4
        ref = cross_attend(seq.states[b], cand[b, c], seq.mask[b], cmask[b, c])
        assert torch.allclose(side[b, c], enrich(seq.states[b], ref.aligned_x), atol=1e-14)
        assert torch.allclose(resp[b, c], enrich(cand[b, c], ref.aligned_r), atol=1e-14)

    def test_aligned_rows_in_convex_hull(self):
        units, umask, cand, cmask = self.case(2)
        side, _, seq = match_pair(units, umask, cand, cmask)
        W = units.shape[-1]
        x_hat = side[..., W:2 * W]
        for b in range(2):
            for c in range(6):
                real = cand[b, c][cmask[b, c]]
                lo, hi = real.min(0).values, real.max(0).values
                assert ((x_hat[b, c] >= lo - 1e-12) & (x_hat[b, c] <= hi + 1e-12)).all()

    def test_padding_equals_deletion(self):
        units, umask, cand, cmask = self.case(3)
        extra_u = torch.cat([units, torch.zeros(2, 3, 2, 5, dtype=torch.float64)], dim=2)
        extra_m = torch.cat([umask, torch.zeros(2, 3, 2, dtype=torch.bool)], dim=2)
        _, resp_a, _ = match_pair(units, umask, cand, cmask)
        _, resp_b, _ = match_pair(extra_u, extra_m, cand, cmask)
        assert torch.allclose(resp_a, resp_b, atol=1e-13)
