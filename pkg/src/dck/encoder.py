"""Bidirectional LSTM used by the encoding and aggregation layers."""
from __future__ import annotations

import torch
from torch import Tensor, nn

# gate order inside the stacked weight matrices
GATES = ("input", "forget", "output", "candidate")


class LSTMParams(nn.Module):
    """One direction: ``U [d_in, 4h]``, ``V [h, 4h]``, ``b [4h]`` stacked as (i, f, o, g)."""

    def __init__(self, d_in: int, hidden: int, init_scale: float = 0.08, forget_bias: float = 1.0,
                 generator: torch.Generator | None = None, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.hidden = hidden
        self.U = nn.Parameter((torch.rand(d_in, 4 * hidden, generator=generator, dtype=dtype) * 2 - 1) * init_scale)
        self.V = nn.Parameter((torch.rand(hidden, 4 * hidden, generator=generator, dtype=dtype) * 2 - 1) * init_scale)
        b = torch.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = forget_bias
        self.b = nn.Parameter(b)


def _step(pre_input: Tensor, h_prev: Tensor, c_prev: Tensor, V: Tensor) -> tuple[Tensor, Tensor]:
    z = pre_input + h_prev @ V
    i, f, o, g = z.chunk(4, dim=-1)
    i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
    g = torch.tanh(g)
    c = i * g + f * c_prev
    h = o * torch.tanh(c)
    return h, c


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: LSTMParams) -> tuple[Tensor, Tensor]:
    return _step(x_t @ params.U + params.b, h_prev, c_prev, params.V)


def _run(pre: Tensor, mask: Tensor, V: Tensor, hidden: int) -> Tensor:
    """Run stacked directions ``pre [D, N, T, 4h]`` in lockstep; ``V [D, h, 4h]``."""
    d, n, steps, _ = pre.shape
    h = pre.new_zeros(d, n, hidden)
    c = pre.new_zeros(d, n, hidden)
    outputs = []
    for t in range(steps):
        h_new, c_new = _step(pre[:, :, t], h, c, V)
        m = mask[:, :, t, None]
        # padded steps carry the state through unchanged and emit zeros
        h = torch.where(m, h_new, h)
        c = torch.where(m, c_new, c)
        outputs.append(torch.where(m, h_new, torch.zeros_like(h_new)))
    return torch.stack(outputs, dim=2)


class BiLSTM(nn.Module):
    def __init__(self, d_in: int, hidden: int, init_scale: float = 0.08,
                 generator: torch.Generator | None = None, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.hidden = hidden
        self.forward_params = LSTMParams(d_in, hidden, init_scale, generator=generator, dtype=dtype)
        self.backward_params = LSTMParams(d_in, hidden, init_scale, generator=generator, dtype=dtype)

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden

    def forward(self, seq: Tensor, mask: Tensor) -> Tensor:
        return bilstm_encode(seq, mask, self)


def bilstm_encode(seq: Tensor, mask: Tensor, params: BiLSTM) -> Tensor:
    """``seq [..., T, d_in]`` with ``mask [..., T]`` -> ``[..., T, 2h]``.

    Both directions start from zero state at the first real token they
    meet, so trailing padding never leaks into the recurrence.
    """
    lead = seq.shape[:-2]
    steps = seq.shape[-2]
    flat = seq.reshape(-1, steps, seq.shape[-1])
    m = mask.reshape(-1, steps).bool()
    fp, bp = params.forward_params, params.backward_params
    # the backward direction runs over the time-reversed sequence
    pre = torch.stack([flat @ fp.U + fp.b, torch.flip(flat, [1]) @ bp.U + bp.b])
    masks = torch.stack([m, torch.flip(m, [1])])
    states = _run(pre, masks, torch.stack([fp.V, bp.V]), params.hidden)
    out = torch.cat([states[0], torch.flip(states[1], [1])], dim=-1)
    return out.reshape(*lead, steps, out.shape[-1])


def last_real(states: Tensor, mask: Tensor) -> Tensor:
    """State at the last real position along the second-to-last axis; zeros when there is none."""
    m = mask.bool()
    steps = m.shape[-1]
    positions = torch.arange(steps, device=m.device).expand_as(m)
    last = torch.where(m, positions, torch.full_like(positions, -1)).amax(dim=-1)
    idx = last.clamp_min(0)[..., None, None].expand(*states.shape[:-2], 1, states.shape[-1])
    picked = states.gather(-2, idx).squeeze(-2)
    return torch.where((last >= 0)[..., None], picked, torch.zeros_like(picked))
