import numpy as np
import torch


def t64(array):
    return torch.as_tensor(np.asarray(array), dtype=torch.float64)


def rand64(gen, *shape, scale=1.0):
    return torch.as_tensor(gen.uniform(-scale, scale, size=shape), dtype=torch.float64)


def rand_mask(gen, *shape, p=0.7, keep_first=True):
    m = gen.random(shape) < p
    if keep_first:
        m[..., 0] = True
    return torch.as_tensor(m)


def random_ids(gen, vocab_size, *shape, pad_rate=0.3):
    """Token ids in [2, vocab_size) with some trailing PAD per row."""
    ids = gen.integers(2, vocab_size, size=shape)
    lengths = gen.integers(1, shape[-1] + 1, size=shape[:-1])
    pad = np.arange(shape[-1]) >= lengths[..., None]
    ids[pad] = 0
    drop = gen.random(shape[:-1]) < pad_rate
    drop[..., 0] = False
    ids[drop] = 0
    return torch.as_tensor(ids, dtype=torch.long)


def pad_block(block, rows=0, tokens=0, front_rows=0):
    """Append PAD tokens to every row and PAD rows before/after the existing ones."""
    b, n, l = block.shape
    out = torch.zeros(b, n + rows + front_rows, l + tokens, dtype=block.dtype)
    out[:, front_rows:front_rows + n, :l] = block
    return out

