"""Composite word representation: pretrained vectors, corpus skip-gram vectors
and character-convolution features, concatenated per token."""
from __future__ import annotations

import logging
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .corpus import PAD, UNK, Vocabulary
from .numerics import masked_max

logger = logging.getLogger(__name__)

CHAR_PAD, CHAR_UNK = 0, 1
ALPHABET = string.printable.strip()  # no whitespace characters
CHAR_INDEX = {c: i + 2 for i, c in enumerate(ALPHABET)}
ALPHABET_SIZE = len(ALPHABET) + 2


class DimensionMismatch(ValueError):
    pass


class FileUnreadable(OSError):
    pass


class IdOutOfRange(IndexError):
    pass


@dataclass
class VectorLoadResult:
    table: np.ndarray
    found: int
    malformed: int


def load_word_vectors(source: str | Path | Iterable[str], vocab: Vocabulary, dim: int,
                      strict: bool = False) -> VectorLoadResult:
    """Fill a ``[len(vocab), dim]`` table from ``token v1 .. v_dim`` lines.

    Out-of-vocabulary rows (and PAD) stay zero. Lines with the wrong number
    of values are skipped and counted, or raise :class:`DimensionMismatch`
    when ``strict``.
    """
    table = np.zeros((len(vocab), dim), dtype=np.float64)
    found = malformed = 0
    if isinstance(source, (str, Path)):
        try:
            handle = open(source, encoding="utf-8", errors="replace")
        except OSError as exc:
            raise FileUnreadable(f"cannot read word vectors from {source}: {exc}") from exc
        close = True
    else:
        handle, close = source, False
    try:
        for lineno, line in enumerate(handle, 1):
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                if strict:
                    raise DimensionMismatch(f"line {lineno}: {len(parts) - 1} values, expected {dim}")
                malformed += 1
                continue
            idx = vocab.index.get(parts[0])
            if idx is None or idx == PAD:
                continue
            try:
                table[idx] = np.asarray(parts[1:], dtype=np.float64)
            except ValueError:
                malformed += 1
                continue
            found += 1
    finally:
        if close:
            handle.close()
    if malformed:
        logger.warning("skipped %d malformed word-vector lines", malformed)
    return VectorLoadResult(table, found, malformed)


def save_word_vectors(path: str | Path, table: np.ndarray, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for idx, token in enumerate(vocab.tokens):
            if idx in (PAD, UNK):
                continue
            f.write(token + " " + " ".join(repr(float(x)) for x in table[idx]) + "\n")


def train_skipgram(sentences: Iterable[Sequence[str]], vocab: Vocabulary, dim: int = 100, window: int = 5,
                   negatives: int = 5, epochs: int = 5, lr: float = 0.025, seed: int = 0,
                   batch_pairs: int = 512) -> np.ndarray:
    """Skip-gram with negative sampling, trained by minibatch SGD.

    Window size is sampled per center word as in word2vec; noise words come
    from the unigram distribution raised to 3/4; the learning rate decays
    linearly to ``lr * 1e-4``. Returns the input-vector table with a zero
    PAD row.
    """
    rng = np.random.default_rng(seed)
    n_vocab = len(vocab)
    w_in = (rng.random((n_vocab, dim)) - 0.5) / dim
    w_out = np.zeros((n_vocab, dim))
    encoded = [np.asarray([i for i in vocab.ids(s) if i > UNK], dtype=np.int64) for s in sentences]
    encoded = [s for s in encoded if len(s) > 1]
    w_in[PAD] = 0.0
    if not encoded:
        return w_in

    counts = np.bincount(np.concatenate(encoded), minlength=n_vocab).astype(np.float64)
    noise = counts ** 0.75
    noise /= noise.sum()
    noise_cdf = np.cumsum(noise)

    def epoch_pairs():
        centers, contexts = [], []
        for sent in encoded:
            n = len(sent)
            reach = rng.integers(1, window + 1, size=n)
            for off in range(1, window + 1):
                if off >= n:
                    break
                pos = np.arange(n - off)
                fwd = reach[pos] >= off
                centers.append(sent[pos[fwd]]); contexts.append(sent[pos[fwd] + off])
                bwd = reach[pos + off] >= off
                centers.append(sent[pos[bwd] + off]); contexts.append(sent[pos[bwd]])
        c, o = np.concatenate(centers), np.concatenate(contexts)
        perm = rng.permutation(len(c))
        return c[perm], o[perm]

    est_total = None
    seen = 0
    for _ in range(epochs):
        centers, contexts = epoch_pairs()
        if est_total is None:
            est_total = len(centers) * epochs
        for start in range(0, len(centers), batch_pairs):
            c = centers[start:start + batch_pairs]
            o = contexts[start:start + batch_pairs]
            alpha = max(lr * (1.0 - seen / est_total), lr * 1e-4)
            seen += len(c)
            noise_ids = np.searchsorted(noise_cdf, rng.random((len(c), negatives)))
            noise_ids = np.minimum(noise_ids, n_vocab - 1)
            targets = np.concatenate([o[:, None], noise_ids], axis=1)           # [b, 1+neg]
            labels = np.zeros(targets.shape); labels[:, 0] = 1.0
            v_c = w_in[c]                                                         # [b, dim]
            v_t = w_out[targets]                                                  # [b, 1+neg, dim]
            score = 1.0 / (1.0 + np.exp(-np.einsum("bd,bkd->bk", v_c, v_t)))
            g = (labels - score) * alpha                                          # ascent direction
            grad_c = np.einsum("bk,bkd->bd", g, v_t)
            grad_t = g[:, :, None] * v_c[:, None, :]
            np.add.at(w_out, targets.reshape(-1), grad_t.reshape(-1, dim))
            np.add.at(w_in, c, grad_c)
    w_in[PAD] = 0.0
    return w_in


# ---------------------------------------------------------------------------
# character convolution


def char_ids(word: str, max_chars: int = 20) -> list[int]:
    return [CHAR_INDEX.get(ch, CHAR_UNK) for ch in word[:max_chars]]


def vocabulary_char_matrix(vocab: Vocabulary, min_width: int, max_chars: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Character ids per vocabulary entry, left-padded to ``min_width``.

    Returns ``(ids [V, L], effective lengths [V])``; positions beyond the
    effective length are PAD and never enter a convolution window.
    """
    rows = []
    for token in vocab.tokens:
        ids = char_ids(token, max_chars)
        if len(ids) < min_width:
            ids = [CHAR_PAD] * (min_width - len(ids)) + ids
        rows.append(ids)
    width = max(len(r) for r in rows)
    mat = np.zeros((len(rows), width), dtype=np.int64)
    lengths = np.zeros(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        mat[i, : len(r)] = r
        lengths[i] = len(r)
    return mat, lengths


class CharConv(nn.Module):
    """Per-window convolution over character vectors followed by max-over-time."""

    def __init__(self, char_dim: int = 16, filters: int = 50, windows: Sequence[int] = (3, 4, 5),
                 init_scale: float = 0.08, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.windows = tuple(windows)
        self.filters = filters

        def uniform(*shape):
            return nn.Parameter((torch.rand(*shape, generator=generator, dtype=dtype) * 2 - 1) * init_scale)

        self.char_table = uniform(ALPHABET_SIZE, char_dim)
        with torch.no_grad():
            self.char_table[CHAR_PAD] = 0.0
        self.kernels = nn.ParameterList([uniform(w * char_dim, filters) for w in self.windows])
        self.biases = nn.ParameterList([nn.Parameter(torch.zeros(filters, dtype=dtype)) for _ in self.windows])

    @property
    def out_dim(self) -> int:
        return self.filters * len(self.windows)

    def forward(self, chars: Tensor, lengths: Tensor) -> Tensor:
        """``chars [N, L]`` with effective ``lengths [N]`` -> ``[N, filters * len(windows)]``."""
        emb = self.char_table[chars]                                   # [N, L, c]
        n, width, c = emb.shape
        pools = []
        for w, kernel, bias in zip(self.windows, self.kernels, self.biases):
            n_pos = width - w + 1
            windows = emb.unfold(1, w, 1)                              # [N, n_pos, c, w]
            windows = windows.transpose(2, 3).reshape(n, n_pos, w * c)
            conv = windows @ kernel + bias                             # [N, n_pos, F]
            valid = torch.arange(n_pos, device=chars.device)[None, :] + w <= lengths[:, None]
            pools.append(masked_max(conv, valid[:, :, None], dim=1))
        return torch.cat(pools, dim=-1)


def char_embed(word: str, conv: CharConv, max_chars: int = 20) -> Tensor:
    """150-d (at defaults) character feature vector of a single word."""
    ids = char_ids(word, max_chars)
    width = max(conv.windows)
    if len(ids) < width:
        ids = [CHAR_PAD] * (width - len(ids)) + ids
    chars = torch.tensor([ids], dtype=torch.long)
    return conv(chars, torch.tensor([len(ids)]))[0]


class Embedder(nn.Module):
    """Frozen word tables plus trainable (by default) character convolution."""

    def __init__(self, vocab: Vocabulary, pretrained: np.ndarray, corpus: np.ndarray, conv: CharConv,
                 max_chars: int = 20, dtype: torch.dtype = torch.float64, freeze_char_conv: bool = False):
        super().__init__()
        if pretrained.shape[0] != len(vocab) or corpus.shape[0] != len(vocab):
            raise ValueError("word tables must have one row per vocabulary entry")
        words = np.concatenate([pretrained, corpus], axis=1)
        words[PAD] = 0.0
        self.register_buffer("word_table", torch.as_tensor(words, dtype=dtype))
        mat, lengths = vocabulary_char_matrix(vocab, max(conv.windows), max_chars)
        self.register_buffer("char_ids", torch.as_tensor(mat))
        self.register_buffer("char_lengths", torch.as_tensor(lengths))
        self.conv = conv
        self.word_dims = (pretrained.shape[1], corpus.shape[1])
        if freeze_char_conv:
            for p in self.conv.parameters():
                p.requires_grad_(False)

    @property
    def out_dim(self) -> int:
        return sum(self.word_dims) + self.conv.out_dim

    def forward(self, ids: Tensor) -> Tensor:
        """``ids [...]`` -> ``[..., pretrained + corpus + char]``; PAD maps to zeros."""
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.word_table.shape[0]):
            raise IdOutOfRange(f"token id outside [0, {self.word_table.shape[0]})")
        uniq, inverse = torch.unique(ids, return_inverse=True)
        chars = self.conv(self.char_ids[uniq], self.char_lengths[uniq])
        feats = torch.cat([self.word_table[uniq], chars], dim=-1)
        feats = feats * (uniq != PAD).to(feats.dtype)[:, None]
        return feats[inverse]


def embed_tokens(ids: Tensor, embedder: Embedder) -> Tensor:
    return embedder(ids)
