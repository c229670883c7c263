"""Synthetic dialogues for the learning and sanity checks.

``overlap_samples`` plants a learnable signal: the true response reuses words
from the latest utterance and the knowledge, while negatives draw from a
disjoint word pool. ``exchangeable_samples`` draws every candidate from one
distribution so no scorer can beat chance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .corpus import Sample, TokenizedBatch, Vocabulary, build_vocabulary, encode_samples, sample_token_streams, tokenize
from .embed import train_skipgram
from .model import MatchingNetwork


def _words(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i}" for i in range(n)]


def overlap_samples(n: int = 32, n_candidates: int = 5, seed: int = 0, tokens: int = 4,
                    utterances: int = 2, knowledge: int = 2, n_words: int = 24) -> list[Sample]:
    rng = np.random.default_rng(seed)
    topic, filler = _words("t", n_words), _words("f", n_words)

    def sentence(pool):
        return " ".join(rng.choice(pool, tokens))

    out = []
    for _ in range(n):
        context = [sentence(topic) for _ in range(utterances)]
        facts = [sentence(topic) for _ in range(knowledge)]
        shared = context[-1].split()[: tokens // 2] + facts[0].split()[: tokens - tokens // 2]
        truth = " ".join(rng.permutation(shared))
        negatives = [sentence(filler) for _ in range(n_candidates - 1)]
        label = int(rng.integers(n_candidates))
        candidates = negatives[:label] + [truth] + negatives[label:]
        out.append(Sample(context, facts, candidates, label))
    return out


def exchangeable_samples(n: int = 500, n_candidates: int = 20, seed: int = 0, tokens: int = 4,
                         utterances: int = 2, knowledge: int = 2, n_words: int = 40) -> list[Sample]:
    rng = np.random.default_rng(seed)
    pool = _words("w", n_words)

    def sentence():
        return " ".join(rng.choice(pool, tokens))

    return [Sample([sentence() for _ in range(utterances)], [sentence() for _ in range(knowledge)],
                   [sentence() for _ in range(n_candidates)], int(rng.integers(n_candidates)))
            for _ in range(n)]


@dataclass
class SyntheticSetup:
    samples: list[Sample]
    vocab: Vocabulary
    pretrained: np.ndarray
    corpus: np.ndarray
    data: TokenizedBatch

    def model(self, config: ModelConfig) -> MatchingNetwork:
        return MatchingNetwork(config, self.vocab, self.pretrained, self.corpus)


def build_setup(samples: Sequence[Sample], config: ModelConfig, seed: int = 0) -> SyntheticSetup:
    """Vocabulary, a seeded random stand-in for pretrained vectors, and skip-gram corpus vectors."""
    samples = list(samples)
    vocab = build_vocabulary(sample_token_streams(samples))
    rng = np.random.default_rng(seed)
    pretrained = rng.normal(scale=0.5, size=(len(vocab), config.pretrained_dim))
    sentences = [tokenize(t) for s in samples for t in (*s.context, *s.knowledge)]
    corpus = train_skipgram(sentences, vocab, config.corpus_dim, window=2, negatives=3, epochs=2, seed=seed)
    return SyntheticSetup(samples, vocab, pretrained, corpus, encode_samples(samples, vocab, config.limits))
