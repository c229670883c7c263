"""Raw dataset files -> samples, vocabulary, embedding tables and cached batches."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .corpus import (Dialogue, HashMismatch, Sample, TokenizedBatch, Vocabulary, build_vocabulary, cmudog_samples,
                     corpus_statistics, encode_samples, load_cache, load_cached_samples, parse_cmudog,
                     parse_persona_chat, persona_samples, sample_token_streams, save_cache, tokenize)
from .embed import load_word_vectors, save_word_vectors, train_skipgram

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
VOCAB_FILE = "vocab.txt"
PRETRAINED_FILE = "pretrained.vec"
CORPUS_FILE = "corpus.vec"
MANIFEST_FILE = "manifest.json"


def data_root() -> Path:
    return Path(os.environ.get("DCK_DATA_DIR", "data"))


def resolve_data_dir(config: ModelConfig) -> Path:
    """Preprocessed-data directory: ``data_dir`` when set, else ``$DCK_DATA_DIR/<dataset>``."""
    return Path(config.data_dir) if config.data_dir else data_root() / config.dataset


def raw_split_path(raw_dir: str | Path, dataset: str, split: str) -> Path:
    raw_dir = Path(raw_dir)
    if dataset == "persona_original":
        return raw_dir / f"{split}_self_original.txt"
    if dataset == "persona_revised":
        return raw_dir / f"{split}_self_revised.txt"
    if dataset == "cmudog":
        return raw_dir / f"{split}.jsonl"
    raise ValueError(f"unknown dataset {dataset!r}")


def load_dialogues(raw_dir: str | Path, dataset: str, split: str) -> list[Dialogue]:
    path = raw_split_path(raw_dir, dataset, split)
    with open(path, encoding="utf-8") as f:
        if dataset == "cmudog":
            return parse_cmudog(line for line in f if line.strip())
        return parse_persona_chat(f)


def dataset_statistics(raw_dir: str | Path, dataset: str) -> dict[str, dict]:
    """Conversation and turn counts per split present under ``raw_dir``."""
    return {split: corpus_statistics(load_dialogues(raw_dir, dataset, split)) for split in SPLITS
            if raw_split_path(raw_dir, dataset, split).exists()}


def build_samples(dialogues: list[Dialogue], dataset: str, n_candidates: int, seed: int) -> list[Sample]:
    if dataset == "cmudog":
        return cmudog_samples(dialogues, n_candidates, seed)
    return persona_samples(dialogues, n_candidates, seed)


def preprocess(dataset: str, raw_dir: str | Path, out_dir: str | Path, config: ModelConfig | None = None,
               vectors: str | Path | None = None, max_dialogues: int | None = None) -> dict:
    """Parse every split, fit the vocabulary and skip-gram vectors on train, and write caches.

    Without ``vectors`` the pretrained slice is all zeros.
    """
    config = config or ModelConfig.for_dataset(dataset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples: dict[str, list[Sample]] = {}
    stats = {}
    train_dialogues: list[Dialogue] = []
    for split in SPLITS:
        if not raw_split_path(raw_dir, dataset, split).exists():
            logger.warning("no %s split under %s", split, raw_dir)
            continue
        dialogues = load_dialogues(raw_dir, dataset, split)[:max_dialogues]
        stats[split] = corpus_statistics(dialogues)
        samples[split] = build_samples(dialogues, dataset, config.n_candidates, config.seed)
        if split == "train":
            train_dialogues = dialogues
    if "train" not in samples:
        raise FileNotFoundError(f"training split missing under {raw_dir}")

    vocab = build_vocabulary(sample_token_streams(samples["train"]), config.min_freq)
    vocab.save(out / VOCAB_FILE)
    if vectors:
        result = load_word_vectors(vectors, vocab, config.pretrained_dim)
        pretrained = result.table
        logger.info("pretrained vectors cover %d of %d tokens", result.found, len(vocab))
    else:
        pretrained = np.zeros((len(vocab), config.pretrained_dim))
    sentences = [tokenize(t.text) for d in train_dialogues for t in d.turns]
    sentences += [tokenize(t.response) for d in train_dialogues for t in d.turns if t.response]
    sentences += [tokenize(k) for d in train_dialogues for k in (*d.knowledge, *d.documents)]
    corpus = train_skipgram(sentences, vocab, config.corpus_dim, config.skipgram_window,
                            config.skipgram_negatives, config.skipgram_epochs, config.skipgram_lr, config.seed)
    save_word_vectors(out / PRETRAINED_FILE, pretrained, vocab)
    save_word_vectors(out / CORPUS_FILE, corpus, vocab)

    for split, split_samples in samples.items():
        save_cache(out, split, encode_samples(split_samples, vocab, config.limits), config.limits, vocab.hash,
                   split_samples)
    manifest = {"dataset": dataset, "vocab_hash": vocab.hash, "vocab_size": len(vocab),
                "limits": config.limits.to_dict(), "statistics": stats,
                "samples": {s: len(v) for s, v in samples.items()}}
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    return manifest


@dataclass
class Prepared:
    directory: Path
    vocab: Vocabulary
    pretrained: np.ndarray
    corpus: np.ndarray

    def split(self, name: str, config: ModelConfig) -> TokenizedBatch:
        return load_cache(self.directory, name, self.vocab.hash, config.limits)

    def samples(self, name: str) -> list[Sample]:
        return load_cached_samples(self.directory, name)


def load_prepared(directory: str | Path, config: ModelConfig, expected_vocab_hash: str | None = None) -> Prepared:
    directory = Path(directory)
    vocab = Vocabulary.load(directory / VOCAB_FILE)
    if expected_vocab_hash is not None and vocab.hash != expected_vocab_hash:
        raise HashMismatch(f"data vocabulary {vocab.hash} != checkpoint vocabulary {expected_vocab_hash}")
    pretrained = load_word_vectors(directory / PRETRAINED_FILE, vocab, config.pretrained_dim, strict=True).table
    corpus = load_word_vectors(directory / CORPUS_FILE, vocab, config.corpus_dim, strict=True).table
    return Prepared(directory, vocab, pretrained, corpus)
