"""Dialogue corpora: parsing, negative sampling, vocabulary and padded batches."""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
CACHE_VERSION = 1

_PERSONA_LINE = re.compile(r"^(\d+) (.*)$")
_TOKEN = re.compile(r"[^\W_]+|[^\w\s]|_", re.UNICODE)
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


class MalformedLine(ValueError):
    pass


class MalformedRecord(ValueError):
    pass


class InsufficientPool(ValueError):
    pass


class HashMismatch(ValueError):
    pass


@dataclass
class Turn:
    speaker: str
    text: str
    response: str | None = None
    candidates: list[str] = field(default_factory=list)
    section: int | None = None


@dataclass
class Dialogue:
    knowledge: list[str]
    turns: list[Turn]
    documents: list[str] = field(default_factory=list)
    dialogue_id: str = ""


@dataclass
class Sample:
    context: list[str]
    knowledge: list[str]
    candidates: list[str]
    label: int

    def __post_init__(self):
        if not 0 <= self.label < len(self.candidates):
            raise ValueError(f"label {self.label} outside [0, {len(self.candidates)})")


@dataclass(frozen=True)
class Limits:
    max_utterances: int = 15
    max_knowledge: int = 5
    max_tokens: int = 20
    n_candidates: int = 20

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


PERSONA_LIMITS = Limits(15, 5, 20, 20)
CMUDOG_LIMITS = Limits(8, 20, 40, 20)


# ---------------------------------------------------------------------------
# parsing


def parse_persona_chat(lines: Iterable[str]) -> list[Dialogue]:
    """Parse the numbered-line Persona-Chat format.

    ``N your persona: <sentence>`` lines collect knowledge, and
    ``N <partner>\\t<response>\\t\\t<cand_1>|...|<cand_k>`` lines are
    exchanges. An index that does not increase starts a new episode.
    """
    dialogues: list[Dialogue] = []
    current: Dialogue | None = None
    last_index = 0
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        m = _PERSONA_LINE.match(line)
        if m is None:
            raise MalformedLine(f"line {lineno}: missing leading index: {line[:60]!r}")
        index, body = int(m.group(1)), m.group(2)
        if current is None or index <= last_index:
            current = Dialogue(knowledge=[], turns=[], dialogue_id=str(len(dialogues)))
            dialogues.append(current)
        last_index = index

        if "\t" not in body:
            if body.startswith("your persona:"):
                current.knowledge.append(body[len("your persona:"):].strip())
                continue
            if body.startswith("partner's persona:"):
                continue
            raise MalformedLine(f"line {lineno}: exchange line without tab-separated fields")
        fields = body.split("\t")
        if len(fields) < 2 or not fields[1].strip():
            raise MalformedLine(f"line {lineno}: missing response field")
        candidates = fields[3].split("|") if len(fields) > 3 and fields[3] else []
        current.turns.append(Turn("partner", fields[0], response=fields[1], candidates=candidates))
    return [d for d in dialogues if d.turns]


def _section_text(section) -> str:
    if isinstance(section, str):
        return section
    if isinstance(section, dict):
        parts = []
        for key, value in section.items():
            if isinstance(value, list):
                value = " ".join(str(v) for v in value)
            parts.append(f"{key} : {value}.")
        return " ".join(parts)
    if isinstance(section, list):
        return " ".join(str(s) for s in section)
    raise MalformedRecord(f"unsupported document section type {type(section).__name__}")


def parse_cmudog(records: Iterable[str | dict], min_turns: int = 4) -> list[Dialogue]:
    """Parse CMUDoG-style conversation records (one JSON object per line).

    Each record holds ``documents`` (ordered sections) and ``turns``, a list
    of ``{"speaker", "text", "section"}`` objects. Consecutive messages from
    the same speaker are merged into one turn, and conversations with fewer
    than ``min_turns`` turns afterwards are dropped.
    """
    dialogues = []
    for n, record in enumerate(records):
        if isinstance(record, str):
            if not record.strip():
                continue
            try:
                record = json.loads(record)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"record {n}: {exc}") from exc
        if not isinstance(record, dict):
            raise MalformedRecord(f"record {n}: expected an object")
        docs = record.get("documents", record.get("docs"))
        turns = record.get("turns", record.get("history"))
        if docs is None or turns is None:
            raise MalformedRecord(f"record {n}: needs 'documents' and 'turns'")
        documents = [_section_text(s) for s in docs]

        merged: list[Turn] = []
        for t in turns:
            try:
                speaker = str(t.get("speaker", t.get("uid")))
                text = str(t["text"]).strip()
                section = t.get("section", t.get("docIdx"))
            except (KeyError, AttributeError) as exc:
                raise MalformedRecord(f"record {n}: bad turn {t!r}") from exc
            section = None if section is None else int(section)
            if section is not None and not 0 <= section < len(documents):
                raise MalformedRecord(f"record {n}: section index {section} out of range")
            if merged and merged[-1].speaker == speaker:
                merged[-1].text = f"{merged[-1].text} {text}".strip()
                merged[-1].section = section if section is not None else merged[-1].section
            else:
                merged.append(Turn(speaker, text, section=section))
        if len(merged) < min_turns:
            continue
        dialogues.append(Dialogue(knowledge=[], turns=merged, documents=documents,
                                  dialogue_id=str(record.get("id", record.get("conversation_id", n)))))
    return dialogues


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_END.split(text) if s.strip()]


def corpus_statistics(dialogues: Sequence[Dialogue]) -> dict:
    n_turns = sum(len(d.turns) for d in dialogues)
    return {"conversations": len(dialogues), "turns": n_turns}


# ---------------------------------------------------------------------------
# samples


def sample_negatives(truth: str, pool: Sequence[str], n: int, seed, unique: bool = False) -> tuple[list[str], int]:
    """Draw ``n - 1`` distinct negatives uniformly without replacement and
    shuffle them together with ``truth``.

    Returns the candidate list and the position of ``truth`` in it. Pass
    ``unique=True`` when ``pool`` is already free of duplicates to skip the
    dedup pass.
    """
    rng = np.random.default_rng(seed)
    if not unique:
        pool = list(dict.fromkeys(pool))
    if len(pool) < n:
        available = len(pool) - (truth in pool)
        if available < n - 1:
            raise InsufficientPool(f"need {n - 1} negatives, pool offers {available}")
    # n distinct draws, minus the truth if it came up, is a uniform (n-1)-subset of the others
    size = min(n, len(pool))
    picks = [pool[i] for i in rng.choice(len(pool), size=size, replace=False)]
    negatives = [p for p in picks if p != truth][: n - 1]
    candidates = [truth] + negatives
    order = rng.permutation(n)
    shuffled = [candidates[i] for i in order]
    return shuffled, int(np.flatnonzero(order == 0)[0])


def persona_samples(dialogues: Sequence[Dialogue], n_candidates: int = 20, seed: int = 0) -> list[Sample]:
    """One sample per exchange; context is the full history up to the partner turn."""
    pool = list(dict.fromkeys(t.response for d in dialogues for t in d.turns))
    samples = []
    for di, d in enumerate(dialogues):
        history: list[str] = []
        for ti, turn in enumerate(d.turns):
            context = history + [turn.text]
            truth = turn.response
            negatives = [c for c in dict.fromkeys(turn.candidates) if c != truth][: n_candidates - 1]
            if len(negatives) < n_candidates - 1:
                extra, _ = sample_negatives(truth, pool, n_candidates + len(negatives), (seed, di, ti), unique=True)
                taken = set(negatives)
                negatives += [c for c in extra if c != truth and c not in taken][: n_candidates - 1 - len(negatives)]
            rng = np.random.default_rng((seed, di, ti))
            candidates = [truth] + negatives
            order = rng.permutation(n_candidates)
            samples.append(Sample(context, list(d.knowledge), [candidates[i] for i in order],
                                  int(np.flatnonzero(order == 0)[0])))
            history = context + [truth]
    return samples


def cmudog_samples(dialogues: Sequence[Dialogue], n_candidates: int = 20, seed: int = 0) -> list[Sample]:
    """One sample per turn after the first; negatives come from the same split.

    Knowledge is the document section the response turn points at, split
    into sentences.
    """
    pool = list(dict.fromkeys(t.text for d in dialogues for t in d.turns))
    samples = []
    for di, d in enumerate(dialogues):
        texts = [t.text for t in d.turns]
        for ti in range(1, len(d.turns)):
            section = d.turns[ti].section
            if section is None:
                section = d.turns[ti - 1].section
            knowledge = split_sentences(d.documents[section]) if section is not None and d.documents else []
            candidates, label = sample_negatives(texts[ti], pool, n_candidates, (seed, di, ti), unique=True)
            samples.append(Sample(texts[:ti], knowledge, candidates, label))
    return samples


# ---------------------------------------------------------------------------
# vocabulary


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on whitespace with punctuation marks as their own tokens."""
    return _TOKEN.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    freqs: dict[str, int]

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids if i != PAD]

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    def save(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(f"{tok}\t{self.freqs.get(tok, 0)}\n")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        tokens, freqs = [], {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                tok, freq = line.rstrip("\n").split("\t")
                tokens.append(tok)
                freqs[tok] = int(freq)
        return cls(tokens, freqs)


def build_vocabulary(token_streams: Iterable[Iterable[str]], min_freq: int = 1) -> Vocabulary:
    """Frequency-descending, then lexicographic; PAD and UNK are ids 0 and 1."""
    counts = Counter()
    for stream in token_streams:
        counts.update(stream)
    counts.pop(PAD_TOKEN, None)
    counts.pop(UNK_TOKEN, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept, {t: counts[t] for t in kept})


def sample_token_streams(samples: Iterable[Sample]) -> Iterator[list[str]]:
    """Each distinct text once; candidate lists repeat responses heavily."""
    seen = set()
    for s in samples:
        for text in (*s.context, *s.knowledge, *s.candidates):
            if text not in seen:
                seen.add(text)
                yield tokenize(text)


# ---------------------------------------------------------------------------
# encoding and batching


@dataclass
class TokenizedBatch:
    context: np.ndarray      # [batch, n_c, l]
    knowledge: np.ndarray    # [batch, n_k, l]
    candidates: np.ndarray   # [batch, n, l]
    labels: np.ndarray       # [batch]

    @property
    def context_mask(self) -> np.ndarray:
        return self.context != PAD

    @property
    def knowledge_mask(self) -> np.ndarray:
        return self.knowledge != PAD

    @property
    def candidate_mask(self) -> np.ndarray:
        return self.candidates != PAD

    def __len__(self) -> int:
        return len(self.labels)

    def select(self, idx) -> "TokenizedBatch":
        return TokenizedBatch(self.context[idx], self.knowledge[idx], self.candidates[idx], self.labels[idx])

    @classmethod
    def stack(cls, parts: Sequence["TokenizedBatch"]) -> "TokenizedBatch":
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("context", "knowledge", "candidates", "labels")))


def _encode_text(text: str, vocab: Vocabulary, max_tokens: int) -> np.ndarray:
    ids = vocab.ids(tokenize(text))[-max_tokens:]
    row = np.zeros(max_tokens, dtype=np.int64)
    row[: len(ids)] = ids
    return row


def _encode_block(texts: Sequence[str], vocab: Vocabulary, n_rows: int, max_tokens: int) -> np.ndarray:
    block = np.zeros((n_rows, max_tokens), dtype=np.int64)
    for i, text in enumerate(texts):
        block[i] = _encode_text(text, vocab, max_tokens)
    return block


def encode_sample(sample: Sample, vocab: Vocabulary, limits: Limits) -> TokenizedBatch:
    """Encode one sample as a batch of size 1.

    Tokens: keep the last ``max_tokens``. Context: keep the latest
    ``max_utterances``. Knowledge: keep the first ``max_knowledge``.
    """
    if len(sample.candidates) != limits.n_candidates:
        raise ValueError(f"sample has {len(sample.candidates)} candidates, limits expect {limits.n_candidates}")
    l = limits.max_tokens
    context = sample.context[-limits.max_utterances:]
    knowledge = sample.knowledge[: limits.max_knowledge]
    return TokenizedBatch(
        _encode_block(context, vocab, limits.max_utterances, l)[None],
        _encode_block(knowledge, vocab, limits.max_knowledge, l)[None],
        _encode_block(sample.candidates, vocab, limits.n_candidates, l)[None],
        np.array([sample.label], dtype=np.int64),
    )


def encode_samples(samples: Sequence[Sample], vocab: Vocabulary, limits: Limits) -> TokenizedBatch:
    if not samples:
        l = limits.max_tokens
        return TokenizedBatch(np.zeros((0, limits.max_utterances, l), np.int64),
                              np.zeros((0, limits.max_knowledge, l), np.int64),
                              np.zeros((0, limits.n_candidates, l), np.int64),
                              np.zeros(0, np.int64))
    return TokenizedBatch.stack([encode_sample(s, vocab, limits) for s in samples])


def decode_block(block: np.ndarray, vocab: Vocabulary) -> list[list[str]]:
    """Token lists per row, dropping all-PAD rows."""
    return [vocab.decode(row) for row in block if (row != PAD).any()]


def make_batches(data: TokenizedBatch, batch_size: int, seed: int | None = None) -> Iterator[TokenizedBatch]:
    """Yield batches in a seeded shuffled order (input order when ``seed`` is None)."""
    n = len(data)
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        yield data.select(order[start:start + batch_size])


def utterance_counts(data: TokenizedBatch) -> np.ndarray:
    return data.context_mask.any(axis=2).sum(axis=1)


# ---------------------------------------------------------------------------
# preprocessed cache


def save_cache(directory: Path, split: str, data: TokenizedBatch, limits: Limits, vocab_hash: str,
               samples: Sequence[Sample] | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(directory / f"{split}.npz", context=data.context, knowledge=data.knowledge,
                        candidates=data.candidates, labels=data.labels)
    meta = {"format_version": CACHE_VERSION, "split": split, "limits": limits.to_dict(),
            "vocab_hash": vocab_hash, "n_samples": len(data)}
    (directory / f"{split}.meta.json").write_text(json.dumps(meta, indent=1))
    if samples is not None:
        with open(directory / f"{split}.samples.jsonl", "w", encoding="utf-8") as f:
            for s in samples:
                f.write(json.dumps({"context": s.context, "knowledge": s.knowledge,
                                    "candidates": s.candidates, "label": s.label}) + "\n")


def load_cache(directory: Path, split: str, vocab_hash: str, limits: Limits | None = None) -> TokenizedBatch:
    directory = Path(directory)
    meta = json.loads((directory / f"{split}.meta.json").read_text())
    if meta.get("format_version") != CACHE_VERSION:
        raise HashMismatch(f"cache format {meta.get('format_version')} != {CACHE_VERSION}")
    if meta["vocab_hash"] != vocab_hash:
        raise HashMismatch(f"cache vocabulary hash {meta['vocab_hash']} != expected {vocab_hash}")
    if limits is not None and meta["limits"] != limits.to_dict():
        raise HashMismatch(f"cache limits {meta['limits']} != configured {limits.to_dict()}")
    arrays = np.load(directory / f"{split}.npz")
    return TokenizedBatch(arrays["context"], arrays["knowledge"], arrays["candidates"], arrays["labels"])


def load_cached_samples(directory: Path, split: str) -> list[Sample]:
    with open(Path(directory) / f"{split}.samples.jsonl", encoding="utf-8") as f:
        return [Sample(**json.loads(line)) for line in f]
