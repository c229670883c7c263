"""Training loop, ranking metrics, evaluation reports and checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import ModelConfig
from .corpus import HashMismatch, Limits, Sample, TokenizedBatch, Vocabulary, encode_sample, make_batches, utterance_counts
from .model import MatchingNetwork, batch_loss
from .numerics import AdamHyper, ParameterStore, adam_step

logger = logging.getLogger(__name__)

RECALL_KS = (1, 2, 5)
BUCKETS = {
    "persona": ((1, 3), (4, 7), (8, 11), (12, 15)),
    "cmudog": ((1, 2), (3, 4), (5, 6), (7, 8)),
}


class DivergedLoss(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# metrics


def true_rank(logits: np.ndarray, label: int) -> int:
    """1-based rank of the true candidate; ties go to the lower candidate index."""
    logits = np.asarray(logits)
    target = logits[label]
    ahead = np.sum(logits > target) + np.sum(logits[:label] == target)
    return int(ahead) + 1


def recall_at_n_k(logits, label: int, k: int) -> int:
    if k > len(logits):
        raise ValueError(f"k={k} exceeds the {len(logits)} candidates")
    return int(true_rank(logits, label) <= k)


def recall_matrix(logits: np.ndarray, labels: np.ndarray, ks: Sequence[int]) -> np.ndarray:
    """``[N, len(ks)]`` 0/1 hits."""
    logits = np.asarray(logits)
    idx = np.arange(len(labels))
    target = logits[idx, labels][:, None]
    positions = np.arange(logits.shape[1])[None, :]
    ahead = (logits > target).sum(1) + ((logits == target) & (positions < labels[:, None])).sum(1)
    ranks = ahead + 1
    return np.stack([(ranks <= k).astype(np.int64) for k in ks], axis=1)


@dataclass
class MetricsReport:
    recall: dict[str, float]
    n_samples: int
    n_candidates: int
    mean_loss: float | None = None
    buckets: dict[str, dict] | None = None
    config_hash: str = ""
    ablations: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        out = {
            "recall": dict(self.recall),
            "n_samples": self.n_samples,
            "n_candidates": self.n_candidates,
            "mean_loss": self.mean_loss,
            "config_hash": self.config_hash,
            "ablations": list(self.ablations),
            "wall_time": self.wall_time,
        }
        if self.buckets is not None:
            out["buckets"] = self.buckets
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def __getitem__(self, key: str) -> float:
        return self.recall[key]


def metrics_from_logits(logits: np.ndarray, labels: np.ndarray, ks: Sequence[int] = RECALL_KS,
                        with_loss: bool = True) -> MetricsReport:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[1] if logits.ndim == 2 else 0
    ks = [k for k in ks if k <= n]
    hits = recall_matrix(logits, labels, ks) if len(labels) else np.zeros((0, len(ks)))
    recall = {f"R{n}@{k}": float(hits[:, i].mean()) if len(labels) else 0.0 for i, k in enumerate(ks)}
    loss = None
    if with_loss and len(labels):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(log_z - shifted[np.arange(len(labels)), labels]))
    return MetricsReport(recall, len(labels), n, loss)


def bucket_index(counts: np.ndarray, dataset: str) -> np.ndarray:
    """Bucket of each sample by real-utterance count; overflow goes to the last bucket."""
    family = "cmudog" if dataset == "cmudog" else "persona"
    uppers = np.array([hi for _, hi in BUCKETS[family]])
    idx = np.searchsorted(uppers, np.asarray(counts), side="left")
    return np.minimum(idx, len(uppers) - 1)


def bucket_labels(dataset: str) -> list[str]:
    family = "cmudog" if dataset == "cmudog" else "persona"
    return [f"{lo}-{hi}" for lo, hi in BUCKETS[family]]


def bucket_by_context_length(logits: np.ndarray, data: TokenizedBatch, dataset: str) -> dict[str, dict]:
    assignment = bucket_index(utterance_counts(data), dataset)
    out = {}
    for b, name in enumerate(bucket_labels(dataset)):
        sel = assignment == b
        rep = metrics_from_logits(logits[sel], data.labels[sel], with_loss=False)
        out[name] = {"count": int(sel.sum()), "recall": rep.recall}
    return out


# ---------------------------------------------------------------------------
# prediction / evaluation


def predict(model: MatchingNetwork, data: TokenizedBatch, batch_size: int = 32) -> np.ndarray:
    model.eval()
    chunks = []
    with torch.no_grad():
        for batch in make_batches(data, batch_size):
            chunks.append(model.forward_batch(batch).logits.double().numpy())
    n = data.candidates.shape[1]
    return np.concatenate(chunks) if chunks else np.zeros((0, n))


def evaluate(model: MatchingNetwork, data: TokenizedBatch, buckets: bool = False,
             batch_size: int | None = None) -> MetricsReport:
    start = time.perf_counter()
    cfg = model.config
    logits = predict(model, data, batch_size or max(cfg.batch_size, 32))
    report = metrics_from_logits(logits, data.labels)
    if buckets:
        report.buckets = bucket_by_context_length(logits, data, cfg.dataset)
    report.config_hash = cfg.hash
    report.ablations = cfg.ablations.active()
    report.wall_time = time.perf_counter() - start
    return report


def random_baseline(data: TokenizedBatch, seed: int = 0) -> MetricsReport:
    """Uniformly random scores; R_n@k should sit near k / n."""
    rng = np.random.default_rng(seed)
    return metrics_from_logits(rng.random(data.candidates.shape[:2]), data.labels, with_loss=False)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_score: float
    store: ParameterStore


def _key_metric(report: MetricsReport) -> float:
    return next(iter(report.recall.values()))


def train(model: MatchingNetwork, train_data: TokenizedBatch, val_data: TokenizedBatch | None = None,
          stop_at: float | None = None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on the mean candidate cross-entropy with early stopping on validation R@1.

    The best-scoring parameters are restored into ``model`` on return.
    ``stop_at`` ends training once validation R@1 reaches that value.
    """
    cfg = model.config
    val_data = train_data if val_data is None else val_data
    store = ParameterStore.from_module(model)
    hyper = AdamHyper(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    history: list[dict] = []
    best_score, best_epoch, best_state, stale = -1.0, 0, None, 0

    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for batch in make_batches(train_data, cfg.batch_size, seed=[cfg.seed, epoch]):
            loss = batch_loss(model.forward_batch(batch).logits, torch.as_tensor(batch.labels))
            if not torch.isfinite(loss):
                raise DivergedLoss(f"epoch {epoch}: non-finite loss {loss.item()} after {count} samples")
            grads = torch.autograd.grad(loss, store.tensors(), allow_unused=True)
            adam_step(store, dict(zip(store.names(), grads)), hyper)
            total += loss.item() * len(batch)
            count += len(batch)

        report = evaluate(model, val_data)
        score = _key_metric(report)
        record = {"epoch": epoch, "train_loss": total / max(count, 1), "val_loss": report.mean_loss,
                  **{f"val_{k}": v for k, v in report.recall.items()},
                  "seconds": time.perf_counter() - start}
        history.append(record)
        logger.info("epoch %d loss %.4f val %s", epoch, record["train_loss"], report.recall)
        if on_epoch is not None:
            on_epoch(record)

        if score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
        if stop_at is not None and score >= stop_at:
            break
        if stale >= cfg.patience:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best_score, store)


def loss_curve(history: list[dict]) -> list[float]:
    return [h["train_loss"] for h in history]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: MatchingNetwork, vocab: Vocabulary, history: list[dict] | None = None) -> None:
    torch.save({
        "config": model.config.to_dict(),
        "config_hash": model.config.hash,
        "vocab_tokens": vocab.tokens,
        "vocab_hash": vocab.hash,
        "state_dict": model.state_dict(),
        "history": history or [],
    }, path)


def load_checkpoint(path: str | Path) -> tuple[MatchingNetwork, Vocabulary, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig.from_dict(blob["config"])
    if config.hash != blob["config_hash"]:
        raise HashMismatch(f"checkpoint config hash {blob['config_hash']} != recomputed {config.hash}")
    vocab = Vocabulary(blob["vocab_tokens"], {})
    if vocab.hash != blob["vocab_hash"]:
        raise HashMismatch("checkpoint vocabulary does not match its recorded hash")
    n = len(vocab)
    model = MatchingNetwork(config, vocab, np.zeros((n, config.pretrained_dim)), np.zeros((n, config.corpus_dim)))
    model.load_state_dict(blob["state_dict"])
    return model, vocab, blob


# ---------------------------------------------------------------------------
# inspection


def export_selection_weights(model: MatchingNetwork, sample: Sample, vocab: Vocabulary) -> dict:
    """Selection weights, post-selection weights and logits for one sample."""
    limits: Limits = model.config.limits
    enc = encode_sample(sample, vocab, limits)
    model.eval()
    with torch.no_grad():
        out = model.forward_batch(enc)
    ctx_texts = sample.context[-limits.max_utterances:]
    know_texts = sample.knowledge[: limits.max_knowledge]
    ctx_real = enc.context_mask[0].any(-1)[: len(ctx_texts)]
    know_real = enc.knowledge_mask[0].any(-1)[: len(know_texts)]

    def pick(name, real):
        if name not in out.details:
            return None
        return out.details[name][0][: len(real)][torch.as_tensor(real)].tolist()

    gamma = out.details.get("gamma")
    gamma_rows = None if gamma is None else [row[: len(know_real)][torch.as_tensor(know_real)].tolist()
                                             for row in gamma[0]]
    return {
        "context": [t for t, r in zip(ctx_texts, ctx_real) if r],
        "context_weights": pick("context_weights", ctx_real),
        "context_per_hop": pick("context_per_hop", ctx_real),
        "knowledge": [t for t, r in zip(know_texts, know_real) if r],
        "knowledge_weights": pick("knowledge_weights", know_real),
        "knowledge_per_hop": pick("knowledge_per_hop", know_real),
        "gamma": None if gamma_rows is None else gamma_rows[sample.label],
        "gamma_per_candidate": gamma_rows,
        "candidates": list(sample.candidates),
        "logits": out.logits[0].tolist(),
        "label": sample.label,
    }
