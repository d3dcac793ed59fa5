"""Training and evaluation loops.

Determinism contract: the shuffle order of epoch e and its dropout stream
are derived from (seed, e) alone, so a run resumed from an epoch-k
checkpoint (parameters + optimizer moments) continues bit-exactly like an
uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .data import ManifestEntry, NormalizationSpec, decode_and_normalize
from .metrics import ConfusionMatrix, MetricsReport, compute_report, confusion
from .model import DViT, save_checkpoint
from .tensor import Tensor, no_grad

__all__ = ["TrainError", "TrainConfig", "RunLog", "train", "evaluate"]

# stream tags for per-epoch generators
_SHUFFLE, _DROPOUT = 0, 1


class TrainError(RuntimeError):
    """Empty splits, class mismatches, or aborted optimization."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    eval_every: int = 1
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics train)")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        expected = len(self.records) + 1
        if record.get("epoch") != expected:
            raise ValueError(f"epochs must be logged contiguously: expected "
                             f"{expected}, got {record.get('epoch')}")
        self.records.append(record)

    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    def dump_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "RunLog":
        log = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    log.append(json.loads(line))
        return log


def _epoch_rng(seed: int, epoch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, tag]))


def _class_ids(entries: Sequence[ManifestEntry]) -> dict[str, int]:
    return {name: i for i, name in enumerate(sorted({e.label for e in entries}))}


class _ImageCache:
    """Decoded-image cache keyed by path; decode order fixes determinism."""

    def __init__(self, spec: NormalizationSpec, dtype):
        self.spec = spec
        self.dtype = dtype
        self._store: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._store:
            self._store[path] = decode_and_normalize(path, self.spec).data.astype(self.dtype)
        return self._store[path]


def _batch(cache: _ImageCache, entries: Sequence[ManifestEntry],
           ids: dict[str, int]) -> tuple[Tensor, np.ndarray]:
    images = np.stack([cache.get(e.path) for e in entries])
    labels = np.array([ids[e.label] for e in entries], dtype=np.int64)
    return Tensor(images), labels


def _batch_slices(n: int, batch_size: int) -> list[slice]:
    """Contiguous batch slices; a trailing single sample joins the previous
    batch so batch statistics stay defined."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def train(model: DViT, entries: Sequence[ManifestEntry], cfg: TrainConfig,
          optimizer: Optional[nn.AdamW] = None, start_epoch: int = 0,
          log: Optional[RunLog] = None) -> tuple[DViT, RunLog]:
    """Optimize ``model`` on the train split of ``entries``.

    Keeps the best-validation-mean-accuracy checkpoint (ties go to the
    later epoch) alongside the last one when cfg.checkpoint_dir is set.
    Pass ``optimizer``/``start_epoch``/``log`` to resume from a checkpoint.
    """
    ids = _class_ids(entries)
    if len(ids) != model.cfg.num_classes:
        raise TrainError(f"manifest has {len(ids)} classes but the model "
                         f"expects {model.cfg.num_classes}")
    train_entries = [e for e in entries if e.split == "train"]
    if not train_entries:
        raise TrainError("train split is empty")
    missing = set(ids) - {e.label for e in train_entries}
    if missing:
        raise TrainError(f"classes absent from the train split: {sorted(missing)}")
    valid_entries = [e for e in entries if e.split == "valid"]

    spec = NormalizationSpec(size=model.cfg.input_size,
                             mean=cfg.normalization.mean, std=cfg.normalization.std)
    cache = _ImageCache(spec, model.dtype)
    if optimizer is None:
        optimizer = nn.AdamW(dict(model.named_parameters()), lr=cfg.lr,
                             betas=cfg.betas, eps=cfg.eps,
                             weight_decay=cfg.weight_decay)
    log = log if log is not None else RunLog()
    best_macc = max((r["valid"]["mean_accuracy"] for r in log.records
                     if r.get("valid")), default=-1.0)
    if cfg.checkpoint_dir:
        os.makedirs(cfg.checkpoint_dir, exist_ok=True)

    n = len(train_entries)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        started = time.monotonic()
        perm = _epoch_rng(cfg.seed, epoch, _SHUFFLE).permutation(n)
        drop_rng = _epoch_rng(cfg.seed, epoch, _DROPOUT)
        digest = hashlib.sha256(perm.astype(np.int64).tobytes()).hexdigest()[:16]

        loss_sum = 0.0
        seen = 0
        for b, sl in enumerate(_batch_slices(n, cfg.batch_size)):
            batch_entries = [train_entries[i] for i in perm[sl]]
            images, labels = _batch(cache, batch_entries, ids)
            logits = model(images, training=True, rng=drop_rng)
            loss = nn.cross_entropy(logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainError(f"non-finite loss {value} at epoch {epoch}, "
                                 f"batch {b}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += value * len(batch_entries)
            seen += len(batch_entries)

        record = {"epoch": epoch, "train_loss": loss_sum / seen,
                  "wall_time": time.monotonic() - started, "rng_digest": digest,
                  "valid": None}
        if valid_entries and epoch % cfg.eval_every == 0:
            report, _ = evaluate(model, entries, "valid",
                                 batch_size=cfg.batch_size, cache=cache)
            record["valid"] = report.__dict__
            if report.mean_accuracy >= best_macc and cfg.checkpoint_dir:
                best_macc = report.mean_accuracy
                save_checkpoint(os.path.join(cfg.checkpoint_dir, "best.ckpt"),
                                model, epoch=epoch, seed=cfg.seed,
                                optimizer=optimizer)
            best_macc = max(best_macc, report.mean_accuracy)
        log.append(record)
        if cfg.checkpoint_dir:
            save_checkpoint(os.path.join(cfg.checkpoint_dir, "last.ckpt"),
                            model, epoch=epoch, seed=cfg.seed, optimizer=optimizer)
    return model, log


def evaluate(model: DViT, entries: Sequence[ManifestEntry], split: str,
             batch_size: int = 16, normalization: Optional[NormalizationSpec] = None,
             cache: Optional[_ImageCache] = None,
             ) -> tuple[MetricsReport, ConfusionMatrix]:
    """Eval-mode metrics over one split; predictions are argmax logits."""
    ids = _class_ids(entries)
    if len(ids) != model.cfg.num_classes:
        raise TrainError(f"manifest has {len(ids)} classes but the model "
                         f"expects {model.cfg.num_classes}")
    chosen = [e for e in entries if e.split == split]
    if not chosen:
        raise TrainError(f"split {split!r} is empty")
    if cache is None:
        spec = normalization or NormalizationSpec(size=model.cfg.input_size)
        spec = NormalizationSpec(mean=spec.mean, std=spec.std, size=model.cfg.input_size)
        cache = _ImageCache(spec, model.dtype)

    true = np.array([ids[e.label] for e in chosen], dtype=np.int64)
    pred = np.empty(len(chosen), dtype=np.int64)
    with no_grad():
        for a in range(0, len(chosen), batch_size):
            group = chosen[a:a + batch_size]
            images, _ = _batch(cache, group, ids)
            logits = model(images, training=False)
            pred[a:a + len(group)] = np.argmax(logits.data, axis=1)
    names = sorted(ids, key=ids.get)
    cm = confusion(true, pred, len(ids), class_names=names)
    return compute_report(cm), cm
