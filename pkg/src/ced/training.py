"""Real vs. shuffled-session training with BCE-with-logits, Adam and early stopping."""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Conversation, TurnPair, make_turn_pairs, shuffle_session
from .errors import ConfigError, DegenerateSessionError, EmptyCorpusError, EmptyInputError, NumericFailure
from .model import CEDModel, collate_pairs, save_checkpoint

log = logging.getLogger(__name__)

Batch = list[tuple[TurnPair, int]]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    checkpoint_dir: str | None = None
    fresh_shuffles: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    wall_time: float


def shuffle_seed(seed: int, epoch: int, session_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, session_index])


def labeled_pairs(corpus: Sequence[Conversation], seed: int, epoch: int) -> tuple[list[TurnPair], list[TurnPair]]:
    """(real pairs, fake pairs) with one shuffled counterpart per session."""
    real, fake = [], []
    skipped = 0
    for i, conv in enumerate(corpus):
        try:
            shuffled = shuffle_session(conv, shuffle_seed(seed, epoch, i))
        except DegenerateSessionError:
            skipped += 1
            continue
        real += make_turn_pairs(conv)
        fake += make_turn_pairs(shuffled)
    if skipped:
        log.warning("skipped %d sessions too short to shuffle", skipped)
    return real, fake


def make_training_batches(corpus: Sequence[Conversation], cfg: TrainConfig, epoch: int = 0) -> list[Batch]:
    """One epoch of label-balanced batches (real = 1, fake = 0).

    Real and fake pairs are shuffled separately and interleaved, so every
    batch is balanced within one example; the whole order is a function of
    (cfg.seed, epoch).
    """
    if not corpus:
        raise EmptyCorpusError("no sessions to build batches from")
    shuffle_epoch = epoch if cfg.fresh_shuffles else 0
    real, fake = labeled_pairs(corpus, cfg.seed, shuffle_epoch)
    rng = np.random.default_rng([cfg.seed, epoch, 0x5EED])
    real = [real[i] for i in rng.permutation(len(real))]
    fake = [fake[i] for i in rng.permutation(len(fake))]
    stream: list[tuple[TurnPair, int]] = []
    for k in range(max(len(real), len(fake))):
        if k < len(real):
            stream.append((real[k], 1))
        if k < len(fake):
            stream.append((fake[k], 0))
    batches = [stream[i: i + cfg.batch_size] for i in range(0, len(stream), cfg.batch_size)]
    return [[batch[j] for j in rng.permutation(len(batch))] for batch in batches]


def batch_logits(model: CEDModel, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    dtype = next(model.parameters()).dtype
    pairs, labels = zip(*batch)
    lead, lm, resp, rm = collate_pairs(pairs, model.cfg.max_frames, dtype)
    return model(lead, resp, lm, rm), torch.tensor(labels, dtype=dtype)


@torch.no_grad()
def evaluate_loss(model: CEDModel, batches: Iterable[Batch]) -> tuple[float, float]:
    """Mean BCE-with-logits and accuracy (logit > 0 predicts real) over all pairs."""
    model.eval()
    total, correct, n = 0.0, 0, 0
    for batch in batches:
        if not batch:
            continue
        logits, labels = batch_logits(model, batch)
        total += float(F.binary_cross_entropy_with_logits(logits, labels, reduction="sum"))
        correct += int(((logits > 0).to(labels.dtype) == labels).sum())
        n += len(batch)
    if n == 0:
        raise EmptyInputError("no examples to evaluate")
    return total / n, correct / n


def split_sessions(corpus: Sequence[Conversation], val_fraction: float, seed: int):
    """Session-level train/validation split."""
    order = np.random.default_rng([seed, 0x5B117]).permutation(len(corpus))
    n_val = max(1, int(round(val_fraction * len(corpus))))
    if n_val >= len(corpus):
        raise EmptyCorpusError("corpus too small for a train/validation split")
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [corpus[i] for i in train], [corpus[i] for i in val]


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


def train(model: CEDModel, corpus: Sequence[Conversation], cfg: TrainConfig,
          on_epoch=None) -> tuple[CEDModel, list[TrainRecord]]:
    if not corpus:
        raise EmptyCorpusError("empty training corpus")
    dims = {fs.dim for conv in corpus for fs in conv.features or []}
    if dims != {model.cfg.input_dim}:
        raise ConfigError(f"feature dims {sorted(dims)} do not match model input_dim {model.cfg.input_dim}")
    train_set, val_set = split_sessions(corpus, cfg.val_fraction, cfg.seed)
    val_batches = validation_batches(corpus, cfg)

    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience)
    best_state = copy.deepcopy(model.state_dict())
    ckpt = Path(cfg.checkpoint_dir) / "best.ckpt" if cfg.checkpoint_dir else None
    if ckpt:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
    history: list[TrainRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        total, n = 0.0, 0
        for batch in make_training_batches(train_set, cfg, epoch):
            logits, labels = batch_logits(model, batch)
            loss = F.binary_cross_entropy_with_logits(logits, labels)
            if not torch.isfinite(loss):
                raise NumericFailure(f"non-finite training loss at epoch {epoch}", layer="loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            n += len(batch)
        val_loss, val_acc = evaluate_loss(model, val_batches)
        if not math.isfinite(val_loss):
            raise NumericFailure(f"non-finite validation loss at epoch {epoch}", layer="loss")
        rec = TrainRecord(epoch, total / n, val_loss, val_acc, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d train %.4f val %.4f acc %.3f", epoch, rec.train_loss, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(rec)
        improved, stop = stopper.step(epoch, val_loss)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
            if ckpt:
                save_checkpoint(ckpt, model, {"epoch": epoch, "val_loss": val_loss, "val_accuracy": val_acc})
        if stop:
            break

    model.load_state_dict(best_state)
    model.eval()
    return model, history


def validation_batches(corpus: Sequence[Conversation], cfg: TrainConfig) -> list[Batch]:
    """The fixed validation stream that ``train`` evaluates each epoch."""
    _, val_set = split_sessions(corpus, cfg.val_fraction, cfg.seed)
    return make_training_batches(val_set, cfg, epoch=0)
