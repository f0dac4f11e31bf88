"""Contextual entrainment distance: smooth-L1 between pooled cross-encoder
embeddings of a turn pair, aggregated per session and direction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .corpus import Conversation, TurnPair, make_turn_pairs
from .errors import ConfigError, DimensionError, NoPairsError
from .model import CEDModel, EmbeddingPair, collate_pairs, embed_pair

log = logging.getLogger(__name__)

BETA = 1.0


def smooth_l1(u, v, beta: float = BETA) -> float:
    """Sum over coordinates of 0.5*d**2/beta if |d| < beta else |d| - 0.5*beta."""
    if not beta > 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape} vs {v.shape}")
    a = np.abs(u - v)
    return float(np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta).sum())


def direction_label(direction: tuple[str, str]) -> str:
    return f"{direction[0]}->{direction[1]}"


def parse_direction(label: str) -> tuple[str, str]:
    parts = label.split("->")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"direction must look like 'X->Y', got {label!r}")
    return parts[0], parts[1]


@dataclass
class CedResult:
    session_id: str
    direction: tuple[str, str]
    pair_distances: list[tuple[int, float]] = field(default_factory=list)

    @property
    def session_ced(self) -> float:
        return float(np.mean([d for _, d in self.pair_distances]))

    def records(self) -> list[dict]:
        label = direction_label(self.direction)
        out = [{"type": "pair", "session_id": self.session_id, "direction": label, "pair_index": i, "distance": d}
               for i, d in self.pair_distances]
        out.append({"type": "session", "session_id": self.session_id, "direction": label,
                    "n_pairs": len(self.pair_distances), "session_ced": self.session_ced})
        return out

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> list["CedResult"]:
        by_key: dict[tuple[str, str], CedResult] = {}
        for r in records:
            if r.get("type") != "pair":
                continue
            key = (r["session_id"], r["direction"])
            if key not in by_key:
                by_key[key] = cls(r["session_id"], parse_direction(r["direction"]))
            by_key[key].pair_distances.append((int(r["pair_index"]), float(r["distance"])))
        return list(by_key.values())


def extract_embeddings(model: CEDModel, pair: TurnPair) -> EmbeddingPair:
    return embed_pair(model, pair)


def ced_pair(model: CEDModel, pair: TurnPair, beta: float = BETA) -> float:
    emb = embed_pair(model, pair)
    return smooth_l1(emb.pooled_lead, emb.pooled_resp, beta)


@torch.no_grad()
def pooled_embeddings(model: CEDModel, pairs: Sequence[TurnPair], batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Batched pooled (lead, resp) embeddings for many pairs; padding is masked."""
    model.eval()
    dtype = next(model.parameters()).dtype
    leads, resps = [], []
    for i in range(0, len(pairs), batch_size):
        lead, lm, resp, rm = collate_pairs(pairs[i: i + batch_size], model.cfg.max_frames, dtype)
        _, _, pl, pr, _ = model.embed(lead, resp, lm, rm)
        leads.append(pl.numpy())
        resps.append(pr.numpy())
    dim = model.cfg.transformer_units
    if not leads:
        return np.zeros((0, dim)), np.zeros((0, dim))
    return np.concatenate(leads), np.concatenate(resps)


def model_pair_distances(model: CEDModel, pairs: Sequence[TurnPair], beta: float = BETA, batch_size: int = 64) -> np.ndarray:
    lead, resp = pooled_embeddings(model, pairs, batch_size)
    return np.array([smooth_l1(a, b, beta) for a, b in zip(lead, resp)])


def baseline_smooth_l1(pair: TurnPair, beta: float = BETA) -> float:
    """Smooth-L1 between mean-pooled raw turn features; no model involved."""
    return smooth_l1(pair.leading.frames.mean(axis=0, dtype=np.float64),
                     pair.responding.frames.mean(axis=0, dtype=np.float64), beta)


def baseline_pair_distances(pairs: Sequence[TurnPair], beta: float = BETA) -> np.ndarray:
    return np.array([baseline_smooth_l1(p, beta) for p in pairs])


def ced_session(model: CEDModel | None, conv: Conversation, direction: tuple[str, str],
                beta: float = BETA, baseline: bool = False) -> CedResult:
    """Average distance over the pairs whose leading speaker is direction[0]
    and responding speaker is direction[1]. ``baseline=True`` swaps the
    model for raw-feature distances."""
    pairs = [p for p in make_turn_pairs(conv) if p.direction == tuple(direction)]
    if not pairs:
        raise NoPairsError(f"{conv.session_id}: no pairs in direction {direction_label(direction)}")
    dists = baseline_pair_distances(pairs, beta) if baseline else model_pair_distances(model, pairs, beta)
    return CedResult(conv.session_id, tuple(direction), [(p.index, float(d)) for p, d in zip(pairs, dists)])


def ced_corpus(model: CEDModel | None, corpus: Sequence[Conversation], directions: str = "both",
               beta: float = BETA, baseline: bool = False) -> list[CedResult]:
    """CED for each session; ``directions`` is 'both' or an 'X->Y' label.

    Sessions lacking pairs in a requested direction are skipped with a log line.
    """
    results = []
    skipped = 0
    for conv in sorted(corpus, key=lambda c: c.session_id):
        dirs = [(conv.speaker_a, conv.speaker_b), (conv.speaker_b, conv.speaker_a)] if directions == "both" \
            else [parse_direction(directions)]
        for d in dirs:
            try:
                results.append(ced_session(model, conv, d, beta, baseline))
            except NoPairsError:
                skipped += 1
    if skipped:
        log.warning("skipped %d session-directions without pairs", skipped)
    if corpus and not results:
        raise NoPairsError(f"no turn pairs in direction {directions!r} in any session")
    return results
