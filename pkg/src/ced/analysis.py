"""Validation and evaluation protocols over CED results."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .corpus import Conversation, make_turn_pairs, shuffle_session
from .entrainment import BETA, CedResult, baseline_pair_distances, direction_label, model_pair_distances
from .errors import (
    DataError,
    DegenerateSessionError,
    EmptyInputError,
    InsufficientDataError,
    UndefinedCorrelationError,
)
from .model import CROSS_LAYER_IDS, AttentionRecord, CEDModel, embed_pair

log = logging.getLogger(__name__)

# Published real/fake accuracies on the two clinical/telephone corpora; kept
# only as annotations next to synthetic results.
PUBLISHED_ACCURACY = {"Fisher": 0.9213, "ADOSMod3": 0.9566}
SIGNIFICANCE = 0.05
AGE_BANDS = ("<=5", "(5,10]", ">10")


@dataclass
class RealFakeReport:
    corpus_id: str
    repeats: int
    per_repeat_accuracy: list[float]
    mean_accuracy: float
    stddev: float
    n_sessions: int
    skipped: int = 0
    metric: str = "ced"

    @property
    def null_standard_error(self) -> float:
        """Binomial standard error of a session-level accuracy under chance (p = 0.5)."""
        return 0.5 / math.sqrt(self.n_sessions)


@dataclass
class CorrelationReport:
    score_name: str
    direction: str
    n: int
    rho: float
    p_value: float
    skipped: int = 0

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE


@dataclass
class GroupStat:
    gender: str
    age_band: str
    direction: str
    mean_abs_ced: float
    n: int


# -- real vs. fake ------------------------------------------------------------------


def _distance_fn(model: CEDModel | None, metric: str, beta: float) -> Callable:
    if metric == "baseline":
        return lambda pairs: baseline_pair_distances(pairs, beta)
    if model is None:
        raise DataError("metric 'ced' needs a model")
    return lambda pairs: model_pair_distances(model, pairs, beta)


def _session_means(dist: Callable, convs: Sequence[Conversation]) -> np.ndarray:
    pair_lists = [make_turn_pairs(c) for c in convs]
    flat = [p for ps in pair_lists for p in ps]
    d = dist(flat)
    out, k = [], 0
    for ps in pair_lists:
        out.append(float(np.mean(d[k: k + len(ps)])))
        k += len(ps)
    return np.array(out)


def real_fake_experiment(model: CEDModel | None, corpus: Sequence[Conversation], repeats: int = 30,
                         seed: int = 0, metric: str = "ced", beta: float = BETA,
                         corpus_id: str = "corpus") -> RealFakeReport:
    """Session-level real/fake discrimination by mean pair distance.

    A session counts as correct when its real mean distance is strictly
    below that of its shuffled counterpart; ties count as wrong.
    """
    if repeats < 1:
        raise DataError("repeats must be >= 1")
    dist = _distance_fn(model, metric, beta)
    usable = []
    for conv in sorted(corpus, key=lambda c: c.session_id):
        if len(conv.turns) < 3 or not make_turn_pairs(conv):
            continue
        try:
            shuffle_session(conv, 0)
        except DegenerateSessionError:
            continue
        usable.append(conv)
    skipped = len(corpus) - len(usable)
    if skipped:
        log.warning("real/fake experiment skipped %d degenerate sessions", skipped)
    if not usable:
        raise EmptyInputError("no usable sessions for the real/fake experiment")

    real = _session_means(dist, usable)
    accs = []
    for r in range(repeats):
        fakes = [shuffle_session(c, np.random.SeedSequence([seed, r, i])) for i, c in enumerate(usable)]
        fake = _session_means(dist, fakes)
        accs.append(float(np.mean(real < fake)))
    return RealFakeReport(corpus_id, repeats, accs, float(np.mean(accs)), float(np.std(accs)),
                          len(usable), skipped, metric)


# -- correlation ----------------------------------------------------------------------


def pearson(xs, ys) -> tuple[float, float]:
    """Sample Pearson r and its two-sided p-value (t test, n - 2 d.o.f.)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"pearson needs two equal-length 1-d inputs, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 3:
        raise InsufficientDataError(f"pearson needs n >= 3, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a zero-variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = min(1.0, max(-1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return r, min(1.0, max(0.0, p))


def _score(meta: dict, name: str):
    v = meta.get(name)
    if v is None:
        v = meta.get("scores", {}).get(name)
    return v


def correlate_scores(ced: Sequence[CedResult], metadata: dict[str, dict], score_names: Sequence[str]) -> list[CorrelationReport]:
    """Pearson r between per-session CED and each named score, per direction."""
    directions = sorted({direction_label(r.direction) for r in ced})
    reports = []
    for name in score_names:
        for d in directions:
            xs, ys, skipped = [], [], 0
            for res in sorted(ced, key=lambda r: r.session_id):
                if direction_label(res.direction) != d:
                    continue
                v = _score(metadata.get(res.session_id, {}), name)
                if v is None or not math.isfinite(float(v)):
                    skipped += 1
                    continue
                xs.append(res.session_ced)
                ys.append(float(v))
            if skipped:
                log.warning("score %r, direction %s: %d sessions without the score", name, d, skipped)
            if len(xs) < 3:
                raise InsufficientDataError(f"score {name!r}, direction {d}: {len(xs)} usable sessions (< 3)")
            rho, p = pearson(xs, ys)
            reports.append(CorrelationReport(name, d, len(xs), rho, p, skipped))
    return reports


# -- group statistics ------------------------------------------------------------------


def age_band(age: float) -> str:
    if age <= 5:
        return AGE_BANDS[0]
    if age <= 10:
        return AGE_BANDS[1]
    return AGE_BANDS[2]


def group_stats(ced: Sequence[CedResult], metadata: dict[str, dict]) -> list[GroupStat]:
    """Mean |CED| per (gender, age band, direction); only non-empty groups are returned."""
    buckets: dict[tuple[str, str, str], list[float]] = {}
    excluded = 0
    for res in ced:
        meta = metadata.get(res.session_id, {})
        gender, age = meta.get("gender"), meta.get("age")
        if gender is None or age is None:
            excluded += 1
            continue
        key = (str(gender), age_band(float(age)), direction_label(res.direction))
        buckets.setdefault(key, []).append(abs(res.session_ced))
    if excluded:
        log.warning("group stats excluded %d results without gender/age", excluded)
    if not buckets:
        missing = [f for f in ("gender", "age") if not any(f in m for m in metadata.values())]
        raise InsufficientDataError(f"no session has both 'gender' and 'age' metadata (missing everywhere: {missing})")
    band_order = {b: i for i, b in enumerate(AGE_BANDS)}
    keys = sorted(buckets, key=lambda k: (k[2], k[0], band_order[k[1]]))
    return [GroupStat(g, b, d, float(np.mean(buckets[(g, b, d)])), len(buckets[(g, b, d)])) for g, b, d in keys]


# -- attention -----------------------------------------------------------------------


def export_attention(model: CEDModel, pair, out_dir, prefix: str = "pair") -> list[AttentionRecord]:
    """Write per-head cross-attention weights (.npy) and a heatmap (.png) per layer."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, records = embed_pair(model, pair, return_attention=True)
    for rec in records:
        stem = f"{prefix}_{rec.layer_id}" + (f"_d{rec.depth}" if rec.depth else "")
        np.save(out_dir / f"{stem}.npy", rec.weights)
        heads = rec.weights.shape[0]
        fig, axes = plt.subplots(1, heads, figsize=(3 * heads, 3), squeeze=False)
        for h, ax in enumerate(axes[0]):
            ax.imshow(rec.weights[h], aspect="auto", cmap="viridis", vmin=0.0)
            ax.set_title(f"head {h}")
            ax.set_xlabel("key frame")
            ax.set_ylabel("query frame")
        fig.suptitle(rec.layer_id)
        fig.tight_layout()
        fig.savefig(out_dir / f"{stem}.png", dpi=80)
        plt.close(fig)
    return records


def edge_mass(weights: np.ndarray, frac: float = 0.25) -> tuple[float, float]:
    """Average attention mass on the first and last ``frac`` of key frames."""
    tk = weights.shape[-1]
    k = max(1, int(round(frac * tk)))
    col = weights.mean(axis=tuple(range(weights.ndim - 1)))
    return float(col[:k].sum()), float(col[-k:].sum())


# -- report I/O ------------------------------------------------------------------------


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def report_records(reports) -> list[dict]:
    out = []
    for r in reports:
        d = asdict(r)
        if isinstance(r, CorrelationReport):
            d["significant"] = r.significant
        if isinstance(r, RealFakeReport):
            d["null_standard_error"] = r.null_standard_error
        out.append(d)
    return out


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    sep = "  ".join("-" * w for w in widths)
    body = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join([line, sep, *body])


def real_fake_summary(report: RealFakeReport) -> str:
    lines = [
        f"real/fake classification on {report.corpus_id} ({report.metric})",
        f"  sessions {report.n_sessions} (skipped {report.skipped}), repeats {report.repeats}",
        f"  mean accuracy {report.mean_accuracy:.4f}  stddev {report.stddev:.4f}  "
        f"null SE {report.null_standard_error:.4f}",
        "  published reference: " + ", ".join(f"{k} {v:.2%}" for k, v in PUBLISHED_ACCURACY.items()),
    ]
    return "\n".join(lines)
