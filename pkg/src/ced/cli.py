"""``ced`` command line: synth, train, validate, ced, correlate, groups, attention."""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import torch
import yaml

from . import __version__
from .analysis import (
    CorrelationReport,
    correlate_scores,
    export_attention,
    format_table,
    group_stats,
    read_jsonl,
    real_fake_experiment,
    real_fake_summary,
    report_records,
    write_jsonl,
)
from .corpus import SynthConfig, load_corpus, load_metadata, make_turn_pairs, synth_corpus, write_corpus
from .entrainment import BETA, CedResult, ced_corpus
from .errors import CEDError, ConfigError, DataError
from .model import ModelConfig, build_model, count_parameters, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate_loss, train, validation_batches

log = logging.getLogger("ced")

TOY_MODEL = dict(conformer_units=32, transformer_units=16, heads=4, conformer_ff_units=64,
                 cross_ff_units=32, head_units=16, conv_kernel=7, dropout=0.1, max_frames=64)


@dataclasses.dataclass
class RunManifest:
    command: str
    config_hash: str
    config: dict
    seeds: dict
    input_paths: list
    output_paths: list
    tool_version: str = __version__
    timestamp: str = ""


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


@contextlib.contextmanager
def output_dir(out: Path, force: bool):
    """Yield a temp directory that is renamed to ``out`` only on success."""
    out = Path(out)
    if out.exists() and not force:
        raise ConfigError(f"output directory {out} exists; pass --force to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def write_manifest(tmp: Path, out: Path, command: str, config: dict, seeds: dict, inputs) -> None:
    outputs = sorted(str(out / p.relative_to(tmp)) for p in tmp.rglob("*") if p.is_file())
    outputs.append(str(out / "manifest.json"))
    m = RunManifest(command, config_hash(config), config, seeds, [str(p) for p in inputs], outputs,
                    timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat())
    with open(tmp / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(m), fh, indent=1, sort_keys=True)


def load_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a key-value mapping")
    return data


def merged(defaults: dict, file_section: dict, flags: dict) -> dict:
    """CLI flag > config file > built-in default."""
    out = dict(defaults)
    out.update(file_section or {})
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def require_path(p, what: str) -> Path:
    if p is None:
        raise ConfigError(f"--{what} is required")
    p = Path(p)
    if not p.exists():
        raise ConfigError(f"{what} path does not exist: {p}")
    return p


def model_config(args, file_cfg: dict, input_dim: int) -> ModelConfig:
    base = dataclasses.asdict(ModelConfig())
    if args.preset == "toy":
        base.update(TOY_MODEL, input_dim=input_dim)
    cfg = merged(base, file_cfg.get("model", {}), {"dropout": getattr(args, "dropout", None)})
    return ModelConfig.from_dict(cfg)


def corpus_dim(corpus) -> int:
    dims = {fs.dim for c in corpus for fs in c.features}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dims {sorted(dims)}")
    return dims.pop()


def load_model_for(args, corpus, file_cfg):
    if getattr(args, "random_init", False):
        if args.checkpoint:
            cfg = load_checkpoint(require_path(args.checkpoint, "checkpoint"))[0].cfg
        else:
            cfg = model_config(args, file_cfg, corpus_dim(corpus))
        model = build_model(cfg, seed=args.seed or 0)
        model.eval()
        return model
    model, _ = load_checkpoint(require_path(args.checkpoint, "checkpoint"))
    if corpus and corpus_dim(corpus) != model.cfg.input_dim:
        raise ConfigError(f"corpus feature dim {corpus_dim(corpus)} != model input_dim {model.cfg.input_dim}")
    return model


# -- commands ---------------------------------------------------------------------------


def cmd_synth(args, file_cfg):
    flags = {"n_sessions": args.sessions, "turns_per_session": args.turns, "dim": args.dim, "alpha": args.alpha,
             "noise_scale": args.noise, "seed": args.seed, "frames_min": args.frames_min,
             "frames_max": args.frames_max, "pause_prob": args.pause_prob}
    cfg = SynthConfig(**merged(dataclasses.asdict(SynthConfig()), file_cfg.get("synth", {}), flags))
    out = Path(args.out)
    with output_dir(out, args.force) as tmp:
        write_corpus(tmp, synth_corpus(cfg), cfg.frame_period)
        write_manifest(tmp, out, "synth", dataclasses.asdict(cfg), {"seed": cfg.seed}, [])
    print(f"wrote {cfg.n_sessions} sessions to {out}")


def cmd_train(args, file_cfg):
    corpus_path = require_path(args.corpus, "corpus")
    flags = {"learning_rate": args.lr, "batch_size": args.batch_size, "max_epochs": args.max_epochs,
             "patience": args.patience, "val_fraction": args.val_fraction, "seed": args.seed}
    tcfg = TrainConfig(**merged(dataclasses.asdict(TrainConfig()), file_cfg.get("train", {}), flags))
    corpus = load_corpus(corpus_path)
    mcfg = model_config(args, file_cfg, corpus_dim(corpus))
    if corpus_dim(corpus) != mcfg.input_dim:
        raise ConfigError(f"corpus feature dim {corpus_dim(corpus)} != model input_dim {mcfg.input_dim}")
    out = Path(args.out)
    with output_dir(out, args.force) as tmp:
        tcfg = dataclasses.replace(tcfg, checkpoint_dir=str(tmp))
        model = build_model(mcfg, seed=tcfg.seed)
        log.info("model parameters: %d", count_parameters(model))
        model, history = train(model, corpus, tcfg)
        val_loss, val_acc = evaluate_loss(model, validation_batches(corpus, tcfg))
        best = min(history, key=lambda r: r.val_loss)
        save_checkpoint(tmp / "best.ckpt", model, {"epoch": best.epoch, "val_loss": val_loss, "val_accuracy": val_acc})
        # wall times live apart so history.jsonl is byte-stable across reruns
        write_jsonl(tmp / "history.jsonl",
                    [{k: v for k, v in dataclasses.asdict(r).items() if k != "wall_time"} for r in history])
        write_jsonl(tmp / "timings.jsonl", [{"epoch": r.epoch, "wall_time": r.wall_time} for r in history])
        # output locations go in output_paths, not in the hashed config
        effective = {"model": dataclasses.asdict(mcfg), "train": {**dataclasses.asdict(tcfg), "checkpoint_dir": None}}
        write_manifest(tmp, out, "train", effective, {"seed": tcfg.seed}, [corpus_path])
    print(f"best epoch {best.epoch}: val loss {val_loss:.4f}, val accuracy {val_acc:.4f}; checkpoint {out / 'best.ckpt'}")


def cmd_validate(args, file_cfg):
    corpus_path = require_path(args.corpus, "corpus")
    corpus = load_corpus(corpus_path)
    model = None if args.metric == "baseline" else load_model_for(args, corpus, file_cfg)
    seed = args.seed or 0
    report = real_fake_experiment(model, corpus, repeats=args.repeats, seed=seed, metric=args.metric,
                                  beta=args.beta, corpus_id=corpus_path.name)
    out = Path(args.out)
    with output_dir(out, args.force) as tmp:
        write_jsonl(tmp / "report.jsonl", report_records([report]))
        (tmp / "summary.txt").write_text(real_fake_summary(report) + "\n")
        config = {"repeats": args.repeats, "metric": args.metric, "beta": args.beta,
                  "random_init": args.random_init, "checkpoint": args.checkpoint}
        write_manifest(tmp, out, "validate", config, {"seed": seed}, [corpus_path] + ([args.checkpoint] if args.checkpoint else []))
    print(real_fake_summary(report))


def _ced_results(args, file_cfg) -> tuple[list[CedResult], list]:
    if getattr(args, "ced", None):
        path = require_path(args.ced, "ced")
        return CedResult.from_records(read_jsonl(path)), [path]
    corpus_path = require_path(args.corpus, "corpus")
    corpus = load_corpus(corpus_path)
    model = None if args.baseline else load_model_for(args, corpus, file_cfg)
    inputs = [corpus_path] + ([args.checkpoint] if args.checkpoint else [])
    return ced_corpus(model, corpus, args.direction, args.beta, baseline=args.baseline), inputs


def _metadata(args):
    if args.metadata:
        return load_metadata(require_path(args.metadata, "metadata"))
    if args.corpus:
        return load_metadata(Path(args.corpus) / "metadata.json")
    raise ConfigError("--metadata is required when --corpus is not given")


def cmd_ced(args, file_cfg):
    results, inputs = _ced_results(args, file_cfg)
    out = Path(args.out)
    with output_dir(out, args.force) as tmp:
        write_jsonl(tmp / "ced.jsonl", [r for res in results for r in res.records()])
        write_manifest(tmp, out, "ced", {"direction": args.direction, "beta": args.beta, "baseline": args.baseline},
                       {}, inputs)
    print(f"wrote {len(results)} session-direction results to {out / 'ced.jsonl'}")


def cmd_correlate(args, file_cfg):
    if not args.score:
        raise ConfigError("at least one --score is required")
    results, inputs = _ced_results(args, file_cfg)
    metadata = _metadata(args)
    reports = correlate_scores(results, metadata, args.score)
    rows = report_records(reports)
    out = Path(args.out)
    table = format_table(rows, ["score_name", "direction", "n", "rho", "p_value", "significant"])
    with output_dir(out, args.force) as tmp:
        write_jsonl(tmp / "correlation.jsonl", rows)
        (tmp / "summary.txt").write_text(table + "\n")
        write_manifest(tmp, out, "correlate", {"scores": args.score, "direction": args.direction, "beta": args.beta},
                       {}, inputs)
    print(table)


def cmd_groups(args, file_cfg):
    results, inputs = _ced_results(args, file_cfg)
    stats_ = group_stats(results, _metadata(args))
    rows = [dataclasses.asdict(s) for s in stats_]
    table = format_table(rows, ["direction", "gender", "age_band", "n", "mean_abs_ced"])
    out = Path(args.out)
    with output_dir(out, args.force) as tmp:
        write_jsonl(tmp / "groups.jsonl", rows)
        (tmp / "summary.txt").write_text(table + "\n")
        write_manifest(tmp, out, "groups", {"direction": args.direction, "beta": args.beta}, {}, inputs)
    print(table)


def cmd_attention(args, file_cfg):
    corpus_path = require_path(args.corpus, "corpus")
    corpus = {c.session_id: c for c in load_corpus(corpus_path)}
    model = load_model_for(args, list(corpus.values()), file_cfg)
    sid = args.session or sorted(corpus)[0]
    if sid not in corpus:
        raise DataError(f"session {sid!r} not in corpus")
    pairs = make_turn_pairs(corpus[sid])
    if not 0 <= args.pair_index < len(pairs):
        raise DataError(f"{sid}: pair index {args.pair_index} out of range (0..{len(pairs) - 1})")
    out = Path(args.out)
    with output_dir(out, args.force) as tmp:
        records = export_attention(model, pairs[args.pair_index], tmp, prefix=f"{sid}_p{args.pair_index}")
        write_manifest(tmp, out, "attention", {"session": sid, "pair_index": args.pair_index}, {},
                       [corpus_path, args.checkpoint])
    for r in records:
        print(f"{r.layer_id}: weights {tuple(r.weights.shape)}")


# -- parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file (sections: synth, model, train)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, default=1, help="intra-op threads")
    common.add_argument("--force", action="store_true", help="replace an existing output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ced", description="Contextual entrainment distance toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic entrained corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--sessions", type=int)
    s.add_argument("--turns", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--frames-min", type=int)
    s.add_argument("--frames-max", type=int)
    s.add_argument("--pause-prob", type=float)
    s.set_defaults(func=cmd_synth)

    def model_opts(sp):
        sp.add_argument("--preset", choices=["full", "toy"], default="full",
                        help="full: default widths; toy: small widths, input dim from corpus")

    t = sub.add_parser("train", parents=[common], help="train the real/fake model")
    t.add_argument("--corpus")
    t.add_argument("--out", required=True)
    model_opts(t)
    t.add_argument("--dropout", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--val-fraction", type=float)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("validate", parents=[common], help="real vs. fake session classification")
    v.add_argument("--checkpoint")
    v.add_argument("--corpus")
    v.add_argument("--out", required=True)
    v.add_argument("--repeats", type=int, default=30)
    v.add_argument("--metric", choices=["ced", "baseline"], default="ced")
    v.add_argument("--beta", type=float, default=BETA)
    v.add_argument("--random-init", action="store_true", help="use an untrained model")
    model_opts(v)
    v.set_defaults(func=cmd_validate)

    def ced_inputs(sp, allow_records):
        sp.add_argument("--checkpoint")
        sp.add_argument("--corpus")
        if allow_records:
            sp.add_argument("--ced", help="precomputed ced.jsonl instead of checkpoint+corpus")
            sp.add_argument("--metadata", help="metadata sidecar (default: <corpus>/metadata.json)")
        sp.add_argument("--out", required=True)
        sp.add_argument("--direction", default="both", help="'both' or 'X->Y'")
        sp.add_argument("--beta", type=float, default=BETA)
        sp.add_argument("--baseline", action="store_true", help="raw-feature smooth-L1 instead of the model")
        sp.add_argument("--random-init", action="store_true")
        model_opts(sp)

    c = sub.add_parser("ced", parents=[common], help="per-pair and per-session CED")
    ced_inputs(c, allow_records=False)
    c.set_defaults(func=cmd_ced)

    r = sub.add_parser("correlate", parents=[common], help="Pearson r of session CED vs. scores")
    ced_inputs(r, allow_records=True)
    r.add_argument("--score", action="append", help="metadata score field (repeatable)")
    r.set_defaults(func=cmd_correlate)

    g = sub.add_parser("groups", parents=[common], help="mean |CED| by gender and age band")
    ced_inputs(g, allow_records=True)
    g.set_defaults(func=cmd_groups)

    a = sub.add_parser("attention", parents=[common], help="export cross-attention heatmaps")
    a.add_argument("--checkpoint")
    a.add_argument("--corpus")
    a.add_argument("--out", required=True)
    a.add_argument("--session")
    a.add_argument("--pair-index", type=int, default=0)
    a.add_argument("--random-init", action="store_true")
    model_opts(a)
    a.set_defaults(func=cmd_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        torch.set_num_threads(args.workers)
        file_cfg = load_config_file(args.config)
        if args.seed is None and "seed" in file_cfg:
            args.seed = int(file_cfg["seed"])
        args.func(args, file_cfg)
    except CEDError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
