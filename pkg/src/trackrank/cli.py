"""Command-line interface: synth | train | eval | gradcheck | compare.

Every command reads an optional JSON run config (``--config``); flags
override config keys. Reports print as a table, or as JSON with ``--json``,
and are also written to the output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .aggregators import HEAD_PRESETS, AttentionConfig, PoolConfig, RnnConfig
from .config import ConfigError, RunConfig, load_config, validate
from .data import Dataset, FormatError, generate_synthetic, load_dataset, write_dataset
from .gradcheck import run_suite, suite
from .trainer import Checkpoint, TrainingError, evaluate_model, train, write_loss_log

log = logging.getLogger("trackrank")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# config handling

def _head_from_flags(cfg: RunConfig, args) -> None:
    head = cfg.head
    if args.head is not None:
        if args.head in HEAD_PRESETS:
            head = HEAD_PRESETS[args.head]
        elif args.head == "pool":
            head = PoolConfig()
        elif args.head == "attention":
            head = AttentionConfig()
        elif args.head == "rnn":
            head = RnnConfig()
        else:
            raise ConfigError(f"--head: unknown head {args.head!r}")
    try:
        if isinstance(head, PoolConfig) and args.pool_mode:
            head = dataclasses.replace(head, mode=args.pool_mode)
        if isinstance(head, AttentionConfig):
            over = {k: v for k, v in (("network", args.network),
                                      ("normalization", args.normalization),
                                      ("d_t", args.d_t)) if v is not None}
            head = dataclasses.replace(head, **over)
        if isinstance(head, RnnConfig):
            over = {k: v for k, v in (("cell", args.cell), ("readout", args.readout),
                                      ("hidden_size", args.hidden_size)) if v is not None}
            head = dataclasses.replace(head, **over)
    except ValueError as exc:
        raise ConfigError(f"head: {exc}") from exc
    cfg.head = head


def build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "head", None) is not None or any(
            getattr(args, k, None) is not None
            for k in ("pool_mode", "network", "normalization", "d_t", "cell", "readout",
                      "hidden_size")):
        _head_from_flags(cfg, args)
    train_over = {k: getattr(args, k, None) for k in ("steps", "lr")}
    for key, value in train_over.items():
        if value is not None:
            setattr(cfg.train, key, value)
    if getattr(args, "T", None) is not None:
        try:
            cfg.sampler = dataclasses.replace(cfg.sampler, T=args.T)
        except ValueError as exc:
            raise ConfigError(f"sampler: {exc}") from exc
    if getattr(args, "train_manifest", None) or getattr(args, "test_manifest", None):
        from .config import DatasetPaths
        paths = cfg.dataset or DatasetPaths()
        cfg.dataset = DatasetPaths(args.train_manifest or paths.train,
                                   args.test_manifest or paths.test)
    if getattr(args, "rerank", False):
        cfg.eval.rerank = True
    for flag, key in (("k1", "k1"), ("k2", "k2"), ("lambda_value", "lambda_value")):
        if getattr(args, flag, None) is not None:
            setattr(cfg.eval, key, getattr(args, flag))
    if getattr(args, "drop_padded", False):
        cfg.eval.drop_padded = True
    validate(cfg)
    return cfg


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"output directory {path} exists and is not empty "
                              f"(use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _datasets(cfg: RunConfig, need_train: bool = True, need_test: bool = True,
              seed: int | None = None) -> tuple[Dataset | None, Dataset | None]:
    """Load manifests when configured, otherwise synthesize in memory."""
    if cfg.dataset is not None:
        train_ds = test_ds = None
        if need_train:
            if not cfg.dataset.train:
                raise ConfigError("dataset.train manifest path is required")
            train_ds = load_dataset(cfg.dataset.train)
        if need_test:
            if not cfg.dataset.test:
                raise ConfigError("dataset.test manifest path is required")
            test_ds = load_dataset(cfg.dataset.test)
        return train_ds, test_ds
    try:
        return generate_synthetic(cfg.synth_config(seed))
    except ValueError as exc:
        raise ConfigError(f"synth: {exc}") from exc


def _emit(args, report: dict, table: str, out_dir: Path | None, stem: str) -> None:
    if out_dir is not None:
        (out_dir / f"{stem}.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        (out_dir / f"{stem}.txt").write_text(table + "\n")
    print(json.dumps(report, indent=1, sort_keys=True) if args.json else table)


def _metrics_table(rows: list[tuple[str, dict]], ranks) -> str:
    header = ["", "mAP"] + [f"CMC-{r}" for r in ranks]
    lines = [header]
    for name, m in rows:
        lines.append([name, f"{100 * m['map']:.1f}"] +
                     [f"{100 * m['cmc'][str(r)]:.1f}" for r in ranks])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    fmt = lambda row: " | ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                 for i, (c, w) in enumerate(zip(row, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(lines[0]), sep] + [fmt(r) for r in lines[1:]])


# commands

def cmd_synth(args) -> int:
    cfg = build_config(args)
    synth = cfg.synth_config()
    out = Path(cfg.out)
    train_ds, test_ds = _datasets(dataclasses.replace(cfg, dataset=None))
    _prepare_out(out, args.force)
    train_path = write_dataset(train_ds, out, "train.json", cfg.storage_dtype)
    test_path = write_dataset(test_ds, out, "test.json", cfg.storage_dtype)
    report = {"train_manifest": str(train_path), "test_manifest": str(test_path),
              "train_tracklets": len(train_ds), "test_tracklets": len(test_ds),
              "train_identities": train_ds.num_identities,
              "test_identities": test_ds.num_identities, "synth": synth.to_dict()}
    table = "\n".join(f"{k}: {v}" for k, v in report.items() if k != "synth")
    _emit(args, report, table, None, "synth")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    train_ds, test_ds = _datasets(cfg)
    tcfg = cfg.train_config()
    resume = Checkpoint.load(args.resume) if args.resume else None
    out = Path(cfg.out)
    _prepare_out(out, args.force)
    try:
        result = train(train_ds, tcfg, test=test_ds, resume=resume,
                       eval_options=cfg.eval_options())
    except TrainingError:
        shutil.rmtree(out, ignore_errors=True)
        raise
    result.checkpoint.save(out / "checkpoint")
    write_loss_log(result.loss_log, out / "loss_log.jsonl")
    final = result.metric_log[-1] if result.metric_log else {}
    report = {"config": cfg.to_dict(), "train_config": tcfg.to_dict(),
              "steps": tcfg.steps, "final_loss": result.loss_log[-1]["loss"]
              if result.loss_log else None, "metrics": result.metric_log,
              "final": final, "checkpoint": str(out / "checkpoint")}
    table = f"trained {tcfg.steps} steps, head {tcfg.head}\n"
    if final:
        table += _metrics_table([("final", final)], cfg.eval.ranks)
    _emit(args, report, table, out, "train")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = build_config(args)
    if not args.checkpoint:
        raise ConfigError("eval: --checkpoint is required")
    checkpoint = Checkpoint.load(args.checkpoint)
    _, test_ds = _datasets(cfg, need_train=False)
    if args.out is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = None
    model = checkpoint.build_model()
    report = evaluate_model(model, test_ds, checkpoint.config.sampler.T, cfg.eval_options())
    report["rerank"] = cfg.eval.rerank
    if cfg.eval.rerank:
        report["rerank_params"] = {"k1": cfg.eval.k1, "k2": cfg.eval.k2,
                                   "lambda": cfg.eval.lambda_value}
    report["checkpoint_step"] = checkpoint.step
    _emit(args, report, _metrics_table([("eval", report)], cfg.eval.ranks), out, "eval")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.head or None
    if names:
        known = suite()
        bad = [n for n in names if n not in known]
        if bad:
            raise ConfigError(f"--head: unknown target(s) {bad}; choose from {list(known)}")
    start = time.perf_counter()
    rows = run_suite(names, seeds=args.seeds, tolerance=args.tolerance)
    report = {"tolerance": args.tolerance, "seeds": args.seeds,
              "runtime": time.perf_counter() - start,
              "rows": [dataclasses.asdict(r) for r in rows],
              "passed": all(r.passed for r in rows)}
    width = max([len(r.name) for r in rows] + [len("target")])
    lines = [f"{'target'.ljust(width)} | max rel. error | result"]
    for r in rows:
        status = "pass" if r.passed else ("FAIL: " + r.failure if r.failure else "FAIL")
        lines.append(f"{r.name.ljust(width)} | {r.max_error:14.3e} | {status}")
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    _emit(args, report, "\n".join(lines), out, "gradcheck")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def compare_runs(cfg: RunConfig) -> dict:
    """Train and evaluate every configured head (plus the T=1 baseline) per seed."""
    runs: list[tuple[str, object, int]] = []
    if cfg.compare.baseline:
        runs.append(("image (T=1)", PoolConfig("avg"), 1))
    for name in cfg.compare.heads:
        runs.append((name, HEAD_PRESETS[name], cfg.sampler.T))
    per_seed: dict[str, list[dict]] = {name: [] for name, _, _ in runs}
    for seed in cfg.compare.seeds:
        train_ds, test_ds = _datasets(cfg, seed=seed)
        for name, head, T in runs:
            result = train(train_ds, cfg.train_config(head=head, T=T, seed=seed),
                           test=test_ds, eval_options=cfg.eval_options())
            per_seed[name].append(result.metric_log[-1])
    rows = []
    for name, head, T in runs:
        ms = per_seed[name]
        mean = {"map": float(np.mean([m["map"] for m in ms])),
                "cmc": {str(r): float(np.mean([m["cmc"][str(r)] for m in ms]))
                        for r in cfg.eval.ranks}}
        rows.append({"name": name, "T": T, "head": dataclasses.asdict(head), **mean,
                     "per_seed": [{"map": m["map"], "cmc": m["cmc"]} for m in ms]})
    return {"seeds": list(cfg.compare.seeds), "steps": cfg.train.steps, "rows": rows}


def cmd_compare(args) -> int:
    cfg = build_config(args)
    if args.heads:
        bad = [h for h in args.heads if h not in HEAD_PRESETS]
        if bad:
            raise ConfigError(f"--heads: unknown preset(s) {bad}")
        cfg.compare.heads = list(args.heads)
    if args.seeds is not None:
        cfg.compare.seeds = list(range(args.seeds))
    if cfg.dataset is not None:
        _datasets(cfg)  # fail on bad paths before writing anything
    out = Path(cfg.out)
    _prepare_out(out, args.force)
    report = compare_runs(cfg)
    report["config"] = cfg.to_dict()
    table = _metrics_table([(r["name"], r) for r in report["rows"]], cfg.eval.ranks)
    _emit(args, report, table, out, "compare")
    return EXIT_OK


# argument parsing

def _common(p: argparse.ArgumentParser, out_help="output directory") -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="seed for data, sampling and initialization")
    p.add_argument("--out", help=out_help)
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _head_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--head", help="preset name (%s) or kind (pool|attention|rnn)"
                   % ", ".join(HEAD_PRESETS))
    p.add_argument("--pool-mode", choices=["avg", "max"])
    p.add_argument("--network", choices=["spatial_fc", "spatial_temporal_conv"])
    p.add_argument("--normalization", choices=["softmax", "sigmoid_l1"])
    p.add_argument("--d-t", type=int)
    p.add_argument("--cell", choices=["lstm", "gru"])
    p.add_argument("--readout", choices=["final_state", "output_average"])
    p.add_argument("--hidden-size", type=int)


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-manifest", help="training manifest (overrides dataset.train)")
    p.add_argument("--test-manifest", help="test manifest (overrides dataset.test)")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rerank", action="store_true", help="apply k-reciprocal re-ranking")
    p.add_argument("--k1", type=int)
    p.add_argument("--k2", type=int)
    p.add_argument("--lambda", dest="lambda_value", type=float)
    p.add_argument("--drop-padded", action="store_true",
                   help="leave padded trailing clips out of video averages")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trackrank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset (manifests + feature files)")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a head and write checkpoint + logs")
    _common(p)
    _head_flags(p)
    _data_flags(p)
    _eval_flags(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("-T", type=int, help="frames per clip")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    _common(p)
    _data_flags(p)
    _eval_flags(p)
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every head and loss")
    p.add_argument("--head", action="append", help="check only this target (repeatable)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="train and evaluate several heads side by side")
    _common(p)
    _data_flags(p)
    _eval_flags(p)
    p.add_argument("--heads", nargs="+", help="head presets to include")
    p.add_argument("--seeds", type=int, help="number of seeds (0..n-1) to average over")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("-T", type=int, help="frames per clip for the non-baseline rows")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError, TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
