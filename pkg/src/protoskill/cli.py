"""Command-line harness.

Verbs::

    gen-data            write human/robot episode files for every seed
    select-k            entropy-rate K selection trace for one variant
    train               train checkpoints for one variant
    eval                evaluate saved checkpoints and write reports
    ablate              train + evaluate every variant and write a combined report
    export-embeddings   per-clip embedding/assignment CSV from saved checkpoints

Every verb exits 0 on success and 2 with a one-line reason on stderr otherwise.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import pipeline as pl
from .config import RunConfig, load_config

log = logging.getLogger("protoskill")


class CLIError(Exception):
    pass


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _seeds(cfg: RunConfig, args) -> List[int]:
    return [args.seed] if args.seed is not None else list(cfg.eval.seeds)


def _out(cfg: RunConfig, args) -> Path:
    return Path(args.out or cfg.paths.out_dir)


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise CLIError(f"cannot write {path}: {e.strerror}") from None


def cmd_gen_data(cfg: RunConfig, args) -> None:
    root = args.out or cfg.paths.data_dir
    counts = pl.gen_data(cfg, root, _seeds(cfg, args))
    for split, n in counts.items():
        print(f"{split}: {n} episodes")
    print(f"human: {counts['human_train'] + counts['human_test']}  "
          f"robot: {counts['robot_train'] + counts['robot_test']}  -> {root}")


def cmd_select_k(cfg: RunConfig, args) -> None:
    out = _out(cfg, args)
    for seed in _seeds(cfg, args):
        data = pl.load_seed_data(cfg, seed)
        data = pl.ObsNorm.fit(data).apply(data)
        trace = pl.run_select_k(cfg, args.variant, data)
        path = pl.artifact_dir(cfg, args.variant, seed, str(out)) / "selection.csv"
        _write(path, trace.to_csv())
        print(f"seed {seed}: K*={trace.chosen} -> {path}")


def cmd_train(cfg: RunConfig, args) -> None:
    out = _out(cfg, args)
    h = cfg.hash()
    for seed in _seeds(cfg, args):
        art = pl.train_variant(cfg, args.variant, pl.load_seed_data(cfg, seed))
        d = pl.artifact_dir(cfg, args.variant, seed, str(out))
        pl.save_artifacts(art, d, h)
        print(f"seed {seed}: K={art.proto_cfg.K} -> {d}")


def _load(cfg: RunConfig, variant: str, seed: int, out: Path) -> pl.Artifacts:
    d = pl.artifact_dir(cfg, variant, seed, str(out))
    try:
        return pl.load_artifacts(d)
    except FileNotFoundError:
        raise CLIError(f"no checkpoints for {variant} seed {seed} in {d}; run 'train' first") from None


def cmd_eval(cfg: RunConfig, args) -> None:
    out = _out(cfg, args)
    cells = []
    for seed in _seeds(cfg, args):
        art = _load(cfg, args.variant, seed, out)
        d = pl.artifact_dir(cfg, args.variant, seed, str(out))
        cells += pl.evaluate(cfg, art, pl.load_seed_data(cfg, seed), trace_path=d / "traces.csv")
    rows = pl.aggregate(cells)
    base = out / args.variant
    _write(base / "report.csv", pl.report_csv(rows, cfg.hash()))
    _write(base / "cells.csv", pl.cells_csv(cells))
    _print_rows(rows)


def cmd_ablate(cfg: RunConfig, args) -> None:
    out = _out(cfg, args)
    variants = [args.variant] if args.variant_given else list(pl.VARIANTS)
    rows = []
    for v in variants:
        r, _, _ = pl.run_pipeline(cfg, v, _seeds(cfg, args), out_dir=str(out))
        rows += r
    _write(out / "ablation.csv", pl.report_csv(rows, cfg.hash()))
    _print_rows(rows)


def cmd_export(cfg: RunConfig, args) -> None:
    out = _out(cfg, args)
    for seed in _seeds(cfg, args):
        art = _load(cfg, args.variant, seed, out)
        data = pl.load_seed_data(cfg, seed)
        eps = data.episodes["human_test"] + data.episodes["robot_test"]
        path = pl.artifact_dir(cfg, args.variant, seed, str(out)) / "embeddings.csv"
        try:
            n = pl.export_embeddings(art, eps, path)
        except OSError as e:
            raise CLIError(f"cannot write {path}: {e.strerror}") from None
        print(f"seed {seed}: {n} clips -> {path}")


def _print_rows(rows: Sequence[pl.ReportRow]) -> None:
    for r in rows:
        if r.category == "all":
            print(f"{r.variant:16s} {r.condition:6s} speed={r.speed:4s} "
                  f"{r.mean:6.1f} +/- {r.stderr:4.1f}  ({r.seeds} seeds)")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "select-k": cmd_select_k,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protoskill", description="prototype skill discovery experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")
    for name in COMMANDS:
        s = sub.add_parser(name, help=name)
        s.add_argument("--config", metavar="PATH", help="JSON run config (defaults when omitted)")
        s.add_argument("--seed", type=int, metavar="N", help="single seed (default: every eval seed)")
        s.add_argument("--variant", metavar="NAME", default=None,
                       help=f"one of {', '.join(pl.VARIANTS)} (default: full)")
        s.add_argument("--out", metavar="DIR", help="output directory (data dir for gen-data)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    args.variant_given = args.variant is not None
    args.variant = args.variant or "full"
    try:
        if args.variant not in pl.VARIANTS:
            raise CLIError(f"unknown variant {args.variant!r}; choose from {', '.join(pl.VARIANTS)}")
        cfg = _config(args)
        COMMANDS[args.verb](cfg, args)
    except (CLIError, ValueError, OSError, RuntimeError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"protoskill {args.verb}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
