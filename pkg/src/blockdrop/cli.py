"""Command-line entry point: ``blockdrop <command> [--config PATH] [--seed N] [--out DIR] [--workers N]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import ConfigError, RunConfig, load_config
from .evaluation import STRATEGIES


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blockdrop", description="Train and evaluate input-dependent block dropping.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON run config")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="run directory (overrides the config)")
    common.add_argument("--workers", type=int, help="evaluation worker threads")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. schedule.finetune_epochs=10 (YAML value)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train-backbone", parents=[common], help="pretrain the backbone")
    sub.add_parser("train-policy", parents=[common], help="curriculum policy training on the frozen backbone")
    sub.add_parser("finetune", parents=[common], help="joint finetuning of backbone and policy")
    sub.add_parser("train-seq", parents=[common], help="train the per-block sequential gates")
    ev = sub.add_parser("eval", parents=[common], help="evaluate strategies on the test split")
    ev.add_argument("--strategy", action="append", choices=STRATEGIES,
                    help="repeatable; default: full, policy and the three heuristics")
    sw = sub.add_parser("sweep", parents=[common], help="one operating point per gamma")
    sw.add_argument("--gammas", type=float, nargs="+", help="overrides the config's gammas")
    sub.add_parser("difficulty-report", parents=[common], help="block usage per difficulty tag")
    return ap


def _overrides(args) -> dict:
    import yaml

    ov = {"seed": args.seed, "out": args.out, "workers": args.workers}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = yaml.safe_load(v)
    if getattr(args, "gammas", None):
        ov["gammas"] = list(args.gammas)
    return ov


def _setup_logging(cfg: RunConfig, command: str, verbose: bool) -> None:
    root = logging.getLogger("blockdrop")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        if getattr(h, "_blockdrop", False):
            root.removeHandler(h)
            h.close()
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(Path(cfg.out) / f"{command}.log", mode="w")
    sh = logging.StreamHandler(sys.stderr)
    sh.setLevel(logging.INFO if verbose else logging.WARNING)
    for h in (fh, sh):
        h.setFormatter(fmt)
        h._blockdrop = True  # type: ignore[attr-defined]
        root.addHandler(h)


def run(args) -> Path:
    """Execute one parsed command; returns the CSV it produced."""
    cfg = load_config(args.config, _overrides(args))
    P.check_dataset(cfg)
    rd = P.RunDir(cfg.out)
    cmd = args.command
    strategies = getattr(args, "strategy", None) or ["full", "policy", "firstk", "randomk", "distributek"]
    # prerequisites are checked before anything is written
    if cmd in ("train-policy", "train-seq", "sweep"):
        rd.need(rd.backbone)
    elif cmd == "finetune":
        rd.need(rd.backbone, rd.policy)
    elif cmd in ("eval", "difficulty-report"):
        if cmd == "difficulty-report" or set(strategies) - {"full", "seq"}:
            if not (rd.backbone_ft.exists() and rd.policy_ft.exists()):
                rd.need(rd.backbone, rd.policy)
        elif "full" in strategies:
            rd.need(rd.backbone)
        if cmd == "eval" and "seq" in strategies:
            rd.need(rd.backbone, rd.gates)
    P.write_effective_config(cfg)
    _setup_logging(cfg, cmd, args.verbose)

    train, test = P.load_data(cfg)
    metrics = P.METRICS_HEADER
    if cmd == "train-backbone":
        with P.CsvSink(rd.root / "backbone_metrics.csv", metrics) as sink:
            P.stage_backbone(cfg, train, test, sink)
        return sink.path
    if cmd == "train-policy":
        with P.CsvSink(rd.root / "policy_metrics.csv", metrics) as sink:
            P.stage_curriculum(cfg, train, test, sink=sink)
        return sink.path
    if cmd == "finetune":
        with P.CsvSink(rd.root / "finetune_metrics.csv", metrics) as sink:
            P.stage_finetune(cfg, train, test, sink=sink)
        return sink.path
    if cmd == "train-seq":
        P.stage_seq(cfg, train)
        with P.CsvSink(rd.root / "seq_metrics.csv", metrics) as sink:
            P.stage_eval(cfg, test, ["seq"], sink)
        return sink.path
    if cmd == "eval":
        with P.CsvSink(rd.root / "eval.csv", metrics) as sink:
            P.stage_eval(cfg, test, strategies, sink)
        return sink.path
    if cmd == "sweep":
        with P.CsvSink(rd.root / "sweep.csv", metrics) as sink:
            P.stage_sweep(cfg, train, test, sink)
        return sink.path
    with P.CsvSink(rd.root / "difficulty.csv", P.DIFFICULTY_HEADER) as sink:
        P.stage_difficulty(cfg, test, sink)
    return sink.path


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        path = run(args)
    except (ConfigError, P.MissingArtifactError) as exc:
        print(f"blockdrop {args.command}: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
