"""Command-line entry point: ``poq <subcommand> [--config PATH] [--seed N] [--out DIR] ...``.

Every config-file key is also a flag (``num_decoder_layers`` -> ``--num-decoder-layers``);
flags override the file.  Exit codes: 0 success, 2 configuration error,
3 runtime or data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .autodiff import DimensionError, NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint
from .data import DatasetFileError, generate, save_dataset
from .errors import ConfigError, InfeasibleAssignment
from .experiment import (CONFIG_KEYS, ConvergenceReport, build_config, class_concentration,
                         compare_queries, evaluate, parse_config_text, query_specialization,
                         read_curves_csv, resolve_dataset, specialization_csv, train)
from .metrics import CSV_HEADER, convergence_epoch, parse_csv_row, speedup_percentage
from .model import Transformer
from .plots import curves_svg

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

logger = logging.getLogger("poq")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", help="experiment seed (model init, data order, mixup)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings")
    for key in CONFIG_KEYS:
        if key in ("seed", "out"):
            continue
        p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="V", help=argparse.SUPPRESS)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poq", description="Primal object queries: training and experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="write a synthetic dataset file")
    _add_shared(p)

    p = sub.add_parser("train", help="train one model; writes metrics.csv and model.ckpt")
    _add_shared(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("compare-queries", help="train every mode x depth x seed arm")
    _add_shared(p)
    p.add_argument("--modes", default="primal,additive_shared")
    p.add_argument("--depths", default="1,2,3", help="comma-separated decoder layer counts")

    p = sub.add_parser("specialization", help="per-query predicted-class counts of a checkpoint")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("report", help="summarise a run or comparison directory")
    p.add_argument("dir", help="directory holding metrics.csv and/or curves.csv")
    p.add_argument("--out", help="where to write report.txt (default: the directory)")
    p.add_argument("-q", "--quiet", action="store_true")
    return parser


def _config_values(args) -> Dict[str, str]:
    values: Dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8")))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


def _config(args):
    return build_config(_config_values(args))


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("--out is required")
    return Path(out)


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate(cfg.data)
    path = out / "dataset.bin"
    save_dataset(ds, path)
    print(f"wrote {path} ({len(ds['train'])}/{len(ds['val'])}/{len(ds['test'])} samples)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    log = train(cfg, out_dir=out)
    if log.test is not None:
        print(CSV_HEADER)
        print(log.test.csv_row(log.best_epoch, "test"))
    print(f"wrote {out / 'metrics.csv'} and {out / 'model.ckpt'}")
    return EXIT_OK


def _load_model(args, cfg) -> Transformer:
    return load_checkpoint(args.checkpoint, Transformer(cfg.model))


def _checkpoint_config(args):
    """Config of a checkpoint: its run's config.txt, overridden by --config and flags."""
    values: Dict[str, str] = {}
    saved = Path(args.checkpoint).with_name("config.txt")
    if saved.is_file():
        values.update(parse_config_text(saved.read_text(encoding="utf-8")))
        values.pop("out", None)
    values.update(_config_values(args))
    return build_config(values)


def cmd_eval(args) -> int:
    cfg = _checkpoint_config(args)
    ds = resolve_dataset(cfg)
    report = evaluate(_load_model(args, cfg), ds, args.split)
    row = report.csv_row("", args.split)
    print(CSV_HEADER)
    print(row)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(CSV_HEADER + "\n" + row + "\n")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    modes = [m for m in args.modes.split(",") if m.strip()]
    report = compare_queries(cfg, modes, _ints(args.depths), out_dir=out)
    print(report.summary_csv(), end="")
    _print_speedup(report)
    print(f"wrote {out / 'curves.csv'} and {out / 'curves.svg'}")
    return EXIT_OK


def _print_speedup(report: ConvergenceReport) -> None:
    try:
        print(f"speedup (primal vs additive_shared, depths <= 3): {report.speedup():.1f}%")
    except ValueError as exc:
        print(f"speedup: {exc}")


def cmd_specialization(args) -> int:
    cfg = _checkpoint_config(args)
    ds = resolve_dataset(cfg)
    counts, normalized = query_specialization(_load_model(args, cfg), ds, args.split)
    text = specialization_csv(normalized)
    conc = class_concentration(counts)
    seen = conc[~np.isnan(conc)]
    share = float((seen >= 0.6).mean()) if seen.size else 0.0
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "specialization.csv").write_text(text)
    print(text, end="")
    print(f"classes with >= 60% of predictions from one query: {share:.0%}")
    return EXIT_OK


def _epochs_to_converge(curve: List[float]) -> int:
    e = convergence_epoch(curve) if len(curve) >= 5 else None
    return len(curve) if e is None else e + 1


def cmd_report(args) -> int:
    d = Path(args.dir)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    lines = []
    metrics = d / "metrics.csv"
    if metrics.is_file():
        rows = [parse_csv_row(l) for l in metrics.read_text().strip().splitlines()[1:]]
        val = [r for r in rows if r["split"] == "val"]
        test = [r for r in rows if r["split"] == "test"]
        if val:
            best = max(val, key=lambda r: r["cf1"])
            curve = [r["cf1"] for r in val]
            conv = convergence_epoch(curve) if len(curve) >= 5 else None
            lines.append(f"epochs: {len(val)}; best val C-F1 {best['cf1']:.4f} at epoch "
                         f"{best['epoch']}; convergence epoch "
                         f"{'none' if conv is None else conv}")
            (d / "curves.svg").write_text(curves_svg({"val C-F1": curve}, title="validation C-F1"))
        for r in test:
            lines.append("test: " + ", ".join(f"{k} {r[k]:.4f}" for k in
                                              ("cp", "cr", "cf1", "op", "or", "of1", "map")
                                              if r[k] is not None))
    curves_path = d / "curves.csv"
    if curves_path.is_file():
        curves = read_curves_csv(curves_path.read_text())
        lines.append("arm,seed,convergence_epoch,best_cf1")
        by_arm: Dict[str, List[int]] = {}
        for (arm, seed), curve in sorted(curves.items()):
            conv = convergence_epoch(curve) if len(curve) >= 5 else None
            lines.append(f"{arm},{seed},{'' if conv is None else conv},{max(curve):.4f}")
            by_arm.setdefault(arm, []).append(_epochs_to_converge(curve))
        base, ours = [], []
        for arm, epochs in sorted(by_arm.items()):
            if arm.startswith("additive_shared-"):
                twin = "primal-" + arm.split("-", 1)[1]
                depth = int(arm.split("-L", 1)[1].split("-", 1)[0])
                if twin in by_arm and depth <= 3:
                    base.append(np.mean(epochs))
                    ours.append(np.mean(by_arm[twin]))
        if base:
            lines.append(f"speedup (primal vs additive_shared): "
                         f"{speedup_percentage(base, ours):.1f}%")
        (d / "curves.svg").write_text(curves_svg(
            {f"{a} s{s}": c for (a, s), c in sorted(curves.items())}, title="validation C-F1"))
    if not lines:
        raise FileNotFoundError(f"{d} holds neither metrics.csv nor curves.csv")
    text = "\n".join(lines) + "\n"
    out = Path(args.out) if args.out else d
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare-queries": cmd_compare,
    "specialization": cmd_specialization,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s")
    try:
        if getattr(args, "seed", None) is not None and not args.seed.lstrip("-").isdigit():
            raise ConfigError(f"--seed must be an integer, got {args.seed!r}")
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleAssignment, DatasetFileError, CheckpointError, DimensionError,
            NonFiniteError, KeyError, OSError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME

if __name__ == "__main__":
    sys.exit(main())
