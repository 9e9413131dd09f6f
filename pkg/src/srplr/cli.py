"""Command-line entry points: preprocess, run, sweep, ablate.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import torch

from .config import ExperimentConfig, ValidationError
from .data import (
    DatasetSplit,
    build_splits,
    generate_synthetic,
    k_core_filter,
    load_interactions,
    load_split,
    save_split,
)
from .model import SRPLR, save_checkpoint
from .trainer import MetricsReport, compare_runs, evaluate_full_rank, train

logger = logging.getLogger("srplr")

SWEEP_AXES = {
    "lambda": ("lambda_", float, (0.0, 1.0)),
    "logic_negatives": ("logic_negatives", int, (0, 10)),
    "mask_r": ("mask_r", float, (0.0, 1.0)),
}

ABLATIONS = {
    "full": {},
    "w/o att": {"use_attention": False},
    "w/o neg_oper": {"use_negation": False},
    "w/o feat": {"use_feature": False},
}


def _claim_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ValidationError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def format_stats(stats: dict) -> str:
    return (
        "Users\tItems\tRatings\tAvg. Len.\tSparsity\n"
        f"{stats['users']:,}\t{stats['items']:,}\t{stats['ratings']:,}\t"
        f"{stats['avg_len']:.1f}\t{stats['sparsity'] * 100:.2f}%"
    )


def cmd_preprocess(
    raw_path,
    out_dir,
    k: int = 5,
    max_len: int = 50,
    format: str = "tsv",
    columns: Sequence[str | None] = ("user_id", "item_id", "timestamp"),
    force: bool = False,
) -> tuple[DatasetSplit, dict]:
    """load -> k-core -> leave-one-out; writes the split directory."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"output directory {out} is not empty (use --force to overwrite)")
    interactions = load_interactions(raw_path, format=format, columns=columns)
    if not interactions:
        raise ValidationError(f"{raw_path}: no interactions")
    filtered = k_core_filter(interactions, k)
    if not filtered:
        raise ValidationError(f"{raw_path}: nothing survives {k}-core filtering")
    split = build_splits(filtered, max_len)
    save_split(split, out)
    stats = split.stats()
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return split, stats


def load_dataset(cfg: ExperimentConfig) -> DatasetSplit:
    if cfg.dataset == "synthetic":
        return build_splits(generate_synthetic(cfg.synthetic_spec()), cfg.max_len)
    path = cfg.dataset_path()
    if not (path / "meta.json").exists():
        raise ValidationError(f"dataset {path} is not a preprocessed split directory")
    split = load_split(path)
    if split.max_len != cfg.max_len:
        raise ValidationError(f"split was built with max_len={split.max_len}, config says {cfg.max_len}")
    return split


def cmd_run(
    cfg: ExperimentConfig,
    out_dir=None,
    force: bool = False,
    split: DatasetSplit | None = None,
    label: str | None = None,
) -> MetricsReport:
    """Train and evaluate one configuration; writes report, log, checkpoint, config."""
    out = Path(out_dir or cfg.output_dir)
    cfg = cfg.replace(output_dir=str(out))
    _claim_dir(out, force)
    if split is None:
        split = load_dataset(cfg)
    fingerprint = split.fingerprint()
    chash = cfg.hash()
    (out / "config.json").write_text(cfg.dumps())

    torch.manual_seed(cfg.seed)
    model = SRPLR(split.item_count, cfg.encoder_config(), cfg.variant(), cfg.logic_config())
    tcfg = cfg.train_config()
    t0 = time.time()
    result = train(model, split, tcfg, out, fingerprint, chash)
    metrics = {
        name: evaluate_full_rank(model, getattr(split, name), tcfg.eval_ks, exclude_history=tcfg.exclude_history)
        for name in ("valid", "test")
        if getattr(split, name)
    }
    report = MetricsReport(
        metrics=metrics,
        label=label or cfg.variant().label,
        eval_ks=tuple(tcfg.eval_ks),
        exclude_history=tcfg.exclude_history,
        fingerprint=fingerprint,
        config=cfg.to_dict(),
        config_hash=chash,
        seed=cfg.seed,
        epoch=result.best_epoch or cfg.epochs,
        wall_clock=time.time() - t0,
        assumed=cfg.assumed_keys(),
    )
    report.write(out)
    save_checkpoint(model, out / "checkpoint.pt", fingerprint, chash)
    return report


def parse_axis_values(axis: str, values) -> list:
    if axis not in SWEEP_AXES:
        raise ValidationError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    _, typ, (lo, hi) = SWEEP_AXES[axis]
    if isinstance(values, str):
        values = [v for v in values.split(",") if v.strip()]
    out = []
    for v in values:
        try:
            x = typ(v) if typ is float else int(str(v))
        except ValueError:
            raise ValidationError(f"{axis} value {v!r} is not a valid {typ.__name__}") from None
        if not lo <= x <= hi:
            raise ValidationError(f"{axis} value {x} outside [{lo}, {hi}]")
        out.append(x)
    if not out:
        raise ValidationError("no sweep values given")
    if len(set(out)) != len(out):
        raise ValidationError("duplicate sweep values would share an output directory")
    return out


def cmd_sweep(
    cfg: ExperimentConfig, axis: str, values, out_dir=None, force: bool = False
) -> tuple[list[MetricsReport], list[dict]]:
    """One run per axis value, same seed. The mask axis also runs the
    logic-free backbone at every value for a robustness table."""
    values = parse_axis_values(axis, values)
    field_name = SWEEP_AXES[axis][0]
    out = Path(out_dir or cfg.output_dir)
    members = []
    for v in values:
        members.append((v, f"{axis}={v}", cfg.replace(**{field_name: v}), None))
        if axis == "mask_r":
            base = cfg.replace(mask_r=v, use_logic=False, lambda_=0.0, use_feature=True)
            members.append((v, f"{axis}={v}_backbone", base, "backbone"))
    for _, name, _, _ in members:
        d = out / name
        if d.exists() and any(d.iterdir()) and not force:
            raise ValidationError(f"sweep member directory {d} already exists")
    out.mkdir(parents=True, exist_ok=True)
    split = load_dataset(cfg)
    reports, rows = [], []
    for v, name, member_cfg, label in members:
        logger.info("sweep %s", name)
        r = cmd_run(member_cfg, out / name, force=force, split=split, label=label)
        reports.append(r)
        row = {"value": v, "label": r.label}
        row.update({f"test_{k}": val for k, val in r.metrics["test"].items()})
        rows.append(row)
    _write_rows(out / "summary.tsv", rows)
    if axis == "mask_r":
        (out / "robustness.tsv").write_text(robustness_table(values, rows))
    return reports, rows


def robustness_table(values: list, rows: list[dict]) -> str:
    """Metric x model rows, one column per masking probability."""
    labels = list(dict.fromkeys(r["label"] for r in rows))
    metrics = [k for k in rows[0] if k.startswith("test_")]
    lines = ["metric\tmodel\t" + "\t".join(f"r={v}" for v in values)]
    for m in metrics:
        for lab in sorted(labels, key=lambda x: x != "backbone"):
            cells = []
            for v in values:
                match = [r for r in rows if r["value"] == v and r["label"] == lab]
                cells.append(f"{match[0][m]:.4f}" if match else "")
            lines.append(f"{m[5:]}\t{lab}\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def cmd_ablate(
    cfg: ExperimentConfig, out_dir=None, force: bool = False
) -> tuple[dict[str, MetricsReport], dict]:
    """Full model plus the three ablations, shared seed; comparison against full."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = load_dataset(cfg)
    reports: dict[str, MetricsReport] = {}
    failures = {}
    for label, changes in ABLATIONS.items():
        member = cfg.replace(use_logic=True, **changes)
        d = out / label.replace("/", "").replace(" ", "_")
        try:
            reports[label] = cmd_run(member, d, force=force, split=split, label=label)
        except Exception as exc:  # keep going with the other variants
            logger.error("ablation %s failed: %s", label, exc)
            failures[label] = str(exc)
    comparison = {}
    if "full" in reports and len(reports) > 1:
        ordered = [reports["full"]] + [r for k, r in reports.items() if k != "full"]
        comparison = compare_runs(ordered)
    rows = []
    for label, r in reports.items():
        row = {"label": label}
        row.update({f"test_{k}": v for k, v in r.metrics["test"].items()})
        rows.append(row)
    if rows:
        _write_rows(out / "ablation.tsv", rows)
    (out / "comparison.json").write_text(
        json.dumps({"relative_to_full": comparison, "failures": failures}, indent=2, sort_keys=True) + "\n"
    )
    if failures and not reports:
        raise RuntimeError(f"every ablation run failed: {failures}")
    return reports, comparison


def _write_rows(path: Path, rows: list[dict]) -> None:
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srplr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("preprocess", help="k-core filter and split a raw interaction log")
    pre.add_argument("raw", help="delimiter-separated file with user, item, timestamp columns")
    pre.add_argument("--out", required=True)
    pre.add_argument("--k", type=int, default=5)
    pre.add_argument("--max-len", type=int, default=50)
    pre.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    pre.add_argument(
        "--columns",
        default="user_id,item_id,timestamp",
        help="comma-separated user,item,timestamp column names or 0-based positions (timestamp may be empty)",
    )
    pre.add_argument("--force", action="store_true")

    for name, helptext in (("run", "train and evaluate one config"), ("ablate", "full model and its three ablations")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true")

    sw = sub.add_parser("sweep", help="one run per value along an axis")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--out")
    sw.add_argument("--seed", type=int)
    sw.add_argument("--force", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "preprocess":
            cols = [c.strip() or None for c in args.columns.split(",")]
            if len(cols) == 2:
                cols.append(None)
            if len(cols) != 3:
                raise ValidationError("--columns needs user,item[,timestamp]")
            given = [c for c in cols if c is not None]
            if all(c.isdigit() for c in given):
                cols = [int(c) if c is not None else None for c in cols]
            elif any(c.isdigit() for c in given):
                raise ValidationError("--columns mixes names and positions")
            _, stats = cmd_preprocess(args.raw, args.out, args.k, args.max_len, args.format, cols, args.force)
            print(format_stats(stats))
            return 0

        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.command == "run":
            report = cmd_run(cfg, args.out, args.force)
            print(report.to_text(), end="")
        elif args.command == "sweep":
            _, rows = cmd_sweep(cfg, args.axis, args.values, args.out, args.force)
            for r in rows:
                print("\t".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
        elif args.command == "ablate":
            reports, comparison = cmd_ablate(cfg, args.out, args.force)
            for label, r in reports.items():
                print(f"[{label}] " + " ".join(f"{k}={v:.4f}" for k, v in r.metrics["test"].items()))
            print(json.dumps(comparison, indent=2))
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
