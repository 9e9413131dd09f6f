"""Training loop, all-rank evaluation and run comparison."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import (
    DatasetSplit,
    SequenceExample,
    examples_to_arrays,
    mask_histories_batch,
    sample_negatives_batch,
)
from .model import SRPLR, save_checkpoint

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss_rec", "loss_logic", "loss_total", "valid_hit@10", "valid_ndcg@10")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2048
    learning_rate: float = 0.002
    logic_negatives: int = 1
    mask_r: float = 0.0
    seed: int = 2023
    eval_ks: tuple[int, ...] = (5, 10)
    eval_every: int = 1
    checkpoint_every: int = 0
    keep_best_valid: bool = False
    grad_clip: float = 0.0
    exclude_history: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if not 0 <= self.logic_negatives <= 10:
            raise ValueError(f"logic_negatives must be in [0, 10], got {self.logic_negatives}")
        if not 0.0 <= self.mask_r <= 1.0:
            raise ValueError(f"mask_r must be in [0, 1], got {self.mask_r}")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ValueError("eval_ks must be positive integers")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, losses: dict, snapshot: str | None):
        self.epoch, self.batch, self.losses, self.snapshot = epoch, batch, losses, snapshot
        where = f" (snapshot at {snapshot})" if snapshot else ""
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}: {losses}{where}")


@dataclass
class MetricsReport:
    metrics: dict[str, dict[str, float]]
    label: str = ""
    eval_ks: tuple[int, ...] = (5, 10)
    exclude_history: bool = False
    fingerprint: str = ""
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int | None = None
    epoch: int | None = None
    wall_clock: float = 0.0
    # config keys whose values are conventions rather than published settings
    assumed: tuple[str, ...] = ()

    def protocol(self) -> tuple:
        return (tuple(self.eval_ks), self.exclude_history, self.fingerprint)

    def to_text(self) -> str:
        lines = [
            f"label={self.label}",
            f"config_hash={self.config_hash}",
            f"seed={self.seed}",
            f"epoch={self.epoch}",
            f"wall_clock={self.wall_clock:.3f}",
            f"assumed={','.join(self.assumed)}",
        ]
        for split in sorted(self.metrics):
            for name, value in sorted(self.metrics[split].items()):
                lines.append(f"{split}.{name}={value:.6f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_ks"] = list(self.eval_ks)
        d["assumed"] = list(self.assumed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["eval_ks"] = tuple(d.get("eval_ks", (5, 10)))
        d["assumed"] = tuple(d.get("assumed", ()))
        return cls(**d)

    def write(self, out_dir, stem: str = "metrics") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.txt").write_text(self.to_text())
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# metrics


def full_ranks(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """1-based rank of each target among all items; ties go to the smaller id.

    Column j of ``scores`` is item j+1.
    """
    idx = targets.long() - 1
    s_t = scores.gather(1, idx[:, None])
    ids = torch.arange(scores.shape[1], device=scores.device)[None, :]
    ahead = (scores > s_t) | ((scores == s_t) & (ids < idx[:, None]))
    return ahead.sum(dim=1) + 1


def hit_at_k(ranks: np.ndarray, k: int) -> np.ndarray:
    return (np.asarray(ranks) <= k).astype(np.float64)


def ndcg_at_k(ranks: np.ndarray, k: int) -> np.ndarray:
    ranks = np.asarray(ranks, dtype=np.float64)
    return np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)


def metrics_from_ranks(ranks, ks: Sequence[int]) -> dict[str, float]:
    ranks = np.asarray(ranks)
    out = {}
    for k in ks:
        out[f"hit@{k}"] = float(hit_at_k(ranks, k).mean()) if len(ranks) else 0.0
        out[f"ndcg@{k}"] = float(ndcg_at_k(ranks, k).mean()) if len(ranks) else 0.0
    return out


@torch.no_grad()
def rank_examples(
    model: SRPLR,
    examples: Sequence[SequenceExample],
    batch_size: int = 1024,
    exclude_history: bool = False,
) -> np.ndarray:
    was_training = model.training
    model.eval()
    _, hist, targets = examples_to_arrays(examples)
    ranks = []
    try:
        for start in range(0, len(targets), batch_size):
            h = torch.from_numpy(hist[start : start + batch_size])
            t = torch.from_numpy(targets[start : start + batch_size])
            scores = model.scores(h)
            if exclude_history:
                seen = torch.zeros_like(scores, dtype=torch.bool)
                cols = (h - 1).clamp(min=0)
                seen.scatter_(1, cols, h > 0)
                seen[torch.arange(len(t)), t - 1] = False
                scores = scores.masked_fill(seen, float("-inf"))
            ranks.append(full_ranks(scores, t).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)


def evaluate_full_rank(
    model: SRPLR,
    examples: Sequence[SequenceExample],
    ks: Sequence[int] = (5, 10),
    batch_size: int = 1024,
    exclude_history: bool = False,
) -> dict[str, float]:
    """HIT@K / NDCG@K with the target ranked against every item."""
    if not examples:
        raise ValueError("cannot evaluate an empty split")
    ranks = rank_examples(model, examples, batch_size, exclude_history)
    return metrics_from_ranks(ranks, ks)


def compare_runs(reports: Sequence[MetricsReport], split: str = "test") -> dict[str, dict[str, str]]:
    """Relative change of every report against the first, as percentages."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    base = reports[0]
    for r in reports[1:]:
        if r.protocol() != base.protocol():
            raise ValueError(f"evaluation protocol mismatch: {r.protocol()} vs {base.protocol()}")
    table = {}
    for i, r in enumerate(reports[1:], start=1):
        row = {}
        for name, a in base.metrics[split].items():
            b = r.metrics[split][name]
            row[name] = "n/a" if a == 0 else f"{(b - a) / a * 100:+.2f}%"
        table[r.label or f"run{i}"] = row
    return table


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SRPLR
    log: list[dict]
    best_epoch: int | None = None


def _write_log(path: Path, rows: list[dict], config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, delimiter="\t", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def train(
    model: SRPLR,
    split: DatasetSplit,
    config: TrainConfig,
    out_dir=None,
    fingerprint: str = "",
    config_hash: str = "",
) -> TrainResult:
    """Adam over shuffled training examples for ``config.epochs`` epochs."""
    if model.item_count != split.item_count:
        raise ValueError(
            f"model has {model.item_count} items but the split has {split.item_count}"
        )
    out = Path(out_dir) if out_dir is not None else None
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    _, hist_all, targets_all = examples_to_arrays(split.train)
    N = len(targets_all)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    use_logic = model.variant.use_logic
    n_neg = config.logic_negatives if use_logic and model.variant.use_negation else 0
    want_pair_neg = use_logic and model.variant.lambda_ > 0

    log: list[dict] = []
    best = (-1.0, None, None)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(N)
        sums = {"rec": 0.0, "logic": 0.0, "total": 0.0}
        for b, start in enumerate(range(0, N, config.batch_size)):
            idx = order[start : start + config.batch_size]
            hist, tgt = hist_all[idx], targets_all[idx]
            if config.mask_r > 0:
                hist = mask_histories_batch(hist, config.mask_r, rng)
            extra = int(want_pair_neg)
            negs = sample_negatives_batch(hist, tgt, n_neg + extra, split.item_count, rng)
            h = torch.from_numpy(hist)
            t = torch.from_numpy(tgt)
            reasoning_negs = torch.from_numpy(negs[:, :n_neg]) if n_neg else None
            pair_neg = torch.from_numpy(negs[:, n_neg]) if want_pair_neg else None
            losses = model.losses(h, t, reasoning_negs, pair_neg)
            if not all(torch.isfinite(v) for v in losses.values()):
                snap = None
                if out is not None:
                    snap = str(out / "diverged.pt")
                    save_checkpoint(model, snap, fingerprint, config_hash, {"epoch": epoch, "batch": b})
                raise TrainingDiverged(epoch, b, {k: float(v) for k, v in losses.items()}, snap)
            opt.zero_grad()
            losses["total"].backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            for k in sums:
                sums[k] += losses[k].item() * len(idx)
        row = {"epoch": epoch}
        for k in ("rec", "logic", "total"):
            row[f"loss_{k}"] = sums[k] / max(N, 1)
        if split.valid and config.eval_every and epoch % config.eval_every == 0:
            m = evaluate_full_rank(model, split.valid, (10,), exclude_history=config.exclude_history)
            row["valid_hit@10"], row["valid_ndcg@10"] = m["hit@10"], m["ndcg@10"]
            if config.keep_best_valid and m["ndcg@10"] > best[0]:
                best = (m["ndcg@10"], epoch, {k: v.clone() for k, v in model.state_dict().items()})
        log.append(row)
        logger.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in row.items() if k != "epoch"})
        if out is not None:
            _write_log(out / "train_log.tsv", log, config_hash)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(model, out / f"checkpoint_epoch{epoch}.pt", fingerprint, config_hash)

    if config.keep_best_valid and best[2] is not None:
        model.load_state_dict(best[2])
    return TrainResult(model, log, best[1])
