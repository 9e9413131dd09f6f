"""The dual feature/logic recommender.

The feature half is a backbone encoder over ID embeddings. The logic half
projects the same ID embeddings into Beta space, conjoins the history (and
negated sampled negatives) into one Beta embedding per sequence, and reads
out its mean. Scores are the dot product of the concatenated
representations with the concatenated item tables.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .beta import (
    EPS_CLAMP,
    MAX_CLAMP,
    AttentionNet,
    BetaEmbedding,
    TransferParams,
    attention_weights,
    beta_mean,
    conjoin,
    kl_distance,
    negate,
    project_to_beta,
    uniform_weights,
)
from .encoders import EncoderConfig, ItemEmbeddingTable, build_encoder, embed_sequence, encode

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelVariant:
    use_attention: bool = True
    use_negation: bool = True
    use_feature: bool = True
    use_logic: bool = True
    lambda_: float = 0.5

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if not (self.use_feature or self.use_logic):
            raise ValueError("at least one of use_feature/use_logic must be on")

    @property
    def label(self) -> str:
        if not self.use_logic:
            return "backbone"
        off = []
        if not self.use_attention:
            off.append("w/o att")
        if not self.use_negation:
            off.append("w/o neg_oper")
        if not self.use_feature:
            off.append("w/o feat")
        return ", ".join(off) if off else "full"


@dataclass(frozen=True)
class LogicConfig:
    eps_clamp: float = EPS_CLAMP
    max_clamp: float = MAX_CLAMP
    soft_clamp: bool = False
    attend_pre_negation: bool = False
    logic_loss_form: str = "literal"
    rec_loss_form: str = "bce"
    transfer_init_std: float | None = None
    embedding_init_std: float = 0.02

    def __post_init__(self):
        if self.logic_loss_form not in ("literal", "bounded"):
            raise ValueError(f"logic_loss_form must be literal or bounded, got {self.logic_loss_form!r}")
        if self.rec_loss_form not in ("bce", "softmax"):
            raise ValueError(f"rec_loss_form must be bce or softmax, got {self.rec_loss_form!r}")
        if not 0 < self.eps_clamp < self.max_clamp:
            raise ValueError("need 0 < eps_clamp < max_clamp")

    @property
    def bounds(self) -> tuple[float, float]:
        return (self.eps_clamp, self.max_clamp)


@dataclass
class ReasoningInput:
    positive_ids: list[int]
    negative_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.positive_ids:
            raise ValueError("reasoning needs at least one positive item")
        if set(self.negative_ids) & set(self.positive_ids):
            raise ValueError("negative ids overlap the positives")


# ---------------------------------------------------------------------------
# functional pieces


def reason_sequence(
    positives: BetaEmbedding,
    positive_mask: torch.Tensor,
    negatives: BetaEmbedding | None,
    net: nn.Module,
    variant: ModelVariant,
    bounds=(EPS_CLAMP, MAX_CLAMP),
    attend_pre_negation: bool = False,
) -> BetaEmbedding:
    """Conjoin positives with negated negatives over the participant axis.

    ``positives`` is ``[B, m, d]`` with ``positive_mask`` ``[B, m]``;
    ``negatives`` is ``[B, k, d]`` (all real) or None.
    """
    if torch.any(positive_mask.sum(dim=-1) < 1):
        raise ValueError("reasoning needs at least one positive item per row")
    parts, attn_in, mask = positives, positives, positive_mask
    if variant.use_negation and negatives is not None and negatives.alpha.shape[-2] > 0:
        negated = negate(negatives, bounds)
        seen = negatives if attend_pre_negation else negated
        parts = BetaEmbedding(
            torch.cat([positives.alpha, negated.alpha], -2), torch.cat([positives.beta, negated.beta], -2)
        )
        attn_in = BetaEmbedding(
            torch.cat([positives.alpha, seen.alpha], -2), torch.cat([positives.beta, seen.beta], -2)
        )
        neg_mask = torch.ones(negatives.alpha.shape[:-1], dtype=torch.bool, device=mask.device)
        mask = torch.cat([positive_mask, neg_mask], -1)
    if variant.use_attention:
        weights = attention_weights(attn_in, net, mask)
    else:
        weights = uniform_weights(parts, mask)
    return conjoin(parts, weights, bounds)


def logic_loss(
    sequence: BetaEmbedding,
    target: BetaEmbedding,
    negative: BetaEmbedding,
    form: str = "literal",
) -> torch.Tensor:
    """Per-row pair-wise loss on KL distances to the target and to a negative.

    ``literal`` is log sigmoid(D+ - D-), minimised by pushing D+ below D-;
    ``bounded`` is -log sigmoid(D- - D+).
    """
    d_pos = kl_distance(target, sequence)
    d_neg = kl_distance(negative, sequence)
    if form == "literal":
        return F.logsigmoid(d_pos - d_neg)
    if form == "bounded":
        return -F.logsigmoid(d_neg - d_pos)
    raise ValueError(f"unknown logic loss form {form!r}")


def predict_scores(
    H_f: torch.Tensor | None,
    H_l: torch.Tensor | None,
    M: torch.Tensor | None,
    E: torch.Tensor | None,
    variant: ModelVariant,
) -> torch.Tensor:
    """(H_f ⊕ H_l)(M ⊕ E)^T over real items (M and E exclude the padding row)."""
    parts = []
    if variant.use_feature:
        if H_f.shape[-1] != M.shape[-1]:
            raise ValueError("H_f and M disagree on d")
        parts.append(H_f @ M.T)
    if variant.use_logic:
        if H_l.shape[-1] != E.shape[-1]:
            raise ValueError("H_l and E disagree on d")
        parts.append(H_l @ E.T)
    dtype = parts[0].dtype
    for p in parts[1:]:
        dtype = torch.promote_types(dtype, p.dtype)
    return sum(p.to(dtype) for p in parts)


def rec_loss(scores: torch.Tensor, target: torch.Tensor, form: str = "bce") -> torch.Tensor:
    """Per-row recommendation loss. ``target`` holds dense ids in [1, |V|];
    column i of ``scores`` is item i+1."""
    V = scores.shape[-1]
    target = torch.as_tensor(target, device=scores.device)
    if torch.any(target < 1) or torch.any(target > V):
        raise ValueError(f"target ids must lie in [1, {V}]")
    idx = target.long() - 1
    if form == "softmax":
        return F.cross_entropy(scores, idx, reduction="none")
    if form != "bce":
        raise ValueError(f"unknown rec loss form {form!r}")
    p = torch.sigmoid(scores).clamp(1e-8, 1 - 1e-8)
    y = F.one_hot(idx, V).to(scores.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).sum(dim=-1)


def total_loss(rec: torch.Tensor, logic: torch.Tensor, lam: float) -> torch.Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0:
        return rec
    return rec + lam * logic


# ---------------------------------------------------------------------------


def compact_left(history: torch.Tensor) -> torch.Tensor:
    """Push padding to the left, keeping the order of real items."""
    order = torch.sort((history != 0).to(torch.int8), dim=1, stable=True).indices
    return torch.gather(history, 1, order)


class SRPLR(nn.Module):
    def __init__(
        self,
        item_count: int,
        encoder_config: EncoderConfig = EncoderConfig(),
        variant: ModelVariant = ModelVariant(),
        logic: LogicConfig = LogicConfig(),
    ):
        super().__init__()
        d = encoder_config.hidden_size
        self.item_count = item_count
        self.encoder_config = encoder_config
        self.variant = variant
        self.logic = logic
        self.item_embedding = ItemEmbeddingTable(item_count, d, logic.embedding_init_std)
        self.encoder = build_encoder(encoder_config)
        # unit-scale shape parameters at init; smaller scales start entirely under the clamp floor
        std = logic.transfer_init_std
        if std is None:
            std = 1.0 / (logic.embedding_init_std * math.sqrt(d))
        self.transfer = TransferParams(d, std)
        self.attention = AttentionNet(d)
        self.logic_dtype = torch.float64

    @property
    def dim(self) -> int:
        return self.encoder_config.hidden_size

    # -- building blocks ---------------------------------------------------

    def item_beta(self, ids: torch.Tensor) -> BetaEmbedding:
        rows = embed_sequence(ids, self.item_embedding)
        return project_to_beta(
            rows, self.transfer, self.logic.bounds, self.logic.soft_clamp, dtype=self.logic_dtype
        )

    def all_item_beta(self) -> BetaEmbedding:
        return project_to_beta(
            self.item_embedding.weight[1:],
            self.transfer,
            self.logic.bounds,
            self.logic.soft_clamp,
            dtype=self.logic_dtype,
        )

    def feature(self, history: torch.Tensor) -> torch.Tensor:
        mask = history != 0
        return encode(self.item_embedding(history), mask, self.encoder)

    def reason(self, history: torch.Tensor, negatives: torch.Tensor | None = None) -> BetaEmbedding:
        mask = history != 0
        pos = self.item_beta(history)
        neg = self.item_beta(negatives) if negatives is not None and negatives.shape[-1] else None
        return reason_sequence(
            pos, mask, neg, self.attention, self.variant, self.logic.bounds, self.logic.attend_pre_negation
        )

    def reason_one(self, inp: ReasoningInput) -> BetaEmbedding:
        """Single-example reasoning; returns a [d]-shaped embedding."""
        pos = torch.tensor([inp.positive_ids], dtype=torch.long)
        neg = torch.tensor([inp.negative_ids], dtype=torch.long) if inp.negative_ids else None
        return self.reason(pos, neg).select(0)

    def representations(self, history, negatives=None):
        history = compact_left(history)
        H_f = self.feature(history) if self.variant.use_feature else None
        v_bar = self.reason(history, negatives) if self.variant.use_logic else None
        H_l = beta_mean(v_bar) if v_bar is not None else None
        return H_f, H_l, v_bar

    def item_tables(self):
        M = self.item_embedding.weight[1:] if self.variant.use_feature else None
        E = beta_mean(self.all_item_beta()) if self.variant.use_logic else None
        return M, E

    # -- public API --------------------------------------------------------

    def scores(self, history: torch.Tensor, negatives: torch.Tensor | None = None) -> torch.Tensor:
        """Raw scores over items 1..|V| (column j is item j+1)."""
        H_f, H_l, _ = self.representations(history, negatives)
        M, E = self.item_tables()
        return predict_scores(H_f, H_l, M, E, self.variant)

    def losses(
        self,
        history: torch.Tensor,
        target: torch.Tensor,
        negatives: torch.Tensor | None = None,
        loss_negative: torch.Tensor | None = None,
    ) -> dict[str, torch.Tensor]:
        """Batch-mean rec, logic and total losses."""
        H_f, H_l, v_bar = self.representations(history, negatives)
        M, E = self.item_tables()
        scores = predict_scores(H_f, H_l, M, E, self.variant)
        rec = rec_loss(scores, target, self.logic.rec_loss_form).mean()
        lam = self.variant.lambda_
        if self.variant.use_logic and loss_negative is not None and lam > 0:
            logic = logic_loss(
                v_bar, self.item_beta(target), self.item_beta(loss_negative), self.logic.logic_loss_form
            ).mean()
        else:
            logic = torch.zeros((), dtype=self.logic_dtype)
        total = total_loss(rec, logic.to(rec.dtype), lam)
        return {"rec": rec, "logic": logic, "total": total}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SRPLR, path, fingerprint: str = "", config_hash: str = "", extra=None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "item_count": model.item_count,
        "encoder_config": model.encoder_config.to_dict(),
        "variant": asdict(model.variant),
        "logic": asdict(model.logic),
        "fingerprint": fingerprint,
        "config_hash": config_hash,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(
    path,
    expected_fingerprint: str | None = None,
    expected_encoder: EncoderConfig | None = None,
) -> tuple[SRPLR, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    enc = EncoderConfig(**payload["encoder_config"])
    if expected_encoder is not None and enc != expected_encoder:
        raise ValueError(f"checkpoint encoder config {enc} does not match {expected_encoder}")
    if expected_fingerprint is not None and payload["fingerprint"] != expected_fingerprint:
        raise ValueError(
            f"checkpoint was trained against id map {payload['fingerprint']!r}, "
            f"not {expected_fingerprint!r}"
        )
    model = SRPLR(
        payload["item_count"], enc, ModelVariant(**payload["variant"]), LogicConfig(**payload["logic"])
    )
    model.load_state_dict(payload["state_dict"])
    return model, payload
