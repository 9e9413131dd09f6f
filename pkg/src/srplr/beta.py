"""Beta-distribution embeddings and the probabilistic logic operators on them.

Every operator here is closed: outputs are clamped back into
``[eps, max]`` so they can be composed freely. Leading dimensions broadcast;
the participant axis of conjunction/attention is always ``-2`` and the
embedding axis ``-1``.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

EPS_CLAMP = 0.05
MAX_CLAMP = 1e9


class BetaEmbedding(NamedTuple):
    alpha: torch.Tensor
    beta: torch.Tensor

    @property
    def dim(self) -> int:
        return self.alpha.shape[-1]

    def clamp(self, bounds=(EPS_CLAMP, MAX_CLAMP)) -> "BetaEmbedding":
        lo, hi = bounds
        return BetaEmbedding(self.alpha.clamp(lo, hi), self.beta.clamp(lo, hi))

    def to(self, *args, **kwargs) -> "BetaEmbedding":
        return BetaEmbedding(self.alpha.to(*args, **kwargs), self.beta.to(*args, **kwargs))

    def select(self, idx) -> "BetaEmbedding":
        """Index both parameter tensors (plain ``[]`` indexes the tuple)."""
        return BetaEmbedding(self.alpha[idx], self.beta[idx])


class TransferParams(nn.Module):
    """The two d x d matrices mapping ID embeddings to shape parameters."""

    def __init__(self, dim: int, init_std: float | None = None):
        super().__init__()
        self.W_alpha = nn.Parameter(torch.empty(dim, dim))
        self.W_beta = nn.Parameter(torch.empty(dim, dim))
        self.reset_parameters(init_std)

    def reset_parameters(self, init_std: float | None = None):
        for w in (self.W_alpha, self.W_beta):
            if init_std is None:
                nn.init.xavier_uniform_(w)
            else:
                nn.init.normal_(w, 0.0, init_std)


class AttentionNet(nn.Module):
    """2d -> 2d (ReLU) -> d; produces per-dimension conjunction logits."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.hidden = nn.Linear(2 * dim, 2 * dim)
        self.out = nn.Linear(2 * dim, dim)
        nn.init.xavier_uniform_(self.hidden.weight)
        nn.init.xavier_uniform_(self.out.weight)
        nn.init.zeros_(self.hidden.bias)
        nn.init.zeros_(self.out.bias)

    def forward(self, v: BetaEmbedding) -> torch.Tensor:
        x = torch.cat([v.alpha, v.beta], dim=-1)
        w = self.hidden.weight.to(x.dtype), self.hidden.bias.to(x.dtype)
        h = F.relu(F.linear(x, *w))
        return F.linear(h, self.out.weight.to(x.dtype), self.out.bias.to(x.dtype))


def project_to_beta(
    rows: torch.Tensor,
    params: TransferParams,
    bounds=(EPS_CLAMP, MAX_CLAMP),
    soft: bool = False,
    dtype: torch.dtype | None = None,
) -> BetaEmbedding:
    """alpha = clamp(rows @ W_alpha), beta = clamp(rows @ W_beta).

    ``soft`` swaps the hard floor for ``eps + softplus(.)`` so the gradient
    never vanishes below the floor. ``dtype`` casts before the matmul.
    """
    d = params.W_alpha.shape[0]
    if rows.shape[-1] != d:
        raise ValueError(f"rows have width {rows.shape[-1]}, transfer matrices expect {d}")
    if dtype is not None:
        rows = rows.to(dtype)
    a = rows @ params.W_alpha.to(rows.dtype)
    b = rows @ params.W_beta.to(rows.dtype)
    lo, hi = bounds
    if soft:
        a, b = lo + F.softplus(a), lo + F.softplus(b)
    return BetaEmbedding(a.clamp(lo, hi), b.clamp(lo, hi))


def negate(v: BetaEmbedding, bounds=(EPS_CLAMP, MAX_CLAMP)) -> BetaEmbedding:
    """Component-wise reciprocal of both shape parameters."""
    return BetaEmbedding(torch.reciprocal(v.alpha), torch.reciprocal(v.beta)).clamp(bounds)


def attention_weights(
    participants: BetaEmbedding, net: nn.Module, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Softmax over participants (axis -2), independently per dimension.

    ``mask`` (shape ``[..., n]``) marks real participants; masked ones get
    weight 0.
    """
    if participants.alpha.shape[-2] == 0:
        raise ValueError("attention over zero participants")
    logits = net(participants)
    if mask is not None:
        logits = logits.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    return torch.softmax(logits, dim=-2)


def uniform_weights(participants: BetaEmbedding, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Average pooling weights: 1/n for each real participant."""
    a = participants.alpha
    if a.shape[-2] == 0:
        raise ValueError("pooling over zero participants")
    if mask is None:
        return torch.full_like(a, 1.0 / a.shape[-2])
    m = mask.to(a.dtype).unsqueeze(-1).expand_as(a)
    return m / m.sum(dim=-2, keepdim=True)


def conjoin(
    participants: BetaEmbedding,
    weights: torch.Tensor,
    bounds=(EPS_CLAMP, MAX_CLAMP),
    check: bool = True,
) -> BetaEmbedding:
    """Weighted sum of shape parameters over the participant axis.

    Weights must be non-negative with every (per-dimension) column summing
    to one; the result is then the normalised weighted product of densities.
    """
    if check:
        w = weights.detach()
        if torch.any(w < 0):
            raise ValueError("conjunction weights must be non-negative")
        sums = w.sum(dim=-2)
        if torch.any((sums - 1).abs() > 1e-6):
            raise ValueError(
                f"conjunction weight columns must sum to 1 (max error {(sums - 1).abs().max():.3g})"
            )
    a = (weights * participants.alpha).sum(dim=-2)
    b = (weights * participants.beta).sum(dim=-2)
    return BetaEmbedding(a, b).clamp(bounds)


def disjoin(
    participants: BetaEmbedding,
    net: nn.Module,
    mask: torch.Tensor | None = None,
    bounds=(EPS_CLAMP, MAX_CLAMP),
) -> BetaEmbedding:
    """De Morgan: not(and(not x for x in participants))."""
    negs = negate(participants, bounds)
    return negate(conjoin(negs, attention_weights(negs, net, mask), bounds), bounds)


def log_beta_fn(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.lgamma(a) + torch.lgamma(b) - torch.lgamma(a + b)


def kl_distance(target: BetaEmbedding, sequence: BetaEmbedding) -> torch.Tensor:
    """Sum over dimensions of KL(Beta(target) || Beta(sequence)).

    The target distribution is the first KL argument.
    """
    at, bt = target.alpha, target.beta
    as_, bs = sequence.alpha, sequence.beta
    kl = (
        log_beta_fn(as_, bs)
        - log_beta_fn(at, bt)
        + (at - as_) * torch.digamma(at)
        + (bt - bs) * torch.digamma(bt)
        + (as_ - at + bs - bt) * torch.digamma(at + bt)
    )
    return kl.sum(dim=-1)


def beta_mean(v: BetaEmbedding) -> torch.Tensor:
    return v.alpha / (v.alpha + v.beta)
