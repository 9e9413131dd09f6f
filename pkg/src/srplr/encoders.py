"""Item ID embeddings and the feature-side sequence encoders.

Histories are left-padded with 0. Encoders take the embedded sequence
plus a boolean mask of real positions and return the hidden state at the
final position, which is always the most recent real item.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "self_attention"
    hidden_size: int = 64
    layers: int = 2
    heads: int = 2
    dropout: float = 0.5
    max_len: int = 50
    inner_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("gru", "self_attention"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.hidden_size < 1 or self.layers < 1 or self.max_len < 1:
            raise ValueError("hidden_size, layers and max_len must be positive")
        if self.kind == "self_attention" and self.hidden_size % self.heads:
            raise ValueError("hidden_size must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class ItemEmbeddingTable(nn.Embedding):
    """(|V|+1) x d table; row 0 is padding, zero and never updated."""

    def __init__(self, item_count: int, dim: int, init_std: float = 0.02):
        super().__init__(item_count + 1, dim, padding_idx=0)
        self.item_count = item_count
        nn.init.normal_(self.weight, 0.0, init_std)
        with torch.no_grad():
            self.weight[0].zero_()

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return embed_sequence(ids, self)


def embed_sequence(history: torch.Tensor, table: nn.Embedding) -> torch.Tensor:
    """Row lookup; padding rows come back as zeros."""
    if history.numel() and (history.min() < 0 or history.max() >= table.num_embeddings):
        raise IndexError(
            f"item id out of range [0, {table.num_embeddings - 1}]: "
            f"min {int(history.min())}, max {int(history.max())}"
        )
    return F.embedding(history, table.weight, table.padding_idx)


def _left_to_right_padded(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    L = x.shape[1]
    idx = (torch.arange(L, device=x.device)[None, :] + (L - lengths)[:, None]) % L
    return torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[2]))


class GRUEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.hidden_size
        self.config = config
        self.emb_dropout = nn.Dropout(config.dropout)
        self.gru = nn.GRU(
            d, d, config.layers, batch_first=True, dropout=config.dropout if config.layers > 1 else 0.0
        )
        for name, p in self.gru.named_parameters():
            if name.startswith("weight"):
                for block in p.data.chunk(3, dim=0):
                    nn.init.orthogonal_(block)
            else:
                nn.init.zeros_(p)

    def forward(self, seq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        lengths = mask.sum(dim=1)
        if torch.any(lengths < 1):
            raise ValueError("every history needs at least one real item")
        x = _left_to_right_padded(self.emb_dropout(seq), lengths)
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, h_n = self.gru(packed)
        return h_n[-1]


class _MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.attn_dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        h = self.heads

        def split(t):
            return t.view(B, L, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        attn = self.attn_dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(B, L, d)
        return self.out(ctx)


class _TransformerBlock(nn.Module):
    def __init__(self, d: int, heads: int, inner: int, dropout: float):
        super().__init__()
        self.attn = _MultiHeadSelfAttention(d, heads, dropout)
        self.norm1 = nn.LayerNorm(d, eps=1e-12)
        self.ff = nn.Sequential(nn.Linear(d, inner), nn.GELU(), nn.Linear(inner, d))
        self.norm2 = nn.LayerNorm(d, eps=1e-12)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, allowed):
        x = self.norm1(x + self.dropout(self.attn(x, allowed)))
        return self.norm2(x + self.dropout(self.ff(x)))


class SelfAttentionEncoder(nn.Module):
    """Causal transformer encoder with learned absolute positions.

    Positions count from the first real item, so extra left padding does not
    move them.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.hidden_size
        self.config = config
        self.position = nn.Embedding(config.max_len + 1, d, padding_idx=0)
        self.norm = nn.LayerNorm(d, eps=1e-12)
        self.dropout = nn.Dropout(config.dropout)
        inner = config.inner_size or 4 * d
        self.blocks = nn.ModuleList(
            _TransformerBlock(d, config.heads, inner, config.dropout) for _ in range(config.layers)
        )
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, 0.0, 0.02)
            if isinstance(m, nn.Linear):
                nn.init.zeros_(m.bias)
        with torch.no_grad():
            self.position.weight[0].zero_()

    def forward_all(self, seq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Per-position hidden states, shape (B, L, d)."""
        L = seq.shape[1]
        pos = torch.cumsum(mask.long(), dim=1) * mask.long()
        if pos.max() > self.config.max_len:
            raise ValueError(f"history longer than max_len={self.config.max_len}")
        x = self.dropout(self.norm(seq + self.position(pos)))
        idx = torch.arange(L, device=seq.device)
        causal = idx[None, :] <= idx[:, None]
        allowed = (causal[None] & mask[:, None, :]) | torch.eye(L, dtype=torch.bool, device=seq.device)
        for block in self.blocks:
            x = block(x, allowed)
        return x

    def forward(self, seq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if torch.any(mask.sum(dim=1) < 1):
            raise ValueError("every history needs at least one real item")
        return self.forward_all(seq, mask)[:, -1]


def build_encoder(config: EncoderConfig) -> nn.Module:
    if config.kind == "gru":
        return GRUEncoder(config)
    return SelfAttentionEncoder(config)


def encode(e_u: torch.Tensor, mask: torch.Tensor, encoder: nn.Module) -> torch.Tensor:
    """H_f for a batch of embedded, left-padded histories."""
    d = encoder.config.hidden_size
    if e_u.dim() != 3 or e_u.shape[-1] != d or mask.shape != e_u.shape[:2]:
        raise ValueError(f"expected (B, L, {d}) sequence and (B, L) mask, got {tuple(e_u.shape)}, {tuple(mask.shape)}")
    return encoder(e_u, mask)
