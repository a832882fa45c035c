"""Tiled sliding-window attention, cross-attention, T5 buckets and QK norm."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from blockrec.diffengine import ContractError

QK_EPS = 1e-6


class ConfigError(ValueError):
    """Inconsistent configuration (bad sizes, unknown names)."""


def relative_position_bucket(distance: int, num_buckets: int = 32, max_distance: int = 128) -> int:
    """Causal T5 bucket for a query looking ``distance`` tokens back."""
    if distance < 0:
        raise ContractError(f"relative distance must be >= 0, got {distance}")
    max_exact = num_buckets // 2
    if distance < max_exact:
        return distance
    large = max_exact + int(
        math.log(distance / max_exact) / math.log(max_distance / max_exact) * (num_buckets - max_exact)
    )
    return min(large, num_buckets - 1)


def relative_position_buckets(distance: torch.Tensor, num_buckets: int = 32, max_distance: int = 128) -> torch.Tensor:
    """Vectorised :func:`relative_position_bucket` over a long tensor."""
    if (distance < 0).any():
        raise ContractError("relative distance must be >= 0")
    max_exact = num_buckets // 2
    d = distance.to(torch.float64).clamp(min=1.0)
    large = max_exact + (
        torch.log(d / max_exact) / math.log(max_distance / max_exact) * (num_buckets - max_exact)
    ).to(torch.long)
    large = large.clamp(max=num_buckets - 1)
    return torch.where(distance < max_exact, distance, large)


class RelPosBias(nn.Module):
    """Learned per-head bias indexed by causal T5 bucket."""

    def __init__(self, num_heads: int, num_buckets: int = 32, max_distance: int = 128):
        super().__init__()
        self.num_buckets = num_buckets
        self.max_distance = max_distance
        self.table = nn.Parameter(torch.zeros(num_buckets, num_heads))

    def forward(self, distance: torch.Tensor) -> torch.Tensor:
        """distance [...] (non-negative) -> bias [heads, ...]."""
        b = relative_position_buckets(distance, self.num_buckets, self.max_distance)
        return self.table[b].movedim(-1, 0)


class QKNorm(nn.Module):
    """Per-head learnable logit scale applied to unit-normalised q and k."""

    def __init__(self, num_heads: int, head_dim: int):
        super().__init__()
        self.scale = nn.Parameter(torch.full((num_heads,), math.sqrt(head_dim)))


def qk_normalize(x: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt((x * x).sum(dim=-1, keepdim=True) + QK_EPS)


@dataclass
class BlockKV:
    """Keys/values of one block plus a validity mask over its positions.

    ``valid`` is [batch, W]; False marks positions before the true start of
    the stream, which attention must never see.
    """

    keys: torch.Tensor
    values: torch.Tensor
    valid: torch.Tensor

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ContractError(f"BlockKV: keys {tuple(self.keys.shape)} != values {tuple(self.values.shape)}")
        if self.valid.shape != self.keys.shape[:2]:
            raise ContractError("BlockKV: valid mask must be [batch, W]")

    @classmethod
    def empty(cls, batch: int, window: int, heads: int, head_dim: int, dtype=torch.float32) -> "BlockKV":
        z = torch.zeros(batch, window, heads, head_dim, dtype=dtype)
        return cls(z, z.clone(), torch.zeros(batch, window, dtype=torch.bool))

    def detach(self) -> "BlockKV":
        return BlockKV(self.keys.detach(), self.values.detach(), self.valid)


def _sliding_mask_and_distance(window: int, device=None):
    # tile coordinates: query r sits at column window + r among 2W keys
    r = torch.arange(window, device=device)[:, None]
    c = torch.arange(2 * window, device=device)[None, :]
    dist = window + r - c
    allowed = (dist >= 0) & (dist <= window)
    return allowed, dist.clamp(min=0)


def tiled_sliding_attention(
    q: torch.Tensor,
    prev: BlockKV,
    cur_k: torch.Tensor,
    cur_v: torch.Tensor,
    bias: RelPosBias | None,
    qknorm: QKNorm,
    dropout: float = 0.0,
    training: bool = False,
) -> torch.Tensor:
    """Causal attention over itself and the W previous tokens, in W x 2W tiles.

    q, cur_k, cur_v: [batch, N, heads, head_dim]; prev holds the W keys and
    values preceding position 0.
    """
    B, N, H, D = q.shape
    W = prev.keys.shape[1]
    if N % W != 0:
        raise ConfigError(f"segment length {N} is not a multiple of window {W}")
    if cur_k.shape != q.shape or cur_v.shape != q.shape:
        raise ContractError("tiled_sliding_attention: q/k/v shapes differ")
    if prev.keys.shape != (B, W, H, D):
        raise ContractError(f"prev tile shape {tuple(prev.keys.shape)} does not match {(B, W, H, D)}")
    nb = N // W

    qn = qk_normalize(q).view(B, nb, W, H, D)
    k_all = torch.cat([qk_normalize(prev.keys), qk_normalize(cur_k)], dim=1)
    v_all = torch.cat([prev.values, cur_v], dim=1)
    valid_all = torch.cat([prev.valid, torch.ones(B, N, dtype=torch.bool, device=q.device)], dim=1)

    # block b sees keys [b*W, b*W + 2W) of the (prev ++ cur) sequence
    kt = torch.cat([k_all[:, :N].view(B, nb, W, H, D), k_all[:, W:].view(B, nb, W, H, D)], dim=2)
    vt = torch.cat([v_all[:, :N].view(B, nb, W, H, D), v_all[:, W:].view(B, nb, W, H, D)], dim=2)
    mt = torch.cat([valid_all[:, :N].view(B, nb, W), valid_all[:, W:].view(B, nb, W)], dim=2)

    logits = torch.einsum("bnqhd,bnkhd->bnhqk", qn, kt) * qknorm.scale.view(1, 1, H, 1, 1)
    allowed, dist = _sliding_mask_and_distance(W, q.device)
    if bias is not None:
        logits = logits + bias(dist).to(logits.dtype).view(1, 1, H, W, 2 * W)
    mask = allowed.view(1, 1, 1, W, 2 * W) & mt.view(B, nb, 1, 1, 2 * W)
    logits = logits.masked_fill(~mask, float("-inf"))
    probs = torch.softmax(logits, dim=-1)
    if dropout > 0.0 and training:
        probs = F.dropout(probs, dropout, training=True)
    out = torch.einsum("bnhqk,bnkhd->bnqhd", probs, vt)
    return out.reshape(B, N, H, D)


def cross_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    qknorm: QKNorm,
    dropout: float = 0.0,
    training: bool = False,
) -> torch.Tensor:
    """Unmasked attention without position terms.

    q [..., A, heads, head_dim]; k, v [..., B, heads, head_dim] with matching
    leading axes.
    """
    if k.shape[-3] == 0:
        raise ContractError("cross_attention: no keys")
    if k.shape != v.shape or q.shape[:-3] != k.shape[:-3] or q.shape[-2:] != k.shape[-2:]:
        raise ContractError(f"cross_attention: shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    H = q.shape[-2]
    logits = torch.einsum("...qhd,...khd->...hqk", qk_normalize(q), qk_normalize(k))
    logits = logits * qknorm.scale.view(H, 1, 1)
    probs = torch.softmax(logits, dim=-1)
    if dropout > 0.0 and training:
        probs = F.dropout(probs, dropout, training=True)
    return torch.einsum("...hqk,...khd->...qhd", probs, v)


def sliding_score_count(segment: int, window: int) -> int:
    """Attention scores one sliding layer computes per segment."""
    return window * 2 * window * (segment // window)
