"""Vision-conditional pooling over a class-attribute's description embeddings.

One attribute's expert feature acts as the attention query; the class's
description embeddings act as keys and, with no value projection, also as the
values.  The pooled vector therefore always stays inside the convex hull of
the description embeddings, and the attention weights double as an
interpretable per-description relevance readout.

The attention logits are a plain ``query . key`` product: no 1/sqrt(d)
scaling and no temperature, so sharpness is entirely learned through the
query/key maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

POOLING_MODES = ("vcp", "average", "attn_max")


@dataclass
class PooledAttributeFeature:
    """Pooled vector plus the simplex weights that produced it."""

    vector: torch.Tensor          # (..., d)
    attention_weights: torch.Tensor  # (..., n)


def init_projection(dim: int, generator: torch.Generator | None = None,
                    noise: float = 0.01, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Near-identity init keeps initial pooling close to plain similarity."""
    eye = torch.eye(dim, dtype=dtype)
    jitter = torch.randn(dim, dim, generator=generator, dtype=dtype) * noise
    return eye + jitter


def _first_argmax(scores: torch.Tensor) -> torch.Tensor:
    """Index of the max along the last dim, ties broken by lowest index."""
    n = scores.shape[-1]
    top = scores.max(dim=-1, keepdim=True).values
    positions = torch.arange(n, device=scores.device)
    masked = torch.where(scores == top, positions, torch.full_like(positions, n))
    return masked.min(dim=-1).values


def pool(expert_feature: torch.Tensor, descriptions: torch.Tensor,
         w_q: torch.Tensor, w_k: torch.Tensor) -> PooledAttributeFeature:
    """Attention-pool ``descriptions`` conditioned on ``expert_feature``.

    expert_feature: (d,) or (B, d); descriptions: (n, d); w_q, w_k: (d, d).
    Returns weights on the n-simplex and ``weights @ descriptions``.
    """
    if descriptions.ndim != 2 or descriptions.shape[0] == 0:
        raise ValueError("empty attribute leaf set")
    query = expert_feature @ w_q.T                    # (..., d)
    keys = descriptions @ w_k.T                       # (n, d)
    logits = query @ keys.T                           # (..., n)
    weights = torch.softmax(logits, dim=-1)
    vector = weights @ descriptions                   # (..., d)
    return PooledAttributeFeature(vector=vector, attention_weights=weights)


def pool_mode(expert_feature: torch.Tensor, descriptions: torch.Tensor,
              w_q: torch.Tensor, w_k: torch.Tensor,
              mode: str = "vcp") -> PooledAttributeFeature:
    """``pool`` plus the two ablation variants.

    average: uniform weights, training-free.  attn_max: one-hot weight on the
    highest attention score (ties go to the lowest index).
    """
    if mode == "vcp":
        return pool(expert_feature, descriptions, w_q, w_k)
    if descriptions.ndim != 2 or descriptions.shape[0] == 0:
        raise ValueError("empty attribute leaf set")
    n = descriptions.shape[0]
    if mode == "average":
        shape = expert_feature.shape[:-1] + (n,)
        weights = torch.full(shape, 1.0 / n, dtype=descriptions.dtype,
                             device=descriptions.device)
        return PooledAttributeFeature(vector=weights @ descriptions,
                                      attention_weights=weights)
    if mode == "attn_max":
        scored = pool(expert_feature, descriptions, w_q, w_k)
        idx = _first_argmax(scored.attention_weights)
        weights = torch.nn.functional.one_hot(idx, n).to(descriptions.dtype)
        return PooledAttributeFeature(vector=weights @ descriptions,
                                      attention_weights=weights)
    raise ValueError(f"unknown pooling mode {mode!r}; expected one of {POOLING_MODES}")
