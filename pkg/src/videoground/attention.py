"""Attention score variants and multi-head assembly.

Three score families share one algebraic trick: the pyramid and shifted
variants only ever *add* extra token matrices on the query or key side
before the dot products, and both 3×3 mean pooling (a fixed row-mixing
matrix) and neighbor-frame addition commute with the per-head column
projections. So `msa_forward` materializes an "effective" Q or K token
matrix once and then runs plain scaled-softmax multi-head attention.

Raw (pre-softmax) per-head scores stay accessible because the fine-grained
frame selection consumes them before normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class HeadConfig:
    num_heads: int
    model_dim: int

    def __post_init__(self):
        if self.num_heads <= 0 or self.model_dim <= 0:
            raise ValueError("num_heads and model_dim must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by "
                f"num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


VARIANT_KINDS = ("standard", "pyramid_on_query", "pyramid_on_key",
                 "shifted_on_query", "shifted_on_key")


@dataclass
class AttentionVariant:
    """Which score rule to apply, plus the context the rule needs.

    Pyramid kinds need the (H, W) patch-grid arrangement of the frame side;
    shifted kinds need the previous/next frames' patch tensors (already
    wrapped circularly by the caller).
    """
    kind: str = "standard"
    grid: tuple[int, int] | None = None
    prev_frame: Tensor | None = None
    next_frame: Tensor | None = None

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown attention variant {self.kind!r}")


STANDARD = AttentionVariant("standard")


def compute_scores_standard(q: Tensor, k: Tensor) -> Tensor:
    """Raw pairwise dot-product scores, no scaling or softmax."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(
            f"score dims differ: {q.shape} vs {k.shape}")
    return q @ k.T


def _pooled(frame_patches: Tensor, grid: tuple[int, int]) -> Tensor:
    h, w = grid
    j, d = frame_patches.shape
    if h * w != j:
        raise DimensionError(
            f"grid {grid} does not cover {j} patch tokens")
    g = T.reshape(frame_patches, (h, w, d))
    return T.reshape(T.mean_pool_3x3_valid(g), (j, d))


def compute_scores_pyramid(side_tokens: Tensor, frame_patches: Tensor,
                           grid: tuple[int, int], side: str) -> Tensor:
    """Scores with a 3×3 valid-pooled copy of the patch grid added in.

    side='key':   scores = Q·F^T + Q·Avg(F)^T  (side_tokens is Q)
    side='query': scores = F·K^T + Avg(F)·K^T  (side_tokens is K)
    """
    eff = frame_patches + _pooled(frame_patches, grid)
    if side == "key":
        return compute_scores_standard(side_tokens, eff)
    if side == "query":
        return compute_scores_standard(eff, side_tokens)
    raise ValueError(f"side must be 'query' or 'key', got {side!r}")


def compute_scores_shifted(side_tokens: Tensor, frame_patches: Tensor,
                           prev_frame: Tensor, next_frame: Tensor,
                           side: str) -> Tensor:
    """Scores summed over the frame and its two temporal neighbors.

    Neighbor wraparound (first/last frame) is the caller's responsibility.
    """
    if prev_frame.shape != frame_patches.shape or \
            next_frame.shape != frame_patches.shape:
        raise DimensionError(
            f"neighbor shapes {prev_frame.shape}/{next_frame.shape} do not "
            f"match frame {frame_patches.shape}")
    # summed score-side (three matmuls) rather than token-side so that
    # identical neighbors give exactly 3x the standard scores
    if side == "key":
        return (compute_scores_standard(side_tokens, frame_patches)
                + compute_scores_standard(side_tokens, prev_frame)
                + compute_scores_standard(side_tokens, next_frame))
    if side == "query":
        return (compute_scores_standard(frame_patches, side_tokens)
                + compute_scores_standard(prev_frame, side_tokens)
                + compute_scores_standard(next_frame, side_tokens))
    raise ValueError(f"side must be 'query' or 'key', got {side!r}")


def _effective_tokens(q: Tensor, k: Tensor,
                      variant: AttentionVariant) -> tuple[Tensor, Tensor]:
    kind = variant.kind
    if kind == "standard":
        return q, k
    if kind in ("pyramid_on_query", "pyramid_on_key"):
        if variant.grid is None:
            raise T.ContractError("pyramid variant requires grid dims")
        if kind == "pyramid_on_query":
            return q + _pooled(q, variant.grid), k
        return q, k + _pooled(k, variant.grid)
    # shifted
    if variant.prev_frame is None or variant.next_frame is None:
        raise T.ContractError("shifted variant requires neighbor frames")
    if kind == "shifted_on_query":
        if variant.prev_frame.shape != q.shape:
            raise DimensionError("shifted neighbors must match query shape")
        return q + variant.prev_frame + variant.next_frame, k
    if variant.prev_frame.shape != k.shape:
        raise DimensionError("shifted neighbors must match key shape")
    return q, k + variant.prev_frame + variant.next_frame


class MultiHeadAttention:
    """Projected scaled-softmax attention, heads concatenated then mixed.

    Holds the query/key/value/output projection parameters. Variant score
    terms are summed before the softmax; scaling is 1/sqrt(head_dim).
    """

    def __init__(self, cfg: HeadConfig, name: str, rng):
        self.cfg = cfg
        d = cfg.model_dim
        s = math.sqrt(1.0 / d)
        self.w_q = T.Parameter(f"{name}.w_q", rng.normal(0.0, s, (d, d)))
        self.w_k = T.Parameter(f"{name}.w_k", rng.normal(0.0, s, (d, d)))
        self.w_v = T.Parameter(f"{name}.w_v", rng.normal(0.0, s, (d, d)))
        self.w_o = T.Parameter(f"{name}.w_o", rng.normal(0.0, s, (d, d)))

    def parameters(self) -> list[T.Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]

    def forward(self, q: Tensor, k: Tensor, v: Tensor,
                variant: AttentionVariant = STANDARD,
                return_scores: bool = False):
        cfg = self.cfg
        if q.shape[1] != cfg.model_dim or k.shape[1] != cfg.model_dim \
                or v.shape[1] != cfg.model_dim:
            raise DimensionError(
                f"token dim must be {cfg.model_dim}: got "
                f"{q.shape}/{k.shape}/{v.shape}")
        if k.shape[0] != v.shape[0]:
            raise DimensionError(
                f"key/value token counts differ: {k.shape} vs {v.shape}")
        q_eff, k_eff = _effective_tokens(q, k, variant)
        qp = q_eff @ self.w_q
        kp = k_eff @ self.w_k
        vp = v @ self.w_v
        hd = cfg.head_dim
        inv = 1.0 / math.sqrt(hd)
        heads = []
        raw = []
        for i in range(cfg.num_heads):
            lo, hi = i * hd, (i + 1) * hd
            qi = T.slice_cols(qp, lo, hi)
            ki = T.slice_cols(kp, lo, hi)
            vi = T.slice_cols(vp, lo, hi)
            s = T.scale(qi @ ki.T, inv)
            raw.append(s)
            a = T.softmax_rows(s)
            heads.append(a @ vi)
        out = T.concat(heads, axis=1) @ self.w_o
        if return_scores:
            return out, raw
        return out

    __call__ = forward


def msa_forward(q: Tensor, k: Tensor, v: Tensor, mha: MultiHeadAttention,
                variant: AttentionVariant = STANDARD) -> Tensor:
    return mha.forward(q, k, v, variant)
