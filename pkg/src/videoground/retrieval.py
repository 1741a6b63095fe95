"""Coarse-to-fine action retrieval with multi-granularity ranking losses.

The coarse stage scores multi-scale temporal proposals against the pooled
action text and picks the best clip; the fine stage attends over that
clip's frames with an action-conditioned query and thresholds the
head-summed softmax scores to split frames into action-consistent and
action-independent sets. Training is weakly supervised: hinge ranking
losses at the global, clip, and frame granularity against one randomly
drawn negative episode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .attention import HeadConfig, MultiHeadAttention
from .encoder import Linear, _resnorm
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class Proposal:
    """A temporal window [start, end] (inclusive, 0-based) with a pooled
    feature; the first proposal spans the whole video and is flagged global."""
    start: int
    end: int
    feature: Tensor | None = None   # [1×d]
    is_global: bool = False

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def frames(self) -> list[int]:
        return list(range(self.start, self.end + 1))


@dataclass
class FramePartition:
    consistent: list[int]
    independent: list[int]
    clip: Proposal

    def __post_init__(self):
        if not self.consistent:
            raise ValueError("consistent set must be nonempty")
        if set(self.consistent) & set(self.independent):
            raise ValueError("partition sets overlap")
        if not set(self.consistent) <= set(self.clip.frames()):
            raise ValueError("consistent frames must lie inside the clip")


@dataclass(frozen=True)
class RetrievalLossConfig:
    margin_global: float = 0.2
    margin_clip: float = 0.2
    margin_fine: float = 0.2
    delta: float = 0.8              # frame-selection threshold

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if min(self.margin_global, self.margin_clip, self.margin_fine) < 0:
            raise ValueError("margins must be nonnegative")


def generate_proposals(num_frames: int, scales: list[int],
                       frame_tokens: Tensor | None = None) -> list[Proposal]:
    """Whole-video proposal first, then sliding windows per scale
    (descending) with stride max(1, scale // 2).

    Features, when frame tokens are given, start as the mean of member
    frame tokens. Scales longer than the video are skipped with a warning.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if not scales:
        raise ValueError("scales must be nonempty")
    spans: list[tuple[int, int, bool]] = [(0, num_frames - 1, True)]
    for scale in sorted(set(scales), reverse=True):
        if scale > num_frames:
            log.warning("proposal scale %d exceeds video length %d; skipped",
                        scale, num_frames)
            continue
        if scale == num_frames:
            continue  # identical to the global span
        stride = max(1, scale // 2)
        for start in range(0, num_frames - scale + 1, stride):
            spans.append((start, start + scale - 1, False))
    proposals = []
    for start, end, is_global in spans:
        feat = None
        if frame_tokens is not None:
            feat = T.tmean(T.take_rows(frame_tokens,
                                       list(range(start, end + 1))),
                           axis=0, keepdims=True)
        proposals.append(Proposal(start, end, feat, is_global))
    return proposals


class CoarseRetrieval:
    """Two stacked hard-attention layers fusing each proposal with its own
    span's frame tokens; frames outside the span can never influence it."""

    def __init__(self, cfg: HeadConfig, name: str, rng):
        self.layers = [MultiHeadAttention(cfg, f"{name}.layer{i}", rng)
                       for i in range(2)]

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def encode(self, proposals: list[Proposal],
               frame_tokens: Tensor) -> list[Proposal]:
        num_frames = frame_tokens.shape[0]
        out = []
        for prop in proposals:
            if not (0 <= prop.start <= prop.end < num_frames):
                raise ValueError(f"proposal span [{prop.start},{prop.end}] "
                                 f"outside video of {num_frames} frames")
            span = T.take_rows(frame_tokens, prop.frames())
            p = prop.feature
            for layer in self.layers:
                kv = T.concat([p, span], axis=0)
                p = _resnorm(p, layer(p, kv, kv))
            out.append(replace(prop, feature=p))
        return out


class SimilarityHead:
    """Cosine similarity after projecting both sides into a shared space
    with small two-layer perceptrons (one per modality)."""

    def __init__(self, dim: int, sim_dim: int, name: str, rng):
        self.video_mlp = _Mlp(dim, sim_dim, f"{name}.video", rng)
        self.text_mlp = _Mlp(dim, sim_dim, f"{name}.text", rng)

    def parameters(self):
        return self.video_mlp.parameters() + self.text_mlp.parameters()

    def __call__(self, video_feat: Tensor, text_feat: Tensor) -> Tensor:
        return cosine(self.video_mlp(video_feat), self.text_mlp(text_feat))


class _Mlp:
    def __init__(self, d_in: int, d_out: int, name: str, rng,
                 d_hidden: int | None = None):
        h = d_hidden or d_out
        self.fc1 = Linear(f"{name}.fc1", d_in, h, rng)
        self.fc2 = Linear(f"{name}.fc2", h, d_out, rng)

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.tanh(self.fc1(x)))


def cosine(x: Tensor, y: Tensor) -> Tensor:
    """Cosine of two [1×d] vectors; zero-norm inputs map to similarity 0."""
    nx = float(np.linalg.norm(x.data))
    ny = float(np.linalg.norm(y.data))
    if nx == 0.0 or ny == 0.0:
        return Tensor(np.zeros(()))
    dot = T.tsum(x * y)
    denom = T.sqrt(T.tsum(x * x)) * T.sqrt(T.tsum(y * y))
    return T.div(dot, denom)


def select_clip(proposals: list[Proposal], scores: list[float]) -> int:
    """Index of the highest-scoring proposal; ties break toward earliest
    start, then shortest span."""
    if not proposals:
        raise ValueError("select_clip: no proposals")
    best = 0
    for i in range(1, len(proposals)):
        a, b = proposals[i], proposals[best]
        if scores[i] > scores[best] or (
                scores[i] == scores[best]
                and (a.start, a.length) < (b.start, b.length)):
            best = i
    return best


class FineRetrieval:
    """Action-conditioned attention over the selected clip's frames.

    The query is an MLP of the concatenated proposal and action features;
    the raw per-head scores are what the frame selection thresholds.
    """

    def __init__(self, cfg: HeadConfig, name: str, rng):
        d = cfg.model_dim
        self.query_mlp = _Mlp(2 * d, d, f"{name}.query_mlp", rng, d_hidden=d)
        self.msa = MultiHeadAttention(cfg, f"{name}.msa", rng)

    def parameters(self):
        return self.query_mlp.parameters() + self.msa.parameters()

    def encode(self, clip: Proposal, clip_frames: Tensor,
               s_act: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (fused clip feature [1×d], per-head raw scores [L×T])."""
        if clip_frames.shape[0] != clip.length:
            raise ValueError(
                f"clip of {clip.length} frames got {clip_frames.shape[0]} "
                "frame features")
        query = self.query_mlp(T.concat([clip.feature, s_act], axis=1))
        fused, raw = self.msa.forward(query, clip_frames, clip_frames,
                                      return_scores=True)
        return fused, T.concat(raw, axis=0)


def select_frames(per_head_scores: np.ndarray, delta: float) -> list[int]:
    """Frames whose head-summed softmax weight exceeds delta.

    Per head the scores are softmaxed over frames, then summed across the
    L heads, so the total mass is exactly L. If nothing clears delta the
    argmax frame is kept so the consistent set is never empty.
    """
    scores = np.asarray(per_head_scores, dtype=np.float64)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    v_sum = probs.sum(axis=0)
    selected = [j for j in range(scores.shape[1]) if v_sum[j] > delta]
    if not selected:
        selected = [int(np.argmax(v_sum))]
    return selected


def head_sum_weights(per_head_scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(per_head_scores, dtype=np.float64)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).sum(axis=0)


def partition_from_selection(clip: Proposal, local_indices: list[int],
                             num_frames: int) -> FramePartition:
    consistent = sorted(clip.start + j for j in local_indices)
    independent = [i for i in range(num_frames) if i not in set(consistent)]
    return FramePartition(consistent, independent, clip)


# -- ranking losses -----------------------------------------------------------

def _hinge(margin: float, pos: Tensor, neg: Tensor) -> Tensor:
    return T.relu(Tensor(np.array(margin)) - pos + neg)


def loss_global(sim: SimilarityHead, p1: Tensor, s_act: Tensor,
                p1_neg: Tensor, s_act_neg: Tensor, margin: float) -> Tensor:
    """Global-level ranking: the whole-video feature should match its own
    action text better than either cross-pairing with the negative episode."""
    pos = sim(p1, s_act)
    return (_hinge(margin, pos, sim(p1, s_act_neg))
            + _hinge(margin, pos, sim(p1_neg, s_act)))


def loss_clip(sim: SimilarityHead, proposals: list[Proposal], s_act: Tensor,
              neg_proposals: list[Proposal], s_act_neg: Tensor,
              margin: float) -> Tensor:
    """Clip-level ranking over the summed similarities of every non-global
    proposal (the sums are taken before the hinge)."""
    pos_props = [p for p in proposals if not p.is_global]
    neg_props = [p for p in neg_proposals if not p.is_global]
    if not pos_props:
        log.warning("loss_clip: fewer than 2 proposals, returning 0")
        return Tensor(np.zeros(()))

    def simsum(props, text):
        total = sim(props[0].feature, text)
        for p in props[1:]:
            total = total + sim(p.feature, text)
        return total

    pos = simsum(pos_props, s_act)
    return (_hinge(margin, pos, simsum(pos_props, s_act_neg))
            + _hinge(margin, pos, simsum(neg_props, s_act)))


def loss_fine(sim: SimilarityHead, p_bar_c: Tensor, p_c: Tensor,
              s_act: Tensor, margin: float) -> Tensor:
    """Frame-level ranking: the attention-fused clip feature should beat
    the raw selected proposal feature."""
    return _hinge(margin, sim(p_bar_c, s_act), sim(p_c, s_act))


def retrieval_loss(global_term: Tensor, clip_term: Tensor,
                   fine_term: Tensor) -> Tensor:
    return global_term + clip_term + fine_term
