"""Locality-aware fusion layers, the encoder loop, and the box decoder.

The encoder runs three layers per iteration, in order: an attribute-spatial
layer (pyramid attention, all frames), an action-spatial layer (shifted
attention, action-consistent frames only, circular neighbors), and an
action-temporal layer over frame-level tokens where information flows from
consistent to independent frames but never back. A feed-forward transform
on the visual and text tokens closes each iteration.

Every sublayer applies residual addition followed by row layer-norm; the
two-branch additive updates are unstable without it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (AttentionVariant, HeadConfig, MultiHeadAttention,
                        STANDARD)
from .tensor import DimensionError, Tensor


@dataclass
class VideoFeatures:
    """Per-frame patch grids plus one frame-level token per frame."""
    grid: tuple[int, int]
    patches: list[Tensor]          # I tensors of shape [J×d]
    frame_tokens: Tensor           # [I×d]

    def __post_init__(self):
        h, w = self.grid
        j = h * w
        for p in self.patches:
            if p.shape != (j, self.dim):
                raise DimensionError(
                    f"patch grid {p.shape} does not match {j}×{self.dim}")
        if self.frame_tokens.shape[0] != len(self.patches):
            raise DimensionError("frame token count != frame count")

    @property
    def num_frames(self) -> int:
        return len(self.patches)

    @property
    def patches_per_frame(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def dim(self) -> int:
        return self.frame_tokens.shape[1]


@dataclass
class QuerySplit:
    """Sentence token features with an attribute / action index partition."""
    tokens: Tensor                 # [N×d]
    attr_idx: list[int]
    act_idx: list[int]
    words: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = self.tokens.shape[0]
        if sorted(self.attr_idx + self.act_idx) != list(range(n)):
            raise ValueError("attr_idx and act_idx must partition the tokens")
        if not self.act_idx:
            raise ValueError("action part must be nonempty")
        if not self.attr_idx:
            raise ValueError("attribute part must be nonempty")

    def attr_tokens(self) -> Tensor:
        return T.take_rows(self.tokens, self.attr_idx)

    def act_tokens(self) -> Tensor:
        return T.take_rows(self.tokens, self.act_idx)

    def s_act(self) -> Tensor:
        """Pooled action feature, shape [1×d]."""
        return T.tmean(self.act_tokens(), axis=0, keepdims=True)


@dataclass(frozen=True)
class EncoderConfig:
    heads: HeadConfig
    n_encoder_iters: int = 2
    n_decoder_layers: int = 2
    queries_per_frame: int = 4

    def __post_init__(self):
        if min(self.n_encoder_iters, self.n_decoder_layers,
               self.queries_per_frame) < 0 or self.queries_per_frame == 0:
            raise ValueError("encoder config fields must be positive")


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int, rng):
        s = (1.0 / d_in) ** 0.5
        self.w = T.Parameter(f"{name}.w", rng.normal(0.0, s, (d_in, d_out)))
        self.b = T.Parameter(f"{name}.b", [0.0] * d_out)

    def parameters(self):
        return [self.w, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_rowvec(x @ self.w, self.b)


def _resnorm(x: Tensor, *updates: Tensor) -> Tensor:
    out = x
    for u in updates:
        out = out + u
    return T.layer_norm_rows(out)


class AttributeSpatialLayer:
    """Pyramid-attention fusion of patch grids with the attribute text."""

    def __init__(self, cfg: HeadConfig, grid: tuple[int, int], name: str, rng):
        self.grid = grid
        self.vis_self = MultiHeadAttention(cfg, f"{name}.vis_self", rng)
        self.vis_text = MultiHeadAttention(cfg, f"{name}.vis_text", rng)
        self.text_self = MultiHeadAttention(cfg, f"{name}.text_self", rng)
        self.text_vis = MultiHeadAttention(cfg, f"{name}.text_vis", rng)

    def parameters(self):
        return [p for m in (self.vis_self, self.vis_text, self.text_self,
                            self.text_vis) for p in m.parameters()]

    def forward(self, patches: list[Tensor], s_attr: Tensor,
                use_pyramid: bool = True) -> tuple[list[Tensor], Tensor]:
        py_q = (AttentionVariant("pyramid_on_query", grid=self.grid)
                if use_pyramid else STANDARD)
        py_k = (AttentionVariant("pyramid_on_key", grid=self.grid)
                if use_pyramid else STANDARD)
        new_patches = []
        text_updates = []
        for f in patches:
            new_patches.append(_resnorm(
                f,
                self.vis_self(f, f, f, py_q),
                self.vis_text(f, s_attr, s_attr, py_q)))
            text_updates.append(
                self.text_self(s_attr, s_attr, s_attr)
                + self.text_vis(s_attr, f, f, py_k))
        agg = text_updates[0]
        for u in text_updates[1:]:
            agg = agg + u
        agg = T.scale(agg, 1.0 / len(text_updates))
        return new_patches, _resnorm(s_attr, agg)


class ActionSpatialLayer:
    """Shifted-attention fusion over the action-consistent frames.

    Neighbors are taken within the consistent set's order with circular
    wraparound at both ends; a single-frame set is its own neighbor.
    """

    def __init__(self, cfg: HeadConfig, name: str, rng):
        self.vis_self = MultiHeadAttention(cfg, f"{name}.vis_self", rng)
        self.vis_text = MultiHeadAttention(cfg, f"{name}.vis_text", rng)
        self.text_self = MultiHeadAttention(cfg, f"{name}.text_self", rng)
        self.text_vis = MultiHeadAttention(cfg, f"{name}.text_vis", rng)

    def parameters(self):
        return [p for m in (self.vis_self, self.vis_text, self.text_self,
                            self.text_vis) for p in m.parameters()]

    def forward(self, patches: list[Tensor], s_act: Tensor,
                use_shifted: bool = True) -> tuple[list[Tensor], Tensor]:
        n = len(patches)
        new_patches = []
        text_updates = []
        for i, f in enumerate(patches):
            prev = patches[(i - 1) % n]
            nxt = patches[(i + 1) % n]
            if use_shifted:
                sh_q = AttentionVariant("shifted_on_query",
                                        prev_frame=prev, next_frame=nxt)
                sh_k = AttentionVariant("shifted_on_key",
                                        prev_frame=prev, next_frame=nxt)
            else:
                sh_q = sh_k = STANDARD
            new_patches.append(_resnorm(
                f,
                self.vis_self(f, f, f, sh_q),
                self.vis_text(f, s_act, s_act, sh_q)))
            text_updates.append(
                self.text_self(s_act, s_act, s_act)
                + self.text_vis(s_act, f, f, sh_k))
        agg = text_updates[0]
        for u in text_updates[1:]:
            agg = agg + u
        agg = T.scale(agg, 1.0 / n)
        return new_patches, _resnorm(s_act, agg)


class ActionTemporalLayer:
    """Frame-token fusion with single-flow consistent→independent transfer.

    Consistent tokens attend only to themselves and the full sentence;
    independent tokens additionally read the (pre-update) consistent tokens
    and the action text. Gradients therefore never flow from independent
    inputs into consistent outputs.
    """

    def __init__(self, cfg: HeadConfig, name: str, rng):
        self.msa_cons = MultiHeadAttention(cfg, f"{name}.cons", rng)
        self.msa_ind = MultiHeadAttention(cfg, f"{name}.ind", rng)

    def parameters(self):
        return self.msa_cons.parameters() + self.msa_ind.parameters()

    def forward(self, frame_tokens: Tensor, consistent: list[int],
                independent: list[int], sentence: Tensor,
                s_act: Tensor) -> Tensor:
        f_re = T.take_rows(frame_tokens, consistent)
        kv_re = T.concat([f_re, sentence], axis=0)
        new_re = _resnorm(f_re, self.msa_cons(f_re, kv_re, kv_re))
        out = T.scatter_rows(frame_tokens, consistent, new_re)
        if independent:
            f_ir = T.take_rows(frame_tokens, independent)
            kv_ir = T.concat([f_ir, f_re, s_act], axis=0)
            new_ir = _resnorm(f_ir, self.msa_ind(f_ir, kv_ir, kv_ir))
            out = T.scatter_rows(out, independent, new_ir)
        return out


class HierarchicalEncoder:
    """The encoder loop: attribute-spatial, action-spatial, action-temporal,
    then a feed-forward transform of visual and text tokens, repeated."""

    def __init__(self, cfg: EncoderConfig, grid: tuple[int, int], name: str,
                 rng, use_pyramid: bool = True, use_shifted: bool = True):
        d = cfg.heads.model_dim
        self.cfg = cfg
        self.use_pyramid = use_pyramid
        self.use_shifted = use_shifted
        self.attr_spatial = AttributeSpatialLayer(
            cfg.heads, grid, f"{name}.ats", rng)
        self.act_spatial = ActionSpatialLayer(cfg.heads, f"{name}.acs", rng)
        self.act_temporal = ActionTemporalLayer(cfg.heads, f"{name}.act", rng)
        self.ff_vis = Linear(f"{name}.ff_vis", d, d, rng)
        self.ff_text = Linear(f"{name}.ff_text", d, d, rng)

    def parameters(self):
        return (self.attr_spatial.parameters() + self.act_spatial.parameters()
                + self.act_temporal.parameters() + self.ff_vis.parameters()
                + self.ff_text.parameters())

    def forward(self, video: VideoFeatures, query: QuerySplit,
                consistent: list[int], independent: list[int],
                n_iters: int | None = None) -> tuple[VideoFeatures, QuerySplit]:
        patches = list(video.patches)
        frame_tokens = video.frame_tokens
        tokens = query.tokens
        iters = self.cfg.n_encoder_iters if n_iters is None else n_iters
        for _ in range(iters):
            s_attr = T.take_rows(tokens, query.attr_idx) if query.attr_idx \
                else None
            s_act = T.take_rows(tokens, query.act_idx)
            # attribute-spatial over all frames
            if s_attr is not None:
                patches, s_attr = self.attr_spatial.forward(
                    patches, s_attr, self.use_pyramid)
                tokens = T.scatter_rows(tokens, query.attr_idx, s_attr)
            # action-spatial over consistent frames only
            cons_patches = [patches[i] for i in consistent]
            cons_patches, s_act = self.act_spatial.forward(
                cons_patches, s_act, self.use_shifted)
            for slot, i in enumerate(consistent):
                patches[i] = cons_patches[slot]
            tokens = T.scatter_rows(tokens, query.act_idx, s_act)
            # action-temporal over frame tokens
            frame_tokens = self.act_temporal.forward(
                frame_tokens, consistent, independent, tokens,
                T.take_rows(tokens, query.act_idx))
            # closing feed-forward on both modalities
            patches = [_resnorm(p, self.ff_vis(p)) for p in patches]
            frame_tokens = _resnorm(frame_tokens, self.ff_vis(frame_tokens))
            tokens = _resnorm(tokens, self.ff_text(tokens))
        out_video = VideoFeatures(video.grid, patches, frame_tokens)
        out_query = QuerySplit(tokens, list(query.attr_idx),
                               list(query.act_idx), list(query.words))
        return out_video, out_query


class FlatEncoder:
    """Plain joint self-attention fallback used when the hierarchical
    layers are ablated: every patch, frame token, and text token attends
    to everything."""

    def __init__(self, cfg: EncoderConfig, name: str, rng):
        d = cfg.heads.model_dim
        self.cfg = cfg
        self.msa = MultiHeadAttention(cfg.heads, f"{name}.msa", rng)
        self.ff = Linear(f"{name}.ff", d, d, rng)

    def parameters(self):
        return self.msa.parameters() + self.ff.parameters()

    def forward(self, video: VideoFeatures, query: QuerySplit,
                consistent: list[int], independent: list[int],
                n_iters: int | None = None) -> tuple[VideoFeatures, QuerySplit]:
        j = video.patches_per_frame
        i_frames = video.num_frames
        all_tokens = T.concat(list(video.patches)
                              + [video.frame_tokens, query.tokens], axis=0)
        iters = self.cfg.n_encoder_iters if n_iters is None else n_iters
        for _ in range(iters):
            all_tokens = _resnorm(
                all_tokens, self.msa(all_tokens, all_tokens, all_tokens))
            all_tokens = _resnorm(all_tokens, self.ff(all_tokens))
        patches = [T.take_rows(all_tokens, list(range(f * j, (f + 1) * j)))
                   for f in range(i_frames)]
        base = i_frames * j
        frame_tokens = T.take_rows(
            all_tokens, list(range(base, base + i_frames)))
        text = T.take_rows(
            all_tokens,
            list(range(base + i_frames, all_tokens.shape[0])))
        out_video = VideoFeatures(video.grid, patches, frame_tokens)
        out_query = QuerySplit(text, list(query.attr_idx),
                               list(query.act_idx), list(query.words))
        return out_video, out_query


class DecoderLayer:
    def __init__(self, cfg: HeadConfig, name: str, rng):
        d = cfg.model_dim
        self.self_attn = MultiHeadAttention(cfg, f"{name}.self", rng)
        self.cross_attn = MultiHeadAttention(cfg, f"{name}.cross", rng)
        self.ff = Linear(f"{name}.ff", d, d, rng)

    def parameters(self):
        return (self.self_attn.parameters() + self.cross_attn.parameters()
                + self.ff.parameters())

    def forward(self, x: Tensor, memory: Tensor) -> Tensor:
        x = _resnorm(x, self.self_attn(x, x, x))
        x = _resnorm(x, self.cross_attn(x, memory, memory))
        return _resnorm(x, self.ff(x))


class Decoder:
    """Per-frame object queries cross-attending to that frame's tokens plus
    the full sentence."""

    def __init__(self, cfg: EncoderConfig, name: str, rng):
        d = cfg.heads.model_dim
        self.cfg = cfg
        self.query_embed = T.Parameter(
            f"{name}.query_embed",
            rng.normal(0.0, 1.0, (cfg.queries_per_frame, d)))
        self.layers = [DecoderLayer(cfg.heads, f"{name}.layer{i}", rng)
                       for i in range(cfg.n_decoder_layers)]

    def parameters(self):
        return [self.query_embed] + [p for l in self.layers
                                     for p in l.parameters()]

    def forward(self, video: VideoFeatures, query: QuerySplit) -> list[Tensor]:
        """Returns per-frame query features, each [Q×d]."""
        outs = []
        for i in range(video.num_frames):
            ftok = T.take_rows(video.frame_tokens, [i])
            memory = T.concat([video.patches[i], ftok, query.tokens], axis=0)
            x = self.query_embed
            for layer in self.layers:
                x = layer.forward(x, memory)
            outs.append(x)
        return outs


class BoxHead:
    """Sigmoid-squashed center-size box regression plus a confidence score
    per object query."""

    def __init__(self, dim: int, name: str, rng):
        self.box = Linear(f"{name}.box", dim, 4, rng)
        self.conf = Linear(f"{name}.conf", dim, 1, rng)

    def parameters(self):
        return self.box.parameters() + self.conf.parameters()

    def forward(self, frame_feats: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (boxes [Q×4] in (0,1), confidence logits [Q×1])."""
        return T.sigmoid(self.box(frame_feats)), self.conf(frame_feats)


def predict_boxes(box_head: BoxHead, decoder_out: list[Tensor]):
    """Per frame: all (box, confidence) candidates plus the argmax choice.

    Ties break toward the lowest query index.
    """
    from .metrics import Box
    per_frame = []
    chosen = []
    for feats in decoder_out:
        boxes_t, logits_t = box_head.forward(feats)
        confs = 1.0 / (1.0 + np.exp(-logits_t.data[:, 0]))
        cands = [(Box(*boxes_t.data[q]), float(confs[q]))
                 for q in range(feats.shape[0])]
        best = int(max(range(len(cands)), key=lambda q: (cands[q][1], -q)))
        per_frame.append(cands)
        chosen.append((best,) + cands[best])
    return per_frame, chosen
