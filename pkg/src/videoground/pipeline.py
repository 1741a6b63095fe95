"""End-to-end model: retrieval, encoder, decoder, losses, and training.

The forward order per step follows the inference recipe exactly: encode
proposals and pick the clip, refine to a frame partition, run the
hierarchical encoder on the partitioned tokens, decode per-frame object
queries, and regress boxes. Detection supervision matches each frame's
best query against the single ground-truth box (one target per sentence,
so full assignment reduces to a per-frame argmin); retrieval supervision
is the weakly supervised ranking losses against one negative episode.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, retrieval as R, tensor as T
from .attention import HeadConfig
from .encoder import (BoxHead, Decoder, EncoderConfig, FlatEncoder,
                      HierarchicalEncoder, QuerySplit, VideoFeatures)
from .metrics import Box
from .tensor import Tensor
from .world import Episode, WorldConfig, generate_episode

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    n_encoder_iters: int = 2
    n_decoder_layers: int = 2
    queries_per_frame: int = 4
    sim_dim: int = 32
    proposal_scales: tuple[int, ...] = (8, 4, 2)
    margin_global: float = 0.2
    margin_clip: float = 0.2
    margin_fine: float = 0.2
    delta: float = 0.8
    cost_l1: float = 5.0
    cost_giou: float = 2.0
    cost_conf: float = 1.0
    use_retrieval: bool = True
    use_pyramid: bool = True
    use_shifted: bool = True
    use_hierarchical: bool = True

    def head_config(self) -> HeadConfig:
        return HeadConfig(self.heads, self.dim)

    def loss_config(self) -> R.RetrievalLossConfig:
        return R.RetrievalLossConfig(self.margin_global, self.margin_clip,
                                     self.margin_fine, self.delta)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    steps_per_epoch: int = 200
    batch_size: int = 1             # episodes averaged per optimizer step
    decay_every: int = 30           # epochs between step decays
    decay_factor: float = 10.0      # divide the rate by this
    lambda_det: float = 1.0
    lambda_retr: float = 1.0
    optimizer: str = "adam"         # "sgd" or "adam"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 and self.learning_rate != 0.0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def rate_at(self, epoch: int) -> float:
        return self.learning_rate / (
            self.decay_factor ** (epoch // self.decay_every))


@dataclass
class RetrievalResult:
    proposals: list[R.Proposal]         # coarse-encoded
    clip_index: int
    p_bar_c: Tensor | None
    raw_scores: Tensor | None           # [L×T]
    partition: R.FramePartition

    @property
    def clip(self) -> R.Proposal:
        return self.proposals[self.clip_index]


@dataclass
class InferResult:
    boxes: list[Box]
    confidences: list[float]
    partition: R.FramePartition
    candidates: list[list[tuple[Box, float]]] = field(default_factory=list)


def sinusoid_positions(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sine/cosine position codes, [len(positions) x dim]."""
    out = np.zeros((len(positions), dim))
    pair = np.arange((dim + 1) // 2)
    freqs = 1.0 / (100.0 ** (2.0 * pair / max(dim, 1)))
    angles = positions[:, None] * freqs[None, :]
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : dim // 2])
    return out


class GroundingModel:
    def __init__(self, model_cfg: ModelConfig, world_cfg: WorldConfig,
                 seed: int = 0):
        if world_cfg.dim != model_cfg.dim:
            raise ValueError("world feature dim must match model dim")
        self.cfg = model_cfg
        self.world_cfg = world_cfg
        rng = np.random.default_rng(seed)
        heads = model_cfg.head_config()
        enc_cfg = EncoderConfig(heads, model_cfg.n_encoder_iters,
                                model_cfg.n_decoder_layers,
                                model_cfg.queries_per_frame)
        d = model_cfg.dim
        grid = world_cfg.grid
        j = grid[0] * grid[1]
        self.coarse = R.CoarseRetrieval(heads, "coarse", rng)
        self.sim = R.SimilarityHead(d, model_cfg.sim_dim, "sim", rng)
        self.fine = R.FineRetrieval(heads, "fine", rng)
        if model_cfg.use_hierarchical:
            self.encoder = HierarchicalEncoder(
                enc_cfg, grid, "enc", rng,
                use_pyramid=model_cfg.use_pyramid,
                use_shifted=model_cfg.use_shifted)
        else:
            self.encoder = FlatEncoder(enc_cfg, "enc", rng)
        self.decoder = Decoder(enc_cfg, "dec", rng)
        self.box_head = BoxHead(d, "head", rng)
        # sinusoidal initialization: the heads can read positions out
        # directly instead of first learning an arbitrary code for them
        self.frame_pos = T.Parameter(
            "pos.frame", sinusoid_positions(np.arange(world_cfg.frames), d))
        ys, xs = np.divmod(np.arange(j), grid[1])
        half = d // 2
        self.patch_pos = T.Parameter(
            "pos.patch", np.concatenate(
                [sinusoid_positions(ys, half),
                 sinusoid_positions(xs, d - half)], axis=1))

    def parameters(self) -> list[T.Parameter]:
        params = (self.coarse.parameters() + self.sim.parameters()
                  + self.fine.parameters() + self.encoder.parameters()
                  + self.decoder.parameters() + self.box_head.parameters()
                  + [self.frame_pos, self.patch_pos])
        names = [p.name for p in params]
        assert len(names) == len(set(names)), "duplicate parameter names"
        return params

    def retrieval_parameters(self) -> list[T.Parameter]:
        """Parameters touched only by the retrieval losses."""
        return (self.coarse.parameters() + self.sim.parameters()
                + self.fine.parameters())

    # -- forward stages -------------------------------------------------------

    def retrieve(self, episode: Episode) -> RetrievalResult:
        num_frames = episode.video.num_frames
        if not self.cfg.use_retrieval:
            props = R.generate_proposals(num_frames,
                                         list(self.cfg.proposal_scales),
                                         episode.video.frame_tokens)
            partition = R.FramePartition(list(range(num_frames)), [],
                                         props[0])
            return RetrievalResult(props, 0, None, None, partition)
        frame_tokens = episode.video.frame_tokens
        props = R.generate_proposals(num_frames,
                                     list(self.cfg.proposal_scales),
                                     frame_tokens)
        props = self.coarse.encode(props, frame_tokens)
        s_act = episode.query.s_act()
        scores = [self.sim(p.feature, s_act).item() for p in props]
        clip_index = R.select_clip(props, scores)
        clip = props[clip_index]
        clip_frames = T.take_rows(frame_tokens, clip.frames())
        p_bar, raw = self.fine.encode(clip, clip_frames, s_act)
        local = R.select_frames(raw.data, self.cfg.delta)
        partition = R.partition_from_selection(clip, local, num_frames)
        return RetrievalResult(props, clip_index, p_bar, raw, partition)

    def ground(self, episode: Episode, partition: R.FramePartition,
               zero_text: bool = False):
        """Encoder + decoder + heads; returns per-frame box/logit tensors."""
        video = episode.video
        patches = [p + self.patch_pos for p in video.patches]
        frame_tokens = video.frame_tokens + self.frame_pos
        pos_video = VideoFeatures(video.grid, patches, frame_tokens)
        query = episode.query
        if zero_text:
            query = QuerySplit(Tensor(np.zeros(query.tokens.shape)),
                               list(query.attr_idx), list(query.act_idx),
                               list(query.words))
        enc_video, enc_query = self.encoder.forward(
            pos_video, query, partition.consistent, partition.independent)
        decoder_out = self.decoder.forward(enc_video, enc_query)
        boxes = []
        logits = []
        for feats in decoder_out:
            b, l = self.box_head.forward(feats)
            boxes.append(b)
            logits.append(l)
        return boxes, logits

    # -- losses ---------------------------------------------------------------

    def retrieval_losses(self, episode: Episode, negative: Episode,
                         result: RetrievalResult) -> Tensor:
        cfg = self.cfg
        s_act = episode.query.s_act()
        s_act_neg = negative.query.s_act()
        neg_props = R.generate_proposals(
            negative.video.num_frames, list(cfg.proposal_scales),
            negative.video.frame_tokens)
        neg_props = self.coarse.encode(neg_props,
                                       negative.video.frame_tokens)
        p1 = next(p for p in result.proposals if p.is_global)
        p1_neg = next(p for p in neg_props if p.is_global)
        g = R.loss_global(self.sim, p1.feature, s_act, p1_neg.feature,
                          s_act_neg, cfg.margin_global)
        c = R.loss_clip(self.sim, result.proposals, s_act, neg_props,
                        s_act_neg, cfg.margin_clip)
        f = R.loss_fine(self.sim, result.p_bar_c, result.clip.feature,
                        s_act, cfg.margin_fine)
        return R.retrieval_loss(g, c, f)

    def losses(self, episode: Episode, negative: Episode | None,
               lambda_det: float = 1.0, lambda_retr: float = 1.0):
        result = self.retrieve(episode)
        boxes, logits = self.ground(episode, result.partition)
        matches = match_predictions(boxes, logits, episode.gt,
                                    self.cfg)
        det = detection_loss(boxes, logits, matches, episode.gt)
        if self.cfg.use_retrieval and negative is not None:
            retr = self.retrieval_losses(episode, negative, result)
        else:
            retr = Tensor(np.zeros(()))
        return total_loss(det, retr, lambda_det, lambda_retr), det, retr

    # -- inference ------------------------------------------------------------

    def infer_video(self, episode: Episode,
                    zero_text: bool = False) -> InferResult:
        if zero_text:
            # the no-text control zeroes the query everywhere, retrieval
            # included, so no text can leak in through the partition
            q = episode.query
            zeroed = QuerySplit(Tensor(np.zeros(q.tokens.shape)),
                                list(q.attr_idx), list(q.act_idx),
                                list(q.words))
            episode = Episode(episode.video, zeroed, episode.gt,
                              episode.meta)
        result = self.retrieve(episode)
        boxes_t, logits_t = self.ground(episode, result.partition)
        out_boxes = []
        confs = []
        candidates = []
        for b, l in zip(boxes_t, logits_t):
            conf = 1.0 / (1.0 + np.exp(-l.data[:, 0]))
            cands = [(Box(*b.data[q]), float(conf[q]))
                     for q in range(b.shape[0])]
            best = 0
            for q in range(1, len(cands)):
                if cands[q][1] > cands[best][1]:
                    best = q
            candidates.append(cands)
            out_boxes.append(cands[best][0])
            confs.append(cands[best][1])
        return InferResult(out_boxes, confs, result.partition, candidates)


# -- matching and detection loss ---------------------------------------------

def match_predictions(boxes: list[Tensor], logits: list[Tensor],
                      gt, cfg: ModelConfig) -> list[int]:
    """Per frame, the query minimizing
    cost = l1_weight·L1 + giou_weight·(1 − gIoU) − conf_weight·log(conf);
    ties break toward the lowest query index."""
    matched = []
    for f, (b, l) in enumerate(zip(boxes, logits)):
        gt_box = gt.boxes[f]
        conf = 1.0 / (1.0 + np.exp(-l.data[:, 0]))
        best, best_cost = 0, None
        for q in range(b.shape[0]):
            pred = Box(*b.data[q])
            l1 = sum(abs(p - g) for p, g in
                     zip(b.data[q], (gt_box.cx, gt_box.cy, gt_box.w,
                                     gt_box.h)))
            cost = (cfg.cost_l1 * l1
                    + cfg.cost_giou * (1.0 - metrics.giou(pred, gt_box))
                    - cfg.cost_conf * math.log(conf[q]))
            if best_cost is None or cost < best_cost:
                best, best_cost = q, cost
        matched.append(best)
    return matched


def giou_tensor(pred_row: Tensor, gt_box: Box) -> Tensor:
    """Differentiable generalized IoU of a [1×4] center-size prediction
    against a fixed ground-truth box."""
    cx = T.slice_cols(pred_row, 0, 1)
    cy = T.slice_cols(pred_row, 1, 2)
    w = T.slice_cols(pred_row, 2, 3)
    h = T.slice_cols(pred_row, 3, 4)
    half = 0.5
    ax1, ax2 = cx - T.scale(w, half), cx + T.scale(w, half)
    ay1, ay2 = cy - T.scale(h, half), cy + T.scale(h, half)
    gx1, gy1, gx2, gy2 = (Tensor(np.full((1, 1), v))
                          for v in gt_box.corners())
    iw = T.relu(T.minimum(ax2, gx2) - T.maximum(ax1, gx1))
    ih = T.relu(T.minimum(ay2, gy2) - T.maximum(ay1, gy1))
    inter = iw * ih
    area_g = Tensor(np.full((1, 1), gt_box.w * gt_box.h))
    union = w * h + area_g - inter
    hull = ((T.maximum(ax2, gx2) - T.minimum(ax1, gx1))
            * (T.maximum(ay2, gy2) - T.minimum(ay1, gy1)))
    return T.div(inter, union) - T.div(hull - union, hull)


def detection_loss(boxes: list[Tensor], logits: list[Tensor],
                   matches: list[int], gt) -> Tensor:
    """Mean over frames of: L1 + (1 − gIoU) for the matched query, plus the
    per-query mean binary confidence loss (target 1 matched, 0 otherwise)."""
    terms = []
    for f, (b, l) in enumerate(zip(boxes, logits)):
        q = matches[f]
        gt_box = gt.boxes[f]
        num_q = b.shape[0]
        pred = T.take_rows(b, [q])
        target = Tensor(np.array([[gt_box.cx, gt_box.cy, gt_box.w,
                                   gt_box.h]]))
        l1 = T.tsum(T.absolute(pred - target))
        g = T.tsum(giou_tensor(pred, gt_box))
        one = Tensor(np.ones(()))
        conf = T.scale(T.bce_with_logits(T.take_rows(l, [q]), 1.0),
                       1.0 / num_q)
        if num_q > 1:
            rest = [i for i in range(num_q) if i != q]
            conf = conf + T.scale(
                T.bce_with_logits(T.take_rows(l, rest), 0.0),
                (num_q - 1) / num_q)
        terms.append(l1 + (one - g) + conf)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.scale(total, 1.0 / len(terms))


def total_loss(det: Tensor, retr: Tensor, lambda_det: float = 1.0,
               lambda_retr: float = 1.0) -> Tensor:
    return T.scale(det, lambda_det) + T.scale(retr, lambda_retr)


# -- optimization -------------------------------------------------------------

class Optimizer:
    def __init__(self, params: list[T.Parameter]):
        self.params = params

    def step(self, lr: float) -> None:
        raise NotImplementedError

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


class Sgd(Optimizer):
    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= lr * p.grad


class Adam(Optimizer):
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, lr: float) -> None:
        if lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            if p.grad is None:
                continue
            m = self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * p.grad
            v = self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * p.grad ** 2
            mh = m / (1 - b1 ** self.t)
            vh = v / (1 - b2 ** self.t)
            p.data -= lr * mh / (np.sqrt(vh) + self.eps)


def make_optimizer(name: str, params) -> Optimizer:
    return Adam(params) if name == "adam" else Sgd(params)


def train_step(model: GroundingModel, episode: Episode | list[Episode],
               negative: Episode | list[Episode] | None,
               optimizer: Optimizer, lr: float,
               lambda_det: float, lambda_retr: float,
               step_index: int = 0) -> float:
    """One optimizer step; a list of episodes is averaged as a minibatch."""
    episodes = episode if isinstance(episode, list) else [episode]
    negatives = (negative if isinstance(negative, list)
                 else [negative] * len(episodes))
    total = None
    for ep, neg in zip(episodes, negatives):
        loss, det, retr = model.losses(ep, neg, lambda_det, lambda_retr)
        if not math.isfinite(loss.item()):
            raise RuntimeError(
                f"non-finite loss at step {step_index}: det={det.item()}, "
                f"retr={retr.item()}, episode meta={ep.meta}")
        total = loss if total is None else total + loss
    mean = T.scale(total, 1.0 / len(episodes))
    value = mean.item()
    optimizer.zero_grad()
    mean.backward()
    optimizer.step(lr)
    return value


def train(model: GroundingModel, train_cfg: TrainConfig,
          eval_every: int = 0, eval_episodes: list[Episode] | None = None,
          on_eval=None, max_steps: int | None = None) -> list[float]:
    """Run the configured epochs; returns the per-step loss curve.

    Episode and negative sampling each own a seeded RNG stream, so two runs
    with the same seed produce bit-identical loss sequences.
    """
    rng_ep = np.random.default_rng((train_cfg.seed, 1))
    rng_neg = np.random.default_rng((train_cfg.seed, 2))
    optimizer = make_optimizer(train_cfg.optimizer, model.parameters())
    losses = []
    step = 0
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.rate_at(epoch)
        for _ in range(train_cfg.steps_per_epoch):
            if max_steps is not None and step >= max_steps:
                return losses
            batch = [generate_episode(model.world_cfg, rng_ep)
                     for _ in range(train_cfg.batch_size)]
            negatives = [generate_episode(model.world_cfg, rng_neg)
                         for _ in range(train_cfg.batch_size)]
            losses.append(train_step(
                model, batch, negatives, optimizer, lr,
                train_cfg.lambda_det, train_cfg.lambda_retr, step))
            step += 1
            if eval_every and step % eval_every == 0 and eval_episodes:
                report = metrics.evaluate(model, eval_episodes)
                log.info("step %d: avg=%.3f loss=%.4f", step, report.avg,
                         losses[-1])
                if on_eval is not None:
                    on_eval(step, report)
    return losses


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, model: GroundingModel) -> None:
    """Versioned npz of named parameter arrays plus the config payload and
    its hash."""
    configs = {"model": asdict(model.cfg), "world": asdict(model.world_cfg)}
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": metrics.config_hash(configs),
        "configs": configs,
    }
    arrays = {f"param:{p.name}": p.data for p in model.parameters()}
    np.savez(Path(path), __meta__=np.array(json.dumps(meta, sort_keys=True)),
             **arrays)


def load_checkpoint(path: str | Path) -> GroundingModel:
    data = np.load(Path(path), allow_pickle=False)
    meta = json.loads(str(data["__meta__"]))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    mc = meta["configs"]["model"]
    wc = meta["configs"]["world"]
    mc["proposal_scales"] = tuple(mc["proposal_scales"])
    for key in ("grid", "actions", "colors", "shapes"):
        wc[key] = tuple(wc[key])
    model = GroundingModel(ModelConfig(**mc), WorldConfig(**wc))
    loaded = {name[len("param:"):]: data[name]
              for name in data.files if name.startswith("param:")}
    for p in model.parameters():
        if p.name not in loaded:
            raise ValueError(f"checkpoint missing parameter {p.name}")
        if loaded[p.name].shape != p.data.shape:
            raise ValueError(f"parameter {p.name} shape mismatch")
        p.data[...] = loaded[p.name]
    return model


def checkpoint_hash(model: GroundingModel) -> str:
    configs = {"model": asdict(model.cfg), "world": asdict(model.world_cfg)}
    return metrics.config_hash(configs)
