"""Synthetic moving-shapes episodes with ground truth by construction.

Each episode places a few colored shapes on an H×W cell grid. The target
object performs the queried action (a unit move per frame in one of four
directions) exactly inside a contiguous span; distractors share the
target's attribute description OR its action, never both, so answering the
query requires genuinely joint attribute+action reasoning. Features are
synthesized directly in embedding space (occupancy + attributes + motion
delta, plus optional Gaussian noise); no pixels are rendered.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import QuerySplit, VideoFeatures
from .metrics import Box
from .tensor import Tensor

DUMP_VERSION = 1

ACTIONS = ("move-right", "move-left", "move-down", "move-up")
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle", "star")

_DELTAS = {
    "move-right": (1, 0),
    "move-left": (-1, 0),
    "move-down": (0, 1),
    "move-up": (0, -1),
}

# fixed seed so the embedding tables are the same in every process
_TABLE_SEED = 174

_MOTION_KEYS = ("still", "move-right", "move-left", "move-down", "move-up")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    frames: int = 8
    grid: tuple[int, int] = (4, 4)
    dim: int = 64
    min_objects: int = 2
    max_objects: int = 3
    span_min: int = 2
    span_max: int = 3
    noise_sigma: float = 0.05
    # weight of the motion-state embedding inside a patch feature; the
    # occupancy/attribute parts have weight 1 (a frame token averages J
    # patches, so per-token motion evidence scales with gain / J)
    motion_gain: float = 1.0
    # point-spread weight: each object's feature also lands on the 4
    # neighboring cells at this fraction, like camera blur. Gives object
    # evidence spatial extent (and, because moves are one cell per frame,
    # overlap between a moving object's consecutive frames)
    spatial_bleed: float = 0.0
    actions: tuple[str, ...] = ACTIONS
    colors: tuple[str, ...] = COLORS
    shapes: tuple[str, ...] = SHAPES

    def __post_init__(self):
        if self.frames < 2:
            raise ConfigError("need at least 2 frames")
        if self.min_objects < 2:
            raise ConfigError("need a target plus at least one distractor")
        if self.max_objects < self.min_objects:
            raise ConfigError("max_objects < min_objects")
        if not (1 <= self.span_min <= self.span_max <= self.frames - 1):
            raise ConfigError("action span must fit after frame 0")
        if self.span_max >= min(self.grid):
            raise ConfigError("grid too small for the longest action span")
        if self.spatial_bleed < 0:
            raise ConfigError("spatial_bleed must be non-negative")


@dataclass
class GroundTruth:
    """One box per frame plus the action span (diagnostics only; the
    retrieval losses never see it)."""
    boxes: list[Box]
    consistent_span: tuple[int, int]   # inclusive 0-based frame range


@dataclass
class ObjectTrack:
    color: str
    shape: str
    action: str
    span: tuple[int, int]
    positions: list[tuple[int, int]]   # (x, y) cell per frame
    is_target: bool = False


@dataclass
class Episode:
    video: VideoFeatures
    query: QuerySplit
    gt: GroundTruth
    meta: dict = field(default_factory=dict)


def _embedding_tables(dim: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(_TABLE_SEED)
    words = list(COLORS) + list(SHAPES) + ["moves", "right", "left",
                                           "down", "up", "background",
                                           "occupied"]
    tables = {}
    for w in words:
        v = rng.normal(0.0, 1.0, dim)
        tables[w] = v / np.linalg.norm(v)
    for key in _MOTION_KEYS:
        v = rng.normal(0.0, 1.0, dim)
        tables["motion:" + key] = v / np.linalg.norm(v)
    return tables


_TABLE_CACHE: dict[int, dict[str, np.ndarray]] = {}


def _tables(dim: int) -> dict[str, np.ndarray]:
    if dim not in _TABLE_CACHE:
        _TABLE_CACHE[dim] = _embedding_tables(dim)
    return _TABLE_CACHE[dim]


def _walk(start: tuple[int, int], action: str, span: tuple[int, int],
          frames: int) -> list[tuple[int, int]]:
    """Positions per frame: stationary outside the span, one cell per frame
    along the action direction inside it."""
    dx, dy = _DELTAS[action]
    pos = [start]
    for t in range(1, frames):
        x, y = pos[-1]
        if span[0] <= t <= span[1]:
            pos.append((x + dx, y + dy))
        else:
            pos.append((x, y))
    return pos


def _start_bounds(action: str, span_len: int,
                  grid: tuple[int, int]) -> tuple[range, range]:
    gh, gw = grid  # grid is (H, W); positions are (x, y)
    dx, dy = _DELTAS[action]
    xs = range(0, gw - span_len) if dx > 0 else (
        range(span_len, gw) if dx < 0 else range(gw))
    ys = range(0, gh - span_len) if dy > 0 else (
        range(span_len, gh) if dy < 0 else range(gh))
    return xs, ys


def _sample_track(cfg: WorldConfig, rng: np.random.Generator, color: str,
                  shape: str, action: str,
                  span: tuple[int, int] | None = None) -> ObjectTrack:
    if span is None:
        span_len = int(rng.integers(cfg.span_min, cfg.span_max + 1))
        start_t = int(rng.integers(1, cfg.frames - span_len + 1))
        span = (start_t, start_t + span_len - 1)
    span_len = span[1] - span[0] + 1
    xs, ys = _start_bounds(action, span_len, cfg.grid)
    x = int(rng.choice(list(xs)))
    y = int(rng.choice(list(ys)))
    return ObjectTrack(color, shape, action, span,
                       _walk((x, y), action, span, cfg.frames))


def matches_query(track: ObjectTrack, color: str, shape: str,
                  action: str) -> bool:
    """Oracle predicate: attributes equal AND the action is performed
    somewhere in the episode."""
    return (track.color, track.shape) == (color, shape) \
        and track.action == action


def generate_episode(cfg: WorldConfig, rng: np.random.Generator) -> Episode:
    """Deterministic given (cfg, rng state)."""
    colors, shapes, actions = cfg.colors, cfg.shapes, cfg.actions
    target_color = str(rng.choice(colors))
    target_shape = str(rng.choice(shapes))
    target_action = str(rng.choice(actions))
    target = _sample_track(cfg, rng, target_color, target_shape,
                           target_action)
    target.is_target = True
    tracks = [target]
    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(n_objects - 1):
        if rng.random() < 0.5:
            # shares the full attribute description, different action
            other_actions = [a for a in actions if a != target_action]
            action = str(rng.choice(other_actions))
            tracks.append(_sample_track(cfg, rng, target_color, target_shape,
                                        action))
        else:
            # shares the action, different attribute description; moves in
            # the target's span so the queried action happens exactly on
            # the labeled frames (frames, not objects, carry the label)
            while True:
                color = str(rng.choice(colors))
                shape = str(rng.choice(shapes))
                if (color, shape) != (target_color, target_shape):
                    break
            tracks.append(_sample_track(cfg, rng, color, shape,
                                        target_action, span=target.span))
    matches = [t for t in tracks
               if matches_query(t, target_color, target_shape, target_action)]
    assert matches == [target], "query must identify exactly one object"

    video = encode_features(tracks, cfg, rng)
    query = encode_query(target_color, target_shape, target_action, cfg.dim)
    gh, gw = cfg.grid
    boxes = [Box((x + 0.5) / gw, (y + 0.5) / gh, 1.0 / gw, 1.0 / gh)
             for x, y in target.positions]
    meta = {
        "object_count": n_objects,
        "action": target_action,
        "span": list(target.span),
        "distractors": [{"color": t.color, "shape": t.shape,
                         "action": t.action, "span": list(t.span)}
                        for t in tracks[1:]],
        "target": {"color": target_color, "shape": target_shape},
        "tracks": tracks,
    }
    return Episode(video, query, GroundTruth(boxes, target.span), meta)


def encode_features(tracks: list[ObjectTrack], cfg: WorldConfig,
                    rng: np.random.Generator) -> VideoFeatures:
    """Patch feature = sum over occupying objects of occupancy + attribute
    + motion-delta embeddings (background embedding when empty) + noise;
    frame token = mean of the frame's patch features."""
    tab = _tables(cfg.dim)
    gh, gw = cfg.grid
    j = gh * gw
    patches = []
    frame_rows = []
    for t in range(cfg.frames):
        grid = np.zeros((j, cfg.dim))
        bleed = np.zeros((j, cfg.dim))
        occupied = np.zeros(j, dtype=bool)
        for track in tracks:
            x, y = track.positions[t]
            cell = y * gw + x
            occupied[cell] = True
            if t == 0:
                motion = "still"
            else:
                px, py = track.positions[t - 1]
                motion = track.action if (x, y) != (px, py) else "still"
            feat = (tab["occupied"] + tab[track.color] + tab[track.shape]
                    + cfg.motion_gain * tab["motion:" + motion])
            grid[cell] += feat
            if cfg.spatial_bleed > 0:
                for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1),
                               (x, y - 1)):
                    if 0 <= nx < gw and 0 <= ny < gh:
                        bleed[ny * gw + nx] += cfg.spatial_bleed * feat
        grid[~occupied] = tab["background"]
        if cfg.spatial_bleed > 0:
            grid = grid + bleed
        if cfg.noise_sigma > 0:
            grid = grid + rng.normal(0.0, cfg.noise_sigma, grid.shape)
        patches.append(Tensor(grid))
        frame_rows.append(grid.mean(axis=0))
    return VideoFeatures(cfg.grid, patches, Tensor(np.stack(frame_rows)))


def encode_query(color: str, shape: str, action: str, dim: int) -> QuerySplit:
    """Template "<color> <shape> moves <direction>": one token per slot,
    attribute part = {color, shape}, action part = {moves, direction}."""
    tab = _tables(dim)
    direction = action.split("-")[1]
    words = [color, shape, "moves", direction]
    tokens = Tensor(np.stack([tab[w] for w in words]))
    return QuerySplit(tokens, attr_idx=[0, 1], act_idx=[2, 3], words=words)


def check_episode(ep: Episode) -> None:
    """Oracle checks: unique full-query match, action frames == span, and
    GT boxes coincide with the target's occupancy footprint."""
    tracks: list[ObjectTrack] = ep.meta["tracks"]
    tgt = ep.meta["target"]
    action = ep.meta["action"]
    matches = [t for t in tracks
               if matches_query(t, tgt["color"], tgt["shape"], action)]
    assert len(matches) == 1 and matches[0].is_target
    target = matches[0]
    a, b = ep.gt.consistent_span
    for t in range(1, len(target.positions)):
        moved = target.positions[t] != target.positions[t - 1]
        assert moved == (a <= t <= b)
    gh, gw = ep.video.grid
    for t, box in enumerate(ep.gt.boxes):
        x, y = target.positions[t]
        true_box = Box((x + 0.5) / gw, (y + 0.5) / gh, 1.0 / gw, 1.0 / gh)
        assert box == true_box


# -- episode dump format ------------------------------------------------------

def save_episodes(prefix: str | Path, cfg: WorldConfig,
                  episodes: list[Episode]) -> None:
    """Write `<prefix>.json` (versioned manifest) + `<prefix>.npz`
    (feature blocks)."""
    prefix = Path(prefix)
    arrays = {}
    manifest_eps = []
    for i, ep in enumerate(episodes):
        arrays[f"ep{i}_patches"] = np.stack(
            [p.data for p in ep.video.patches])
        arrays[f"ep{i}_frame_tokens"] = ep.video.frame_tokens.data
        arrays[f"ep{i}_query"] = ep.query.tokens.data
        arrays[f"ep{i}_boxes"] = np.array(
            [[b.cx, b.cy, b.w, b.h] for b in ep.gt.boxes])
        meta = {k: v for k, v in ep.meta.items() if k != "tracks"}
        manifest_eps.append({
            "span": list(ep.gt.consistent_span),
            "words": ep.query.words,
            "attr_idx": ep.query.attr_idx,
            "act_idx": ep.query.act_idx,
            "meta": meta,
        })
    cfg_dict = asdict(cfg)
    manifest = {"version": DUMP_VERSION, "world": cfg_dict,
                "episodes": manifest_eps}
    prefix.with_suffix(".json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2))
    np.savez(prefix.with_suffix(".npz"), **arrays)


def load_episodes(prefix: str | Path) -> tuple[WorldConfig, list[Episode]]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("version") != DUMP_VERSION:
        raise ConfigError(
            f"unsupported episode dump version {manifest.get('version')}")
    w = manifest["world"]
    for key in ("grid", "actions", "colors", "shapes"):
        w[key] = tuple(w[key])
    cfg = WorldConfig(**w)
    data = np.load(prefix.with_suffix(".npz"))
    episodes = []
    for i, entry in enumerate(manifest["episodes"]):
        patches = [Tensor(frame) for frame in data[f"ep{i}_patches"]]
        video = VideoFeatures(cfg.grid, patches,
                              Tensor(data[f"ep{i}_frame_tokens"]))
        query = QuerySplit(Tensor(data[f"ep{i}_query"]),
                           list(entry["attr_idx"]), list(entry["act_idx"]),
                           list(entry["words"]))
        boxes = [Box(*row) for row in data[f"ep{i}_boxes"]]
        gt = GroundTruth(boxes, tuple(entry["span"]))
        episodes.append(Episode(video, query, gt, dict(entry["meta"])))
    return cfg, episodes
