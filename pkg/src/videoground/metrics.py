"""Box geometry, IoU-based accuracy protocol, and evaluation reports.

A whole-video prediction counts as accurate at threshold alpha when the
mean per-frame IoU is strictly greater than alpha; the report carries the
0.4 / 0.5 / 0.6 columns plus their average.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

ALPHAS = (0.4, 0.5, 0.6)


@dataclass(frozen=True)
class Box:
    """Normalized center-size box; all fields in [0, 1], w and h positive."""
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive: w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)


def iou(a: Box, b: Box) -> float:
    # Areas come from the corner form so that identical boxes score
    # exactly 1.0 (w*h can differ from the corner-derived area by an ulp).
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus the hull area not covered by the union."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (hull - union) / hull


def accuracy_at(frame_ious: list[float], alpha: float) -> bool:
    """True iff the video's mean per-frame IoU strictly exceeds alpha."""
    if not frame_ious:
        raise ValueError("accuracy_at: empty IoU list")
    return sum(frame_ious) / len(frame_ious) > alpha


@dataclass
class EvalReport:
    accuracies: dict[float, float]
    episode_count: int
    mean_iou: float
    config_hash: str
    records: list[dict] = field(default_factory=list)

    @property
    def avg(self) -> float:
        return sum(self.accuracies[a] for a in ALPHAS) / len(ALPHAS)

    def as_table(self) -> str:
        header = f"{'episodes':>9} {'0.4':>7} {'0.5':>7} {'0.6':>7} {'Avg':>7} {'mIoU':>7}"
        row = (f"{self.episode_count:>9d} "
               + " ".join(f"{self.accuracies[a]:7.3f}" for a in ALPHAS)
               + f" {self.avg:7.3f} {self.mean_iou:7.3f}")
        return header + "\n" + row

    def to_json(self) -> str:
        payload = {
            "accuracies": {str(a): self.accuracies[a] for a in ALPHAS},
            "avg": self.avg,
            "episode_count": self.episode_count,
            "mean_iou": self.mean_iou,
            "config_hash": self.config_hash,
            "records": self.records,
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate(model, episodes, cfg_hash: str = "") -> EvalReport:
    """Run inference per episode and aggregate the accuracy protocol.

    `model` only needs an `infer_video(episode)` returning an object with a
    per-frame `boxes` list; ground truth comes from the episode itself.
    """
    if not episodes:
        raise ValueError("evaluate: empty episode set")
    hits = {a: 0 for a in ALPHAS}
    records = []
    iou_total = 0.0
    frame_total = 0
    for idx, ep in enumerate(episodes):
        result = model.infer_video(ep)
        ious = [iou(pred, gt) for pred, gt in zip(result.boxes, ep.gt.boxes)]
        iou_total += sum(ious)
        frame_total += len(ious)
        for a in ALPHAS:
            hits[a] += accuracy_at(ious, a)
        records.append({"episode": idx, "frame_ious": ious})
    n = len(episodes)
    return EvalReport(
        accuracies={a: hits[a] / n for a in ALPHAS},
        episode_count=n,
        mean_iou=iou_total / frame_total,
        config_hash=cfg_hash,
        records=records,
    )
