"""Desk-scale video object grounding.

A query sentence ("red square moves right") is grounded per frame in a
synthetic moving-shapes video: coarse-to-fine action retrieval splits the
frames into action-consistent / action-independent sets, a hierarchical
locality-aware encoder fuses video and text, and a small set-prediction
decoder regresses one box per frame.
"""

from .attention import AttentionVariant, HeadConfig, MultiHeadAttention
from .encoder import QuerySplit, VideoFeatures
from .metrics import Box, EvalReport, evaluate, giou, iou
from .pipeline import (GroundingModel, ModelConfig, TrainConfig,
                       load_checkpoint, save_checkpoint, train)
from .tensor import Parameter, Tensor, grad_check
from .world import Episode, WorldConfig, generate_episode

__all__ = [
    "AttentionVariant", "Box", "Episode", "EvalReport", "GroundingModel",
    "HeadConfig", "ModelConfig", "MultiHeadAttention", "Parameter",
    "QuerySplit", "Tensor", "TrainConfig", "VideoFeatures", "WorldConfig",
    "evaluate", "generate_episode", "giou", "grad_check", "iou",
    "load_checkpoint", "save_checkpoint", "train",
]

__version__ = "0.1.0"
