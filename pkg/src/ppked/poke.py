"""Posterior knowledge: align image patches with abnormality topics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionBlock
from .errors import ShapeError
from .nn import Module, init_matrix, ones, zeros
from .tensor import Tensor

TOPICS = (
    "cardiomegaly", "scoliosis", "fractures", "effusion", "thickening",
    "pneumothorax", "hernia", "calcinosis", "emphysema", "pneumonia",
    "edema", "atelectasis", "cicatrix", "opacity", "lesion",
    "airspace disease", "hypoinflation", "medical device", "normal", "other",
)


@dataclass
class TopicBag:
    topics: tuple[str, ...]
    embedding: Tensor

    def __post_init__(self):
        if len(set(self.topics)) != len(self.topics):
            raise ValueError("topic names must be unique")
        if self.embedding.shape[0] != len(self.topics):
            raise ShapeError(f"{len(self.topics)} topics but embedding has {self.embedding.shape[0]} rows")

    def __len__(self) -> int:
        return len(self.topics)

    def index(self, name: str) -> int:
        return self.topics.index(name)


@dataclass
class PosteriorOutput:
    I_prime: Tensor
    T_hat: Tensor
    I_hat: Tensor
    image_to_topic_attention: np.ndarray
    topic_to_image_attention: np.ndarray


class PosteriorExplorer(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32,
                 dropout: float = 0.1, depth: int = 1):
        self.topic_blocks = [AttentionBlock(d, n_heads, rng, dtype, dropout) for _ in range(depth)]
        self.image_blocks = [AttentionBlock(d, n_heads, rng, dtype, dropout) for _ in range(depth)]
        self.ln_gain = ones(d, dtype)
        self.ln_bias = zeros(d, dtype)

    def __call__(self, image: Tensor, topics: Tensor) -> PosteriorOutput:
        if image.shape[-1] != topics.shape[-1]:
            raise ShapeError(f"image width {image.shape[-1]} vs topic width {topics.shape[-1]}")
        # image -> attended topics -> topic-related image regions, in that order
        t_hat = image
        for block in self.topic_blocks:
            t_hat, i2t = block.forward(t_hat, topics)
        i_hat = t_hat
        for block in self.image_blocks:
            i_hat, t2i = block.forward(i_hat, image)
        i_prime = T.layer_norm(i_hat + t_hat, self.ln_gain, self.ln_bias)
        return PosteriorOutput(i_prime, t_hat, i_hat, i2t, t2i)


def explore_posterior(image: Tensor, bag: TopicBag, explorer: PosteriorExplorer) -> PosteriorOutput:
    return explorer(image, bag.embedding)


class TopicHead(Module):
    """Linear d -> N_T tag classifier used only while pretraining."""

    def __init__(self, d: int, n_topics: int, rng: np.random.Generator, dtype=np.float32):
        self.W = init_matrix(rng, d, n_topics, dtype)
        self.b = zeros(n_topics, dtype)

    def logits(self, pooled: Tensor) -> Tensor:
        return pooled @ self.W + self.b

    def __call__(self, pooled: Tensor) -> Tensor:
        return T.sigmoid(self.logits(pooled))


def positive_class_weights(labels: np.ndarray) -> np.ndarray:
    """Per-topic negatives/positives ratio; topics without positives get weight 1."""
    labels = np.asarray(labels, dtype=np.float64)
    pos = labels.sum(axis=0)
    neg = labels.shape[0] - pos
    return np.where(pos > 0, neg / np.maximum(pos, 1.0), 1.0)
