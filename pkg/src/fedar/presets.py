"""Desk-scale presets: the planted-keyword corpus and small model used for end-to-end checks."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from fedar.corpus import Review, SyntheticSpec
from fedar.model import ModelConfig
from fedar.training import TrainConfig

PLANTED_KEYWORDS = (
    (("rudeness", "delay"), ("waiter", "table"), ("courtesy", "smile")),
    (("grease", "crumb"), ("pasta", "bread"), ("flavor", "spice")),
)


def planted_spec(num_reviews: int = 2500) -> SyntheticSpec:
    """Two aspects, three classes, 60% noise words.

    ``min_keywords=0`` lets a segment carry no keyword at all, so a few reviews
    are genuinely ambiguous for one aspect.
    """
    return SyntheticSpec(
        aspects=("service", "food"),
        classes=3,
        keywords=PLANTED_KEYWORDS,
        reviews_per_cell=0,
        num_reviews=num_reviews,
        length_range=(3, 7),
        noise_rate=0.6,
        noise_vocab=tuple(f"w{i}" for i in range(30)),
        min_keywords=0,
        keyword_pos="NOUN",
        noise_pos="DET",
    )


def desk_model_config(num_aspects: int = 2, num_classes: int = 3, **switches) -> ModelConfig:
    return ModelConfig(num_aspects=num_aspects, num_classes=num_classes, d_emb=16, d_hidden=16,
                       encoder_layers=1, fm_factor_dim=4, d_or=8, **switches)


def desk_train_config(seed: int = 42, **overrides) -> TrainConfig:
    # narrow layers tolerate a larger step than the 600-unit default model
    return replace(TrainConfig(initial_lr=0.003, max_epochs=10, seed=seed), **overrides)


def corrupt_labels(reviews: Sequence[Review], fraction: float, num_classes: int,
                   seed: int = 42) -> list[Review]:
    """Replace round(fraction * n * K) (review, aspect) labels with a different random class."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = np.array([r.aspect_labels for r in reviews], dtype=np.int64)
    flat = labels.reshape(-1)
    picked = rng.choice(flat.size, size=int(round(fraction * flat.size)), replace=False)
    flat[picked] = (flat[picked] + rng.integers(1, num_classes, size=picked.size)) % num_classes
    return [replace(r, aspect_labels=tuple(int(y) for y in row)) for r, row in zip(reviews, labels)]
