"""Small-scale presets shared by the command line and the test suite.

The desk-scale setup (tiny model, 96px scenes, a few hundred steps) is sized
so a full train/eval cycle finishes in minutes on one CPU core while the
count signal stays learnable.
"""

from __future__ import annotations

from .config import ModelConfig
from .data import SyntheticSceneSpec
from .train_eval import TrainConfig


def tiny_model_config(seed: int = 0, **overrides) -> ModelConfig:
    return ModelConfig.tiny(seed=seed, **overrides)


def desk_scene_spec(seed: int = 0, **overrides) -> SyntheticSceneSpec:
    """Scenes the tiny model generalizes on: tight object-scale spread, 96px canvas."""
    kwargs = dict(
        canvas=96,
        count_min=1,
        count_max=20,
        scale_min=0.06,
        scale_max=0.07,
        max_iou=0.1,
        noise=0.02,
        seed=seed,
    )
    kwargs.update(overrides)
    return SyntheticSceneSpec(**kwargs)


def desk_train_config(seed: int = 0, **overrides) -> TrainConfig:
    kwargs = dict(
        batch_size=8,
        learning_rate=3e-3,
        weight_decay=1e-4,
        max_steps=2000,
        eval_interval=50,
        loss="l2",
        train_mae_stop=0.25,
        seed=seed,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)
