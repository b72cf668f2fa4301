"""Full counting model: backbone + exemplar simulator + similarity + counter.

The three config flags gate which components exist, matching the incremental
ablation rows:

* all flags off: backbone -> global average pooling -> regression head;
* similarity without the location counter: count = learned scale * mean(S);
* ``use_recalibration`` adds the anisotropic encoder (uniform direction
  weights unless the condenser is on);
* ``use_condenser`` adds the direction gate and the Gram-driven token
  weights (uniform 1/T otherwise).
"""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .backbone import PseudoSiameseBackbone
from .config import ModelConfig
from .counter import RegressionHead, pool_correlation
from .dass import (
    AnisotropicEncoder,
    DirectionGate,
    TokenWeightHead,
    gram_matrix,
    integrate_features,
    recalibrate_token,
    similarity_map,
    uniform_direction_weights,
    uniform_token_weights,
)
from .exemplar import ExemplarTokenizer


class ModelOutput(NamedTuple):
    counts: torch.Tensor  # (B,), unconstrained
    similarity: torch.Tensor | None  # (B,h,w), None when no similarity path exists
    intermediates: dict[str, torch.Tensor]


class SelfSimilarityCounter(nn.Module):
    """Counts repeated object instances from a single image, no exemplars."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = PseudoSiameseBackbone(config, with_exemplar=config.similarity_active)
        if config.similarity_active:
            self.tokenizer = ExemplarTokenizer(
                config.channels, config.unfold_kernel, config.sub_patch
            )
            self.mix_conv = nn.Conv2d(config.channels, config.channels, 3, padding=1)
        if config.use_recalibration:
            self.aniso = AnisotropicEncoder(config.channels, config.aniso_kernel)
            if config.use_condenser:
                self.direction_gate = DirectionGate(
                    config.token_count, config.channels, config.direction_hidden
                )
        if config.use_condenser:
            self.token_weight_head = TokenWeightHead(config.channels, config.token_count)
        if config.use_location_counter or not config.similarity_active:
            self.head = RegressionHead(config.channels, config.head_widths)
        else:
            self.sim_scale = nn.Parameter(torch.ones(()))

    def forward(self, image: torch.Tensor) -> ModelOutput:
        cfg = self.config
        f_r = self.backbone.extract_main_features(image)
        inter: dict[str, torch.Tensor] = {"features": f_r}

        if not cfg.similarity_active:
            embedding = f_r.mean(dim=(2, 3))
            inter["embedding"] = embedding
            return ModelOutput(self.head(embedding), None, inter)

        f_e = self.backbone.extract_exemplar_features(image)
        tokens = self.tokenizer(f_e)
        inter["exemplar_features"] = f_e
        inter["exemplar_token"] = tokens

        batch = image.shape[0]
        if cfg.use_recalibration:
            aniso = self.aniso(f_r)
            if cfg.use_condenser:
                dir_w = self.direction_gate(tokens)
            else:
                dir_w = uniform_direction_weights(batch, dtype=f_r.dtype, device=f_r.device)
            integrated = integrate_features(f_r, aniso, dir_w, self.mix_conv)
            inter["direction_weights"] = dir_w
        else:
            integrated = integrate_features(f_r, None, None, self.mix_conv)
        inter["integrated_features"] = integrated

        if cfg.use_condenser:
            gram = gram_matrix(f_r)
            tok_w = self.token_weight_head(gram)
            inter["gram"] = gram
        else:
            tok_w = uniform_token_weights(
                batch, cfg.token_count, dtype=tokens.dtype, device=tokens.device
            )
        recal = recalibrate_token(tokens, tok_w)
        inter["token_weights"] = tok_w
        inter["recalibrated_token"] = recal

        sim = similarity_map(integrated, recal)
        inter["similarity"] = sim

        if cfg.use_location_counter:
            embedding = pool_correlation(integrated, sim)
            inter["embedding"] = embedding
            counts = self.head(embedding)
        else:
            counts = self.sim_scale * sim.mean(dim=(1, 2))
        return ModelOutput(counts, sim, inter)


def build_model(config: ModelConfig) -> SelfSimilarityCounter:
    """Construct a model with deterministic, seed-controlled initialization."""
    torch.manual_seed(config.seed)
    return SelfSimilarityCounter(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
