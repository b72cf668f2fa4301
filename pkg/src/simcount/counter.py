"""Weakly-supervised location-aware counter.

Collapses the similarity-weighted feature field into a resolution-agnostic
channel vector and regresses a scalar count from it.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ShapeMismatchError


def pool_correlation(features: torch.Tensor, sim: torch.Tensor) -> torch.Tensor:
    """Similarity-weighted spatial sum: X_c = sum_p S(p) * F(p, c).

    (B,C,h,w) features with a (B,h,w) similarity map -> (B,C). The output
    shape is independent of the input resolution; the op is linear in each
    argument.
    """
    if features.shape[0] != sim.shape[0] or features.shape[-2:] != sim.shape[-2:]:
        raise ShapeMismatchError(
            f"similarity map {tuple(sim.shape)} does not match features {tuple(features.shape)}"
        )
    return torch.einsum("bchw,bhw->bc", features, sim)


class RegressionHead(nn.Module):
    """Fully-connected count regressor: widths 64, 32, 1 by default.

    ReLU between layers, none after the last: the output stays unconstrained
    during training (clamping to >= 0 happens only at reporting time).
    """

    def __init__(self, in_dim: int, widths: tuple[int, ...] = (64, 32, 1)):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for i, w in enumerate(widths):
            layers.append(nn.Linear(prev, w))
            if i < len(widths) - 1:
                layers.append(nn.ReLU(inplace=True))
            prev = w
        self.net = nn.Sequential(*layers)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        """(B,C) embedding -> (B,) scalar count predictions."""
        return self.net(embedding).squeeze(-1)
