"""Dual-attention self-similarity learning.

Anisotropic encoding of the main features, cross-branch recalibration in
both directions (token -> direction weights, feature Gram -> token weights),
and construction of the per-pixel self-similarity map.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatchError
from .exemplar import flatten_tokens


class AnisotropicFeatures(NamedTuple):
    horizontal: torch.Tensor
    vertical: torch.Tensor
    basis: torch.Tensor


class AnisotropicEncoder(nn.Module):
    """Three same-padded convolutions probing one direction each.

    The horizontal kernel spans only the width axis (1 x k), the vertical one
    only the height axis (k x 1), and the basis kernel only the channel axis
    (1 x 1); all outputs keep the input's spatial shape.
    """

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        self.horizontal = nn.Conv2d(channels, channels, (1, kernel), padding=(0, kernel // 2))
        self.vertical = nn.Conv2d(channels, channels, (kernel, 1), padding=(kernel // 2, 0))
        self.basis = nn.Conv2d(channels, channels, 1)

    def forward(self, features: torch.Tensor) -> AnisotropicFeatures:
        return AnisotropicFeatures(
            horizontal=self.horizontal(features),
            vertical=self.vertical(features),
            basis=self.basis(features),
        )


class DirectionGate(nn.Module):
    """Two-layer MLP mapping the flat exemplar token to three softmax weights."""

    def __init__(self, token_count: int, channels: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(token_count * channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, 3),
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B,T,C) tokens -> (B,3) weights on the probability simplex."""
        return F.softmax(self.net(flatten_tokens(tokens)), dim=-1)


def uniform_direction_weights(batch: int, *, dtype=None, device=None) -> torch.Tensor:
    """Fixed (1/3, 1/3, 1/3) weights used when the condenser is disabled."""
    return torch.full((batch, 3), 1.0 / 3.0, dtype=dtype, device=device)


def integrate_features(
    features: torch.Tensor,
    aniso: AnisotropicFeatures | None,
    direction_weights: torch.Tensor | None,
    mix_conv: nn.Module,
) -> torch.Tensor:
    """Weighted pixel-wise sum of the directional responses, then a 3x3 conv.

    Computes mix_conv(F + a*H + b*V + g*B) with per-sample weights (a,b,g).
    With ``aniso=None`` the directional branch contributes nothing and the
    result degenerates to mix_conv(F).
    """
    if aniso is None:
        return mix_conv(features)
    for name, t in zip(("horizontal", "vertical", "basis"), aniso):
        if t.shape != features.shape:
            raise ShapeMismatchError(
                f"{name} features {tuple(t.shape)} do not match base {tuple(features.shape)}"
            )
    a, b, g = (direction_weights[:, i].view(-1, 1, 1, 1) for i in range(3))
    mixed = features + a * aniso.horizontal + b * aniso.vertical + g * aniso.basis
    return mix_conv(mixed)


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """Channel self-similarity: (B,C,h,w) -> (B,C,C) via F F^T on (C, h*w).

    Symmetric and positive semidefinite; invariant to any permutation of the
    spatial positions, hence independent of input resolution in shape.
    """
    flat = features.flatten(2)
    return flat @ flat.transpose(1, 2)


class TokenWeightHead(nn.Module):
    """Pool the Gram matrix to a channel vector and emit per-token softmax weights."""

    def __init__(self, channels: int, token_count: int):
        super().__init__()
        self.fc = nn.Linear(channels, token_count)

    def forward(self, gram: torch.Tensor) -> torch.Tensor:
        """(B,C,C) -> (B,T) weights summing to 1 per sample."""
        pooled = gram.mean(dim=2)
        return F.softmax(self.fc(pooled), dim=-1)


def uniform_token_weights(batch: int, token_count: int, *, dtype=None, device=None) -> torch.Tensor:
    """Fixed 1/T weights used when the condenser is disabled."""
    return torch.full((batch, token_count), 1.0 / token_count, dtype=dtype, device=device)


def recalibrate_token(tokens: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Scale token i by weight i, then add the original tokens as a residual.

    (B,T,C) tokens with (B,T) weights -> (B,T,C).
    """
    if tokens.shape[:2] != weights.shape:
        raise ShapeMismatchError(
            f"token weights {tuple(weights.shape)} do not match tokens {tuple(tokens.shape[:2])}"
        )
    return tokens * weights.unsqueeze(-1) + tokens


def similarity_map(features: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Per-pixel mean dot product between features and the token sequence.

    S(p) = (1/T) sum_j <features(p), token_j>, i.e. the (h*w, C) feature
    matrix times the (C, T) token matrix averaged over tokens.
    (B,C,h,w) x (B,T,C) -> (B,h,w).
    """
    b, c, h, w = features.shape
    if tokens.shape[0] != b or tokens.shape[2] != c:
        raise ShapeMismatchError(
            f"tokens {tuple(tokens.shape)} incompatible with features {tuple(features.shape)}"
        )
    scores = tokens @ features.flatten(2)  # (B,T,h*w)
    return scores.mean(dim=1).view(b, h, w)
