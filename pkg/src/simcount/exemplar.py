"""Pseudo exemplar simulator.

Unfolds the exemplar feature grid into overlapping windows, averages them
into one representative patch, and tokenizes that patch into a short
sequence of channel-dim tokens via a shared linear projection.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import GeometryError


def unfold_patches(grid: torch.Tensor, kernel: int, stride: int = 1) -> torch.Tensor:
    """All kernel x kernel windows of a (B,C,G,G) grid, row-major.

    Returns (B, n, C, kernel, kernel) with n = ((G-kernel)//stride + 1)^2.
    Each window is an exact copy of the corresponding sub-grid.
    """
    if grid.ndim != 4:
        raise GeometryError(f"expected (B,C,G,G) grid, got {tuple(grid.shape)}")
    g_h, g_w = grid.shape[-2:]
    if kernel > g_h or kernel > g_w:
        raise GeometryError(f"unfold kernel {kernel} exceeds grid {g_h}x{g_w}")
    if stride < 1:
        raise GeometryError(f"unfold stride must be >= 1, got {stride}")
    windows = grid.unfold(2, kernel, stride).unfold(3, kernel, stride)  # (B,C,nh,nw,K,K)
    b, c, nh, nw, _, _ = windows.shape
    return windows.permute(0, 2, 3, 1, 4, 5).reshape(b, nh * nw, c, kernel, kernel)


def average_patches(patches: torch.Tensor) -> torch.Tensor:
    """Element-wise mean over the patch axis: (B,n,C,K,K) -> (B,C,K,K)."""
    return patches.mean(dim=1)


def tokenize_exemplar(patch: torch.Tensor, proj: nn.Linear, sub_patch: int = 2) -> torch.Tensor:
    """Split a (B,C,K,K) patch into (K/sub)^2 sub-patches and project each to C dims.

    Sub-patches are taken row-major; each is flattened channel-major (all
    sub_patch^2 values of channel 0, then channel 1, ...) to a vector of
    length sub_patch^2 * C before the shared projection. Returns (B,T,C).
    """
    b, c, k_h, k_w = patch.shape
    if k_h != k_w or k_h % sub_patch != 0:
        raise GeometryError(f"patch side {k_h}x{k_w} not divisible into {sub_patch}x{sub_patch} sub-patches")
    sub = patch.unfold(2, sub_patch, sub_patch).unfold(3, sub_patch, sub_patch)  # (B,C,gh,gw,s,s)
    gh, gw = sub.shape[2], sub.shape[3]
    sub = sub.permute(0, 2, 3, 1, 4, 5).reshape(b, gh * gw, c * sub_patch * sub_patch)
    return proj(sub)


def flatten_tokens(tokens: torch.Tensor) -> torch.Tensor:
    """(B,T,C) -> (B,T*C): tokens concatenated in their row-major order."""
    return tokens.reshape(tokens.shape[0], -1)


class ExemplarTokenizer(nn.Module):
    """Average the unfolded exemplar windows and tokenize the result."""

    def __init__(self, channels: int, kernel: int, sub_patch: int = 2, unfold_stride: int = 1):
        super().__init__()
        self.kernel = kernel
        self.sub_patch = sub_patch
        self.unfold_stride = unfold_stride
        self.proj = nn.Linear(sub_patch * sub_patch * channels, channels)

    @property
    def token_count(self) -> int:
        return (self.kernel // self.sub_patch) ** 2

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """(B,C,G,G) exemplar feature grid -> (B,T,C) token sequence."""
        patches = unfold_patches(grid, self.kernel, self.unfold_stride)
        pseudo = average_patches(patches)
        return tokenize_exemplar(pseudo, self.proj, self.sub_patch)
