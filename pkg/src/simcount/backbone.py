"""Pseudo-Siamese frontend: two separately-trained convolutional branches.

The main branch maps an arbitrary-size image to stride-16 features; the
secondary branch first resizes the image to a fixed square so it always
yields the same exemplar feature grid. The two branches share architecture
but never share parameters.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import ShapeMismatchError


class FeatureBranch(nn.Module):
    """Stack of stride-2 conv stages; total stride is 2 ** len(widths).

    Each stage: 3x3 conv (stride 2) -> per-channel batch statistics -> ReLU.
    Evaluation mode freezes the statistics, making the forward pass a pure
    function of (input, parameters).
    """

    def __init__(self, widths: tuple[int, ...], in_channels: int = 3):
        super().__init__()
        layers = []
        prev = in_channels
        for w in widths:
            layers += [
                nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            ]
            prev = w
        self.stages = nn.Sequential(*layers)
        self.stride = 2 ** len(widths)
        self.out_channels = widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class PseudoSiameseBackbone(nn.Module):
    """Main + exemplar feature branches with independent parameters.

    Either branch can be replaced by any module mapping (B,3,H,W) to
    (B,C,H/stride,W/stride), e.g. a pretrained trunk.
    """

    def __init__(
        self,
        config: ModelConfig,
        main_branch: nn.Module | None = None,
        exemplar_branch: nn.Module | None = None,
        with_exemplar: bool = True,
    ):
        super().__init__()
        self.config = config
        self.main_branch = main_branch or FeatureBranch(config.backbone_channels)
        if with_exemplar:
            self.exemplar_branch = exemplar_branch or FeatureBranch(config.backbone_channels)
        else:
            self.exemplar_branch = exemplar_branch

    @property
    def stride(self) -> int:
        return self.config.stride

    def extract_main_features(self, image: torch.Tensor) -> torch.Tensor:
        """(B,3,H,W) -> (B,C,H/stride,W/stride); H and W must divide by stride."""
        _check_image(image)
        h, w = image.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ShapeMismatchError(
                f"image size {h}x{w} not divisible by backbone stride {self.stride}"
            )
        return self.main_branch(image)

    def extract_exemplar_features(self, image: torch.Tensor) -> torch.Tensor:
        """(B,3,H,W) -> (B,C,G,G) after internal resize to the fixed square input."""
        if self.exemplar_branch is None:
            raise ShapeMismatchError("this backbone was built without an exemplar branch")
        _check_image(image)
        size = self.config.exemplar_input_size
        if image.shape[-2:] != (size, size):
            image = F.interpolate(image, size=(size, size), mode="bilinear", align_corners=False)
        return self.exemplar_branch(image)


def _check_image(image: torch.Tensor) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeMismatchError(f"expected (B,3,H,W) image tensor, got {tuple(image.shape)}")
