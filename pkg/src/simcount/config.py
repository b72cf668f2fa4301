"""Model hyperparameters and ablation-flag handling."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import GeometryError

# Ablation rows: flags (recalibration M, condenser D, location counter C).
ABLATION_ROWS = {
    "B0": (False, False, False),
    "B1": (True, True, False),
    "B2": (False, False, True),
    "B3": (True, False, True),
    "B4": (True, True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    """All architectural hyperparameters.

    The three boolean flags switch the incremental components on/off:
    ``use_recalibration`` (anisotropic encoder + direction recalibration),
    ``use_condenser`` (bidirectional attention condenser) and
    ``use_location_counter`` (similarity-weighted pooling counter).
    """

    channels: int = 256
    stride: int = 16
    backbone_channels: tuple[int, ...] = (32, 64, 128, 256)
    exemplar_input_size: int = 512
    unfold_kernel: int = 8
    sub_patch: int = 2
    aniso_kernel: int = 3
    direction_hidden: int = 64
    head_widths: tuple[int, ...] = (64, 32, 1)
    use_recalibration: bool = True
    use_condenser: bool = True
    use_location_counter: bool = True
    seed: int = 0

    @property
    def exemplar_grid(self) -> int:
        """Side of the exemplar feature grid produced by the secondary branch."""
        return self.exemplar_input_size // self.stride

    @property
    def token_count(self) -> int:
        """Number of exemplar tokens, (kernel / sub_patch)^2."""
        return (self.unfold_kernel // self.sub_patch) ** 2

    @property
    def similarity_active(self) -> bool:
        """True when any component that requires the similarity path is enabled."""
        return self.use_recalibration or self.use_condenser or self.use_location_counter

    def validate(self) -> "ModelConfig":
        if self.exemplar_input_size % self.stride != 0:
            raise GeometryError(
                f"exemplar_input_size {self.exemplar_input_size} not divisible by stride {self.stride}"
            )
        if 2 ** len(self.backbone_channels) != self.stride:
            raise GeometryError(
                f"backbone has {len(self.backbone_channels)} halving stages but stride is {self.stride}"
            )
        if self.backbone_channels[-1] != self.channels:
            raise GeometryError(
                f"final backbone width {self.backbone_channels[-1]} != channels {self.channels}"
            )
        if self.unfold_kernel > self.exemplar_grid:
            raise GeometryError(
                f"unfold kernel {self.unfold_kernel} exceeds exemplar grid {self.exemplar_grid}"
            )
        if self.unfold_kernel % 2 != 0 or self.unfold_kernel % self.sub_patch != 0:
            raise GeometryError(f"unfold kernel {self.unfold_kernel} must be even and divisible by sub_patch")
        if self.aniso_kernel % 2 != 1:
            raise GeometryError("anisotropic kernel size must be odd for same-padding")
        if self.head_widths[-1] != 1:
            raise GeometryError("regression head must end in width 1")
        return self

    @classmethod
    def tiny(cls, seed: int = 0, **overrides) -> "ModelConfig":
        """Desk-scale configuration: 8 channels, 128px exemplar input, 4 tokens."""
        kwargs = dict(
            channels=8,
            backbone_channels=(4, 4, 8, 8),
            exemplar_input_size=128,
            unfold_kernel=4,
            direction_hidden=16,
            seed=seed,
        )
        kwargs.update(overrides)
        return cls(**kwargs).validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        if "head_widths" in d:
            d["head_widths"] = tuple(d["head_widths"])
        return cls(**d).validate()


def ablation_variant(config: ModelConfig, row: str) -> ModelConfig:
    """Return ``config`` with the component flags of one ablation row applied."""
    if row not in ABLATION_ROWS:
        raise ValueError(f"unknown ablation row {row!r}; expected one of {sorted(ABLATION_ROWS)}")
    m, d, c = ABLATION_ROWS[row]
    return dataclasses.replace(
        config, use_recalibration=m, use_condenser=d, use_location_counter=c
    )
