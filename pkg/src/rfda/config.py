from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters.

    radius: temporal radius R (window of 2R+1 frames)
    features: hidden-state channels F
    kernel: deformable kernel size K of the fusion convolution
    blocks: number of attention blocks L in the enhancement head
    beta: recursive-fusion residual scale
    """

    radius: int = 3
    features: int = 64
    kernel: int = 3
    blocks: int = 2
    beta: float = 0.2
    preset: str = "standard"

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.features < 16 or self.features % 16:
            raise ValueError("features must be a positive multiple of 16")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    @property
    def window(self) -> int:
        return 2 * self.radius + 1

    def with_beta(self, beta: float) -> "ModelConfig":
        return replace(self, beta=beta)


PRESETS = {
    "standard": ModelConfig(radius=3, features=64, kernel=3, blocks=2, preset="standard"),
    "tiny": ModelConfig(radius=3, features=16, kernel=3, blocks=1, preset="tiny"),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
