"""Configuration records shared by the model, renderer, trainer and CLI."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class AblationFlags:
    disable_delta: bool = False
    disable_shading: bool = False
    zero_signed_height: bool = False


@dataclass(frozen=True)
class ModelConfig:
    code_dim: int = 32
    pe_frequencies: int = 6
    knn_k: int = 4
    bg_threshold: float = 0.1
    delta_max: float = 0.1
    delta_width: int = 128
    delta_depth: int = 4
    density_width: int = 128
    density_depth: int = 4
    density_gain: float = 10.0
    density_bias_init: float = -0.3
    color_width: int = 256
    color_depth: int = 8
    color_skip: int = 4
    feature_dim: int = 128
    shading_width: int = 64
    shading_depth: int = 3
    code_init_std: float = 0.01


@dataclass(frozen=True)
class RenderSettings:
    samples_per_ray: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    stochastic: bool = False
    batch_size: int = 2048
    margin: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 20000
    batch_rays: int = 1024
    lr_start: float = 5e-4
    lr_end: float = 5e-6
    code_lr_multiplier: float = 10.0
    seed: int = 0
    disable_delta: bool = False
    disable_shading: bool = False
    zero_signed_height: bool = False
    eval_every: int = 1000
    foreground_fraction: float = 0.8
    mask_dilation: int = 3
    samples_per_ray: int = 64
    stochastic: bool = True
    random_background: bool = True

    def __post_init__(self):
        if not self.lr_start > self.lr_end > 0:
            raise ValueError("need lr_start > lr_end > 0")
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(self.disable_delta, self.disable_shading, self.zero_signed_height)


def config_keys(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def to_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def from_dict(cls, d: dict):
    known = set(config_keys(cls))
    unknown = sorted(set(d) - known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} key: {unknown[0]}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kw)

