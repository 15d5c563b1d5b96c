"""Architecture descriptions and the built-in fixtures."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError

STEM_STRIDE = 2
PATCH_SIZE = 7
NUM_STAGES = 3


@dataclass(frozen=True)
class BlockConfig:
    heads: int
    head_dim: int
    hidden: int

    @property
    def attn_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class StageConfig:
    embed_dim: int
    blocks: tuple[BlockConfig, ...]


@dataclass(frozen=True)
class ArchConfig:
    stem_channels: int
    stages: tuple[StageConfig, ...]
    num_classes: int = 1000
    input_resolution: int = 224

    def __post_init__(self):
        validate_arch(self)

    @property
    def grids(self) -> tuple[int, ...]:
        g = self.input_resolution // (STEM_STRIDE * PATCH_SIZE)
        return tuple(g >> i for i in range(len(self.stages)))

    @property
    def seq_lengths(self) -> tuple[int, ...]:
        return tuple(g * g + 1 for g in self.grids)

    @property
    def num_token_labels(self) -> int:
        return self.grids[-1] ** 2

    @property
    def depth(self) -> int:
        return sum(len(s.blocks) for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "stem_channels": self.stem_channels,
            "stages": [
                {
                    "embed_dim": s.embed_dim,
                    "blocks": [{"heads": b.heads, "head_dim": b.head_dim, "hidden": b.hidden} for b in s.blocks],
                }
                for s in self.stages
            ],
            "num_classes": self.num_classes,
            "input_resolution": self.input_resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        try:
            stages = tuple(
                StageConfig(
                    embed_dim=int(s["embed_dim"]),
                    blocks=tuple(BlockConfig(int(b["heads"]), int(b["head_dim"]), int(b["hidden"])) for b in s["blocks"]),
                )
                for s in d["stages"]
            )
            return cls(
                stem_channels=int(d["stem_channels"]),
                stages=stages,
                num_classes=int(d.get("num_classes", 1000)),
                input_resolution=int(d.get("input_resolution", 224)),
            )
        except (KeyError, TypeError) as e:
            raise ContractError(f"malformed architecture document: {e!r}") from e

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls.from_dict(json.loads(text))

    def with_resolution(self, resolution: int) -> "ArchConfig":
        return ArchConfig(self.stem_channels, self.stages, self.num_classes, resolution)


def validate_arch(cfg: ArchConfig) -> None:
    if cfg.stem_channels < 1 or cfg.num_classes < 1:
        raise ContractError("stem_channels and num_classes must be positive")
    if len(cfg.stages) != NUM_STAGES:
        raise ContractError(f"expected {NUM_STAGES} stages, got {len(cfg.stages)}")
    step = STEM_STRIDE * PATCH_SIZE
    if cfg.input_resolution < step or cfg.input_resolution % step:
        raise ContractError(f"input_resolution {cfg.input_resolution} is not a positive multiple of {step}")
    g = cfg.input_resolution // step
    if g % (1 << (NUM_STAGES - 1)):
        raise ContractError(f"stage-1 grid {g} cannot be halved {NUM_STAGES - 1} times")
    prev = 0
    for i, s in enumerate(cfg.stages):
        if s.embed_dim <= prev:
            raise ContractError(f"stage {i + 1} embed_dim {s.embed_dim} must exceed the previous stage")
        prev = s.embed_dim
        for b in s.blocks:
            if min(b.heads, b.head_dim, b.hidden) < 1:
                raise ContractError(f"stage {i + 1} has a block with nonpositive extents: {b}")


def _uniform_stage(embed: int, n: int, heads: int, head_dim: int, hidden: int) -> StageConfig:
    return StageConfig(embed, tuple(BlockConfig(heads, head_dim, hidden) for _ in range(n)))


def _stage(embed: int, head_dim: int, blocks: list[tuple[int, int]]) -> StageConfig:
    return StageConfig(embed, tuple(BlockConfig(h, head_dim, f) for h, f in blocks))


def vit_res_tiny_config(num_classes: int = 1000, input_resolution: int = 224) -> ArchConfig:
    return ArchConfig(
        stem_channels=24,
        stages=(
            _uniform_stage(192, 4, 3, 64, 768),
            _uniform_stage(384, 4, 6, 64, 1536),
            _uniform_stage(768, 4, 12, 64, 3072),
        ),
        num_classes=num_classes,
        input_resolution=input_resolution,
    )


def vit_resnas_tiny_config(num_classes: int = 1000, input_resolution: int = 224) -> ArchConfig:
    return ArchConfig(
        24,
        (
            _stage(176, 32, [(3, 704), (3, 576), (3, 640), (4, 576), (4, 704)]),
            _stage(352, 48, [(10, 1408), (8, 1408), (8, 1280), (8, 1408), (10, 1280), (10, 1024)]),
            _stage(704, 64, [(10, 2560), (10, 1792), (10, 2816), (8, 2816), (8, 2560)]),
        ),
        num_classes,
        input_resolution,
    )


def vit_resnas_small_config(num_classes: int = 1000, input_resolution: int = 224) -> ArchConfig:
    return ArchConfig(
        24,
        (
            _stage(220, 32, [(5, 880), (5, 880), (7, 800), (5, 720), (5, 720), (5, 720)]),
            _stage(440, 48, [(10, 1760), (10, 1440), (10, 1920), (10, 1600), (12, 1600), (12, 1440)]),
            _stage(880, 64, [(16, 3200), (12, 3200), (16, 2880), (12, 2240), (14, 2560)]),
        ),
        num_classes,
        input_resolution,
    )


def vit_resnas_medium_config(num_classes: int = 1000, input_resolution: int = 224) -> ArchConfig:
    return ArchConfig(
        24,
        (
            _stage(240, 32, [(7, 960), (6, 960), (7, 800), (8, 960), (7, 880), (8, 880), (6, 800)]),
            _stage(640, 48, [(10, 1120), (14, 1760), (14, 1920), (16, 1760), (14, 1440), (16, 1760), (16, 1920)]),
            _stage(880, 64, [(16, 3200), (10, 3840), (16, 3840), (12, 3200), (16, 3520), (14, 3520)]),
        ),
        num_classes,
        input_resolution,
    )


def toy_config(
    dims: tuple[int, int, int] = (16, 32, 64),
    blocks_per_stage: int = 2,
    heads: tuple[int, int, int] = (2, 2, 4),
    head_dim: int = 8,
    mlp_ratio: int = 2,
    stem_channels: int = 4,
    num_classes: int = 10,
    input_resolution: int = 56,
) -> ArchConfig:
    """Small ViT-Res for tests and desk-scale runs."""
    return ArchConfig(
        stem_channels,
        tuple(_uniform_stage(d, blocks_per_stage, h, head_dim, mlp_ratio * d) for d, h in zip(dims, heads)),
        num_classes,
        input_resolution,
    )


ARCH_FIXTURES = {
    "vit-res-tiny": vit_res_tiny_config,
    "vit-resnas-tiny": vit_resnas_tiny_config,
    "vit-resnas-small": vit_resnas_small_config,
    "vit-resnas-medium": vit_resnas_medium_config,
    "toy": toy_config,
}


def resolve_arch(spec: str | dict | ArchConfig, **overrides) -> ArchConfig:
    """Look up a fixture name, parse a JSON path, or accept a dict / config."""
    if isinstance(spec, ArchConfig):
        return spec
    if isinstance(spec, dict):
        return ArchConfig.from_dict(spec)
    if spec in ARCH_FIXTURES:
        return ARCH_FIXTURES[spec](**overrides)
    path = Path(spec)
    if not path.is_file():
        raise ContractError(f"unknown architecture {spec!r}: not a fixture name or a file")
    try:
        return ArchConfig.from_json(path.read_text())
    except json.JSONDecodeError as e:
        raise ContractError(f"malformed architecture JSON in {path}: {e}") from e
