"""Search spaces, sub-network choices and the flat categorical gene codec."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .config import ArchConfig, BlockConfig, StageConfig
from .errors import ContractError

KEEP_OPTIONS = (True, False)


@dataclass(frozen=True)
class StageSpace:
    embed_dims: tuple[int, ...]
    heads: tuple[int, ...]
    hiddens: tuple[int, ...]
    head_dim: int
    skippable: tuple[bool, ...]  # one flag per block slot

    @property
    def num_slots(self) -> int:
        return len(self.skippable)


@dataclass(frozen=True)
class SearchSpaceDef:
    stages: tuple[StageSpace, ...]
    stem_channels: int = 24
    num_classes: int = 1000
    resolution: int = 224
    max_macs: float = math.inf

    def __post_init__(self):
        for i, st in enumerate(self.stages):
            for label, opts in (("embed_dims", st.embed_dims), ("heads", st.heads), ("hiddens", st.hiddens)):
                if not opts:
                    raise ContractError(f"stage {i + 1} {label} is empty")
                if list(opts) != sorted(opts, reverse=True) or len(set(opts)) != len(opts):
                    raise ContractError(f"stage {i + 1} {label} must be strictly descending: {opts}")
            if not st.skippable:
                raise ContractError(f"stage {i + 1} has no block slots")
        # main-branch zero padding needs every stage-(i+1) width >= every stage-i width
        for a, b in zip(self.stages, self.stages[1:]):
            if min(b.embed_dims) <= max(a.embed_dims):
                raise ContractError("embedding dims must strictly increase across stages for every choice")

    def with_constraint(self, max_macs: float) -> "SearchSpaceDef":
        return SearchSpaceDef(self.stages, self.stem_channels, self.num_classes, self.resolution, max_macs)

    def supernet_arch(self) -> ArchConfig:
        """The largest network in the space; its weights are shared by all choices."""
        return ArchConfig(
            self.stem_channels,
            tuple(
                StageConfig(st.embed_dims[0], tuple(BlockConfig(st.heads[0], st.head_dim, st.hiddens[0]) for _ in st.skippable))
                for st in self.stages
            ),
            self.num_classes,
            self.resolution,
        )

    # gene layout ---------------------------------------------------------------

    def gene_options(self) -> list[tuple]:
        """Allowed values for each gene position, largest first."""
        opts: list[tuple] = [st.embed_dims for st in self.stages]
        for st in self.stages:
            for skippable in st.skippable:
                if skippable:
                    opts.append(KEEP_OPTIONS)
                opts.append(st.heads)
                opts.append(st.hiddens)
        return opts

    @property
    def gene_length(self) -> int:
        return len(self.gene_options())

    @property
    def size(self) -> int:
        return math.prod(len(o) for o in self.gene_options())

    def to_dict(self) -> dict:
        return {
            "stem_channels": self.stem_channels,
            "num_classes": self.num_classes,
            "resolution": self.resolution,
            "max_macs": None if math.isinf(self.max_macs) else self.max_macs,
            "stages": [
                {
                    "embed_dims": list(st.embed_dims),
                    "heads": list(st.heads),
                    "hiddens": list(st.hiddens),
                    "head_dim": st.head_dim,
                    "skippable": list(st.skippable),
                }
                for st in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpaceDef":
        try:
            stages = tuple(
                StageSpace(
                    tuple(int(v) for v in s["embed_dims"]),
                    tuple(int(v) for v in s["heads"]),
                    tuple(int(v) for v in s["hiddens"]),
                    int(s["head_dim"]),
                    tuple(bool(v) for v in s["skippable"]),
                )
                for s in d["stages"]
            )
            mm = d.get("max_macs")
            return cls(
                stages,
                int(d.get("stem_channels", 24)),
                int(d.get("num_classes", 1000)),
                int(d.get("resolution", 224)),
                math.inf if mm is None else float(mm),
            )
        except (KeyError, TypeError) as e:
            raise ContractError(f"malformed search space document: {e!r}") from e


@dataclass(frozen=True)
class SubNetChoice:
    """One sub-network.  ``heads``/``hidden`` hold a value for every slot;
    values on skipped slots are carried along but have no effect."""

    embed: tuple[int, ...]
    keep: tuple[tuple[bool, ...], ...]
    heads: tuple[tuple[int, ...], ...]
    hidden: tuple[tuple[int, ...], ...]

    def to_dict(self) -> dict:
        return {
            "embed": list(self.embed),
            "keep": [list(k) for k in self.keep],
            "heads": [list(h) for h in self.heads],
            "hidden": [list(f) for f in self.hidden],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubNetChoice":
        try:
            return cls(
                tuple(int(v) for v in d["embed"]),
                tuple(tuple(bool(v) for v in k) for k in d["keep"]),
                tuple(tuple(int(v) for v in h) for h in d["heads"]),
                tuple(tuple(int(v) for v in f) for f in d["hidden"]),
            )
        except (KeyError, TypeError) as e:
            raise ContractError(f"malformed choice document: {e!r}") from e

    def kept_slots(self, stage: int) -> list[int]:
        return [i for i, k in enumerate(self.keep[stage]) if k]

    def to_arch(self, space: SearchSpaceDef) -> ArchConfig:
        validate_choice(self, space)
        return ArchConfig(
            space.stem_channels,
            tuple(
                StageConfig(
                    self.embed[s],
                    tuple(BlockConfig(self.heads[s][i], st.head_dim, self.hidden[s][i]) for i in self.kept_slots(s)),
                )
                for s, st in enumerate(space.stages)
            ),
            space.num_classes,
            space.resolution,
        )


def validate_choice(choice: SubNetChoice, space: SearchSpaceDef) -> None:
    if len(choice.embed) != len(space.stages):
        raise ContractError("choice has the wrong number of stages")
    for s, st in enumerate(space.stages):
        if choice.embed[s] not in st.embed_dims:
            raise ContractError(f"stage {s + 1} embed {choice.embed[s]} not in {st.embed_dims}")
        n = st.num_slots
        if not (len(choice.keep[s]) == len(choice.heads[s]) == len(choice.hidden[s]) == n):
            raise ContractError(f"stage {s + 1} needs {n} block slots")
        for i in range(n):
            if not st.skippable[i] and not choice.keep[s][i]:
                raise ContractError(f"stage {s + 1} slot {i} is not skippable")
            if choice.heads[s][i] not in st.heads:
                raise ContractError(f"stage {s + 1} slot {i} heads {choice.heads[s][i]} not in {st.heads}")
            if choice.hidden[s][i] not in st.hiddens:
                raise ContractError(f"stage {s + 1} slot {i} hidden {choice.hidden[s][i]} not in {st.hiddens}")


def encode(choice: SubNetChoice, space: SearchSpaceDef) -> tuple[int, ...]:
    validate_choice(choice, space)
    gene = [space.stages[s].embed_dims.index(choice.embed[s]) for s in range(len(space.stages))]
    for s, st in enumerate(space.stages):
        for i, skippable in enumerate(st.skippable):
            if skippable:
                gene.append(KEEP_OPTIONS.index(choice.keep[s][i]))
            gene.append(st.heads.index(choice.heads[s][i]))
            gene.append(st.hiddens.index(choice.hidden[s][i]))
    return tuple(gene)


def decode(gene, space: SearchSpaceDef) -> SubNetChoice:
    opts = space.gene_options()
    if len(gene) != len(opts):
        raise ContractError(f"gene length {len(gene)} != {len(opts)}")
    for pos, (g, o) in enumerate(zip(gene, opts)):
        if not 0 <= int(g) < len(o):
            raise ContractError(f"gene position {pos} index {g} outside [0, {len(o)})")
    it = iter(int(g) for g in gene)
    embed = tuple(st.embed_dims[next(it)] for st in space.stages)
    keep, heads, hidden = [], [], []
    for st in space.stages:
        k, h, f = [], [], []
        for skippable in st.skippable:
            k.append(KEEP_OPTIONS[next(it)] if skippable else True)
            h.append(st.heads[next(it)])
            f.append(st.hiddens[next(it)])
        keep.append(tuple(k))
        heads.append(tuple(h))
        hidden.append(tuple(f))
    return SubNetChoice(embed, tuple(keep), tuple(heads), tuple(hidden))


def max_choice(space: SearchSpaceDef) -> SubNetChoice:
    return decode((0,) * space.gene_length, space)


# built-in spaces -----------------------------------------------------------------

_PAIRS3 = (False, True) * 3


def resnas_tiny_space(max_macs: float = math.inf) -> SearchSpaceDef:
    return SearchSpaceDef(
        (
            StageSpace((256, 224, 192, 176, 160), (6, 5, 4, 3), (768, 704, 640, 576, 512, 448, 384), 32, _PAIRS3),
            StageSpace((512, 448, 384, 352, 320), (12, 10, 8, 6), (1536, 1408, 1280, 1152, 1024, 896, 768), 48, _PAIRS3),
            StageSpace((1024, 896, 768, 704, 640), (12, 10, 8, 6), (3072, 2816, 2560, 2304, 2048, 1792, 1536), 64, _PAIRS3),
        ),
        max_macs=max_macs,
    )


def resnas_small_medium_space(max_macs: float = math.inf) -> SearchSpaceDef:
    slots = _PAIRS3 + (False,)
    return SearchSpaceDef(
        (
            StageSpace((320, 280, 240, 220, 200), (8, 7, 6, 5), (960, 880, 800, 720, 640, 560, 480), 32, slots),
            StageSpace((640, 560, 480, 440, 400), (16, 14, 12, 10), (1920, 1760, 1600, 1440, 1280, 1120, 960), 48, slots),
            StageSpace((1280, 1120, 960, 880, 800), (16, 14, 12, 10), (3840, 3520, 3200, 2880, 2560, 2240, 1920), 64, slots),
        ),
        max_macs=max_macs,
    )


def toy_space(
    num_classes: int = 10,
    resolution: int = 56,
    blocks_per_stage: int = 2,
    max_macs: float = math.inf,
) -> SearchSpaceDef:
    """A super-network small enough for exhaustive checks (widths <= 64)."""
    slots = tuple(i % 2 == 1 for i in range(blocks_per_stage))
    return SearchSpaceDef(
        (
            StageSpace((16, 12, 8), (2, 1), (32, 16), 8, slots),
            StageSpace((32, 24, 20), (3, 2, 1), (48, 32), 8, slots),
            StageSpace((64, 48, 40), (4, 2), (64, 32), 8, slots),
        ),
        stem_channels=4,
        num_classes=num_classes,
        resolution=resolution,
        max_macs=max_macs,
    )


def micro_space(max_macs: float = math.inf) -> SearchSpaceDef:
    """Two options per gene position, 12 positions: 4096 genes, small enough
    to enumerate."""
    return SearchSpaceDef(
        (
            StageSpace((16, 8), (2, 1), (32, 16), 8, (False,)),
            StageSpace((32, 24), (2, 1), (64, 32), 8, (False,)),
            StageSpace((64, 48), (4, 2), (128, 64), 8, (False, True)),
        ),
        stem_channels=4,
        num_classes=10,
        resolution=56,
        max_macs=max_macs,
    )


SPACE_FIXTURES = {
    "vit-resnas-tiny": resnas_tiny_space,
    "vit-resnas-small-medium": resnas_small_medium_space,
    "toy": toy_space,
    "micro": micro_space,
}


def resolve_space(spec: str | dict | SearchSpaceDef) -> SearchSpaceDef:
    if isinstance(spec, SearchSpaceDef):
        return spec
    if isinstance(spec, dict):
        return SearchSpaceDef.from_dict(spec)
    if spec in SPACE_FIXTURES:
        return SPACE_FIXTURES[spec]()
    path = Path(spec)
    if not path.is_file():
        raise ContractError(f"unknown search space {spec!r}: not a fixture name or a file")
    try:
        return SearchSpaceDef.from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as e:
        raise ContractError(f"malformed search space JSON in {path}: {e}") from e
