"""Weight-sharing super-network.

A sub-network is simulated inside the maximal network by zeroing a suffix of
channels (ordered masking) at every site.  Each example in a batch carries its
own widths, so ``N_a`` different sub-networks train in one forward/backward
pass.  Layer norms re-scale their statistics to the active prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ArchConfig
from .errors import ContractError
from .model import LN_EPS, Params, _param_shapes, forward
from .space import SearchSpaceDef, SubNetChoice, decode, validate_choice

WARMUP_FRACTION = 0.25


@dataclass
class MaskSet:
    """Per-example active-prefix widths for every masked site.

    embed: [B, stages]; attn / hidden / keep: one [B, slots] array per stage.
    Attention widths are heads * head_dim.
    """

    embed: np.ndarray
    attn: list
    hidden: list
    keep: list
    max_embed: tuple
    max_attn: tuple
    max_hidden: tuple

    def __post_init__(self):
        self._cache: dict = {}

    @property
    def batch(self) -> int:
        return self.embed.shape[0]

    def _prefix(self, key, widths: np.ndarray, cmax: int) -> np.ndarray:
        if key not in self._cache:
            m = (np.arange(cmax)[None, :] < widths[:, None]).astype(ad.default_dtype())
            self._cache[key] = m[:, None, :]
        return self._cache[key]

    def embed_active(self, stage: int) -> np.ndarray:
        return self.embed[:, stage][:, None]

    def embed_mask(self, stage: int) -> np.ndarray:
        return self._prefix(("e", stage), self.embed[:, stage], self.max_embed[stage])

    def attn_mask(self, stage: int, slot: int) -> np.ndarray:
        return self._prefix(("a", stage, slot), self.attn[stage][:, slot], self.max_attn[stage])

    def hidden_mask(self, stage: int, slot: int) -> np.ndarray:
        return self._prefix(("h", stage, slot), self.hidden[stage][:, slot], self.max_hidden[stage])

    def keep_mask(self, stage: int, slot: int):
        k = self.keep[stage][:, slot]
        if k.all():
            return None
        return k.astype(ad.default_dtype())[:, None, None]

    def widths(self, i: int) -> dict:
        """Widths seen by example ``i`` (for round-trip checks)."""
        return {
            "embed": tuple(int(v) for v in self.embed[i]),
            "attn": tuple(tuple(int(v) for v in a[i]) for a in self.attn),
            "hidden": tuple(tuple(int(v) for v in h[i]) for h in self.hidden),
            "keep": tuple(tuple(bool(v) for v in k[i]) for k in self.keep),
        }

    @classmethod
    def stack(cls, sets: Sequence["MaskSet"], repeats: int = 1) -> "MaskSet":
        """Concatenate along the batch, repeating each set ``repeats`` times."""
        first = sets[0]
        cat = lambda arrs: np.repeat(np.concatenate(arrs, axis=0), repeats, axis=0)  # noqa: E731
        n = len(first.attn)
        return cls(
            cat([s.embed for s in sets]),
            [cat([s.attn[j] for s in sets]) for j in range(n)],
            [cat([s.hidden[j] for s in sets]) for j in range(n)],
            [cat([s.keep[j] for s in sets]) for j in range(n)],
            first.max_embed,
            first.max_attn,
            first.max_hidden,
        )


def masks_from_choice(choice: SubNetChoice, space: SearchSpaceDef) -> MaskSet:
    try:
        validate_choice(choice, space)
    except ContractError as e:
        raise ContractError(f"choice does not fit the super-network: {e}") from e
    return MaskSet(
        embed=np.array([choice.embed], dtype=np.int64),
        attn=[np.array([[h * st.head_dim for h in choice.heads[s]]], dtype=np.int64) for s, st in enumerate(space.stages)],
        hidden=[np.array([choice.hidden[s]], dtype=np.int64) for s in range(len(space.stages))],
        keep=[np.array([choice.keep[s]], dtype=bool) for s in range(len(space.stages))],
        max_embed=tuple(st.embed_dims[0] for st in space.stages),
        max_attn=tuple(st.heads[0] * st.head_dim for st in space.stages),
        max_hidden=tuple(st.hiddens[0] for st in space.stages),
    )


def choice_from_masks(masks: MaskSet, i: int, space: SearchSpaceDef) -> SubNetChoice:
    w = masks.widths(i)
    return SubNetChoice(
        w["embed"],
        w["keep"],
        tuple(tuple(a // st.head_dim for a in w["attn"][s]) for s, st in enumerate(space.stages)),
        w["hidden"],
    )


def masked_layer_norm(x: Tensor, active, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Layer norm whose statistics cover only the first ``active`` channels.

    Slots at or beyond ``active`` must be zero on input and are zero on output.
    """
    c = x.shape[-1]
    a = np.asarray(active)
    if np.any(a < 1) or np.any(a > c):
        raise ContractError(f"active width {active} outside [1, {c}]")
    return ad.layer_norm(x, gamma, beta, eps, active=a)


def supernet_forward_multi(
    params: Params,
    space: SearchSpaceDef,
    images,
    choices: Sequence[SubNetChoice],
    *,
    training: bool = False,
    drop_path_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> tuple[Tensor, Tensor]:
    """One masked forward where example i runs choice ``floor(i * N_a / B)``."""
    n_a = len(choices)
    bsz = np.shape(images.data if isinstance(images, Tensor) else images)[0]
    if n_a < 1 or bsz % n_a:
        raise ContractError(f"batch of {bsz} is not divisible into {n_a} sub-batches")
    masks = MaskSet.stack([masks_from_choice(c, space) for c in choices], repeats=bsz // n_a)
    return forward(
        params, space.supernet_arch(), images,
        training=training, drop_path_rate=drop_path_rate, rng=rng, masks=masks, trace=trace,
    )


def _source_name(name: str, choice: SubNetChoice) -> str:
    """Map a sub-network parameter name to the super-network slot it slices."""
    parts = name.split(".")
    if len(parts) > 3 and parts[0] == "stages" and parts[2] == "blocks":
        s, j = int(parts[1]), int(parts[3])
        parts[3] = str(choice.kept_slots(s)[j])
    return ".".join(parts)


def extract_subnet(params: Params, space: SearchSpaceDef, choice: SubNetChoice) -> tuple[ArchConfig, Params]:
    """Standalone copy of a sub-network: every tensor is a prefix slice."""
    arch = choice.to_arch(space)
    out: Params = {}
    for name, shape, _ in _param_shapes(arch):
        src = params[_source_name(name, choice)].data
        sl = tuple(slice(0, n) for n in shape)
        out[name] = Tensor(np.array(src[sl], copy=True), requires_grad=True, name=name)
    return arch, out


def sample_choice(space: SearchSpaceDef, rng: np.random.Generator, bounds: Sequence[int] | None = None) -> SubNetChoice:
    """Draw every gene position uniformly from its allowed prefix of options."""
    opts = space.gene_options()
    if bounds is None:
        bounds = [len(o) for o in opts]
    if len(bounds) != len(opts):
        raise ContractError("bounds do not match the gene layout")
    for b, o in zip(bounds, opts):
        if not 1 <= b <= len(o):
            raise ContractError(f"empty or oversized bound {b} for {len(o)} options")
    return decode([int(rng.integers(b)) for b in bounds], space)


def warmup_bounds(epoch_fraction: float, space: SearchSpaceDef, warmup: float = WARMUP_FRACTION) -> tuple[int, ...]:
    """Allowed prefix size per gene position during width/depth warmup.

    Only the maxima at 0; option k of a list of L becomes available at
    ``warmup * k / (L - 1)``; everything from ``warmup`` on.
    """
    sizes = []
    for o in space.gene_options():
        n = len(o)
        if epoch_fraction >= warmup or n == 1:
            sizes.append(n)
        else:
            frac = max(epoch_fraction, 0.0) / warmup
            sizes.append(min(n, 1 + math.floor((n - 1) * frac + 1e-9)))
    return tuple(sizes)


class SuperNet:
    """Super-network parameters bound to their search space."""

    def __init__(self, space: SearchSpaceDef, params: Params):
        self.space = space
        self.params = params

    @classmethod
    def build(cls, space: SearchSpaceDef, seed: int = 0) -> "SuperNet":
        from .model import init_params

        return cls(space, init_params(space.supernet_arch(), seed))

    @property
    def arch(self) -> ArchConfig:
        return self.space.supernet_arch()

    def __call__(self, images, choices, training=False, drop_path_rate=0.0, rng=None):
        return supernet_forward_multi(
            self.params, self.space, images, choices, training=training, drop_path_rate=drop_path_rate, rng=rng
        )

    def extract(self, choice: SubNetChoice):
        from .model import ViTRes

        arch, params = extract_subnet(self.params, self.space, choice)
        return ViTRes(arch, params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None
