"""ViT-Res: conv stem, three transformer stages joined by residual spatial
reduction, a classification head on the cls token and a shared token-label
head on the last-stage patch tokens.

``forward`` optionally takes a mask set (see :mod:`vitresnas.supernet`) that
narrows every width per example; without one it is the plain network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ArchConfig, BlockConfig
from .errors import ContractError, DimensionError

LN_EPS = 1e-6
INIT_STD = 0.02

Params = Dict[str, Tensor]


@dataclass
class TokenSequence:
    cls: Tensor  # [B, 1, d]
    patches: Tensor  # [B, N, d]
    grid_side: int

    @property
    def dim(self) -> int:
        return self.patches.shape[-1]

    def joined(self) -> Tensor:
        return ad.concat([self.cls, self.patches], axis=1)

    @classmethod
    def split(cls, x: Tensor, grid_side: int) -> "TokenSequence":
        return cls(x[:, :1], x[:, 1:], grid_side)


# --- parameters ----------------------------------------------------------------


def _param_shapes(arch: ArchConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init kind) for every learnable tensor, in a fixed order."""
    c = arch.stem_channels
    d1 = arch.stages[0].embed_dim
    out = [
        ("stem.conv1.weight", (c, 3, 3, 3), "conv"),
        ("stem.conv1.bias", (c,), "zeros"),
        ("stem.conv2.weight", (c, c, 3, 3), "conv"),
        ("stem.conv2.bias", (c,), "zeros"),
        ("stem.conv3.weight", (c, c, 3, 3), "conv"),
        ("stem.conv3.bias", (c,), "zeros"),
        ("patch_embed.weight", (d1, c, 7, 7), "conv"),
        ("patch_embed.bias", (d1,), "zeros"),
        ("cls_token", (1, 1, d1), "normal"),
    ]
    prev = None
    for s, (stage, seq_len) in enumerate(zip(arch.stages, arch.seq_lengths)):
        d = stage.embed_dim
        p = f"stages.{s}"
        if prev is not None:
            out += [
                (f"{p}.rsr.norm.gamma", (prev,), "ones"),
                (f"{p}.rsr.norm.beta", (prev,), "zeros"),
                (f"{p}.rsr.conv.weight", (d, prev, 3, 3), "conv"),
                (f"{p}.rsr.conv.bias", (d,), "zeros"),
                (f"{p}.rsr.cls_norm.gamma", (prev,), "ones"),
                (f"{p}.rsr.cls_norm.beta", (prev,), "zeros"),
                (f"{p}.rsr.cls_linear.weight", (prev, d), "normal"),
                (f"{p}.rsr.cls_linear.bias", (d,), "zeros"),
            ]
        out.append((f"{p}.pos_embed", (1, seq_len, d), "normal"))
        for b, blk in enumerate(stage.blocks):
            q = f"{p}.blocks.{b}"
            a, f = blk.attn_dim, blk.hidden
            out += [
                (f"{q}.norm1.gamma", (d,), "ones"),
                (f"{q}.norm1.beta", (d,), "zeros"),
                (f"{q}.attn.q.weight", (d, a), "normal"),
                (f"{q}.attn.q.bias", (a,), "zeros"),
                (f"{q}.attn.k.weight", (d, a), "normal"),
                (f"{q}.attn.k.bias", (a,), "zeros"),
                (f"{q}.attn.v.weight", (d, a), "normal"),
                (f"{q}.attn.v.bias", (a,), "zeros"),
                (f"{q}.attn.proj.weight", (a, d), "normal"),
                (f"{q}.attn.proj.bias", (d,), "zeros"),
                (f"{q}.norm2.gamma", (d,), "ones"),
                (f"{q}.norm2.beta", (d,), "zeros"),
                (f"{q}.ffn.fc1.weight", (d, f), "normal"),
                (f"{q}.ffn.fc1.bias", (f,), "zeros"),
                (f"{q}.ffn.fc2.weight", (f, d), "normal"),
                (f"{q}.ffn.fc2.bias", (d,), "zeros"),
            ]
        prev = d
    k = arch.num_classes
    out += [
        ("norm.gamma", (prev,), "ones"),
        ("norm.beta", (prev,), "zeros"),
        ("head.weight", (prev, k), "normal"),
        ("head.bias", (k,), "zeros"),
        ("token_head.weight", (prev, k), "normal"),
        ("token_head.bias", (k,), "zeros"),
    ]
    return out


def init_params(arch: ArchConfig, seed: int | np.random.Generator = 0) -> Params:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = ad.default_dtype()
    params: Params = {}
    for name, shape, kind in _param_shapes(arch):
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def param_count(params: Params) -> int:
    return sum(t.size for t in params.values())


def check_params(arch: ArchConfig, params: Params) -> None:
    expected = {n: s for n, s, _ in _param_shapes(arch)}
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DimensionError(f"parameter names differ from architecture (missing={missing[:3]}, extra={extra[:3]})")
    for n, s in expected.items():
        if params[n].shape != s:
            raise DimensionError(f"{n} has shape {params[n].shape}, expected {s}")


# --- masking helpers (no-ops without a mask set) ------------------------------


def _apply(x: Tensor, mask) -> Tensor:
    return x if mask is None else ad.mul(x, mask)


def _ln(x: Tensor, params: Params, prefix: str, active=None) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], LN_EPS, active=active)


def _lin(x: Tensor, params: Params, prefix: str) -> Tensor:
    return ad.linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Zero a residual branch per example with probability ``rate`` and
    rescale survivors by 1/(1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"drop path rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("drop path in training mode needs an rng")
    keep = rng.random(x.shape[0]) >= rate
    scale = keep.astype(x.dtype) / (1.0 - rate)
    return ad.mul(x, scale.reshape((-1,) + (1,) * (x.ndim - 1)))


# --- building blocks ----------------------------------------------------------


def stem_tokenize(images: Tensor, arch: ArchConfig, params: Params, masks=None) -> TokenSequence:
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected [B, 3, H, W] images, got {images.shape}")
    r = arch.input_resolution
    if images.shape[2] != r or images.shape[3] != r:
        raise DimensionError(f"image is {images.shape[2]}x{images.shape[3]}, architecture expects {r}x{r}")
    p = params
    y1 = ad.gelu(ad.conv2d(images, p["stem.conv1.weight"], p["stem.conv1.bias"], stride=2, padding=1))
    y2 = ad.gelu(ad.conv2d(y1, p["stem.conv2.weight"], p["stem.conv2.bias"], stride=1, padding=1))
    y3 = ad.gelu(ad.conv2d(y2, p["stem.conv3.weight"], p["stem.conv3.bias"], stride=1, padding=1))
    y = ad.add(y3, y1)
    tok = ad.conv2d(y, p["patch_embed.weight"], p["patch_embed.bias"], stride=7, padding=0)
    g = tok.shape[-1]
    patches = ad.grid_to_seq(tok)
    bsz, d = images.shape[0], patches.shape[-1]
    cls = ad.add(np.zeros((bsz, 1, d), dtype=patches.dtype), p["cls_token"])
    x = ad.add(ad.concat([cls, patches], axis=1), p["stages.0.pos_embed"])
    x = _apply(x, None if masks is None else masks.embed_mask(0))
    return TokenSequence.split(x, g)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, a = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, a // heads)), (0, 2, 1, 3))


def attention(x: Tensor, params: Params, prefix: str, block: BlockConfig, attn_mask=None, trace=None) -> Tensor:
    """Multi-head scaled dot-product self-attention over a [B, T, d] sequence."""
    if params[f"{prefix}.q.weight"].shape[0] != x.shape[-1]:
        raise DimensionError(f"{prefix}: input dim {x.shape[-1]} != {params[f'{prefix}.q.weight'].shape[0]}")
    q = _apply(_lin(x, params, f"{prefix}.q"), attn_mask)
    k = _apply(_lin(x, params, f"{prefix}.k"), attn_mask)
    v = _apply(_lin(x, params, f"{prefix}.v"), attn_mask)
    qh, kh, vh = (_split_heads(t, block.heads) for t in (q, k, v))
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(block.head_dim))
    probs = ad.softmax(scores)
    if trace is not None:
        trace.append({"site": prefix, "kind": "attn", "probs": probs.data})
    out = ad.matmul(probs, vh)
    b, h, t, dh = out.shape
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, h * dh))
    return _lin(out, params, f"{prefix}.proj")


def mhsa_forward(seq: TokenSequence, block: BlockConfig, params: Params, prefix: str) -> TokenSequence:
    out = attention(seq.joined(), params, f"{prefix}.attn", block)
    return TokenSequence.split(out, seq.grid_side)


def ffn(x: Tensor, params: Params, prefix: str, hidden_mask=None) -> Tensor:
    h = ad.gelu(_apply(_lin(x, params, f"{prefix}.fc1"), hidden_mask))
    return _lin(h, params, f"{prefix}.fc2")


def ffn_forward(seq: TokenSequence, params: Params, prefix: str) -> TokenSequence:
    return TokenSequence.split(ffn(seq.joined(), params, f"{prefix}.ffn"), seq.grid_side)


def block(
    x: Tensor,
    params: Params,
    prefix: str,
    cfg: BlockConfig,
    *,
    drop_path_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    masks=None,
    stage: int = 0,
    index: int = 0,
    trace=None,
) -> Tensor:
    """Pre-norm transformer block on a joined [B, T, d] sequence."""
    if masks is None:
        active = emask = amask = hmask = keep = None
    else:
        active = masks.embed_active(stage)
        emask = masks.embed_mask(stage)
        amask = masks.attn_mask(stage, index)
        hmask = masks.hidden_mask(stage, index)
        keep = masks.keep_mask(stage, index)
    a = attention(_ln(x, params, f"{prefix}.norm1", active), params, f"{prefix}.attn", cfg, amask, trace)
    a = drop_path(_apply(_apply(a, emask), keep), drop_path_rate, training, rng)
    x = ad.add(x, a)
    f = ffn(_ln(x, params, f"{prefix}.norm2", active), params, f"{prefix}.ffn", hmask)
    f = drop_path(_apply(_apply(f, emask), keep), drop_path_rate, training, rng)
    return ad.add(x, f)


def block_forward(
    seq: TokenSequence,
    cfg: BlockConfig,
    params: Params,
    prefix: str,
    drop_path_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> TokenSequence:
    out = block(seq.joined(), params, prefix, cfg, drop_path_rate=drop_path_rate, training=training, rng=rng)
    return TokenSequence.split(out, seq.grid_side)


def rsr(x: Tensor, grid_side: int, params: Params, stage: int, masks=None) -> tuple[Tensor, int]:
    """Residual spatial reduction from stage ``stage - 1`` into ``stage``.

    Residual branch: LN, 3x3 stride-2 conv on the patch grid, new position
    embeddings; LN and a linear layer for the cls token.  Main branch: 2x2
    average pooling plus zero channel padding.  The output is their sum.
    """
    if grid_side % 2:
        raise DimensionError(f"cannot halve odd grid side {grid_side}")
    p = f"stages.{stage}.rsr"
    d_out = params[f"{p}.conv.weight"].shape[0]
    if masks is None:
        act_in = emask_out = None
    else:
        act_in = masks.embed_active(stage - 1)
        emask_out = masks.embed_mask(stage)
    cls, patches = x[:, :1], x[:, 1:]

    res_p = ad.seq_to_grid(_ln(patches, params, f"{p}.norm", act_in))
    res_p = ad.grid_to_seq(ad.conv2d(res_p, params[f"{p}.conv.weight"], params[f"{p}.conv.bias"], stride=2, padding=1))
    res_c = _lin(_ln(cls, params, f"{p}.cls_norm", act_in), params, f"{p}.cls_linear")
    res = ad.add(ad.concat([res_c, res_p], axis=1), params[f"stages.{stage}.pos_embed"])
    res = _apply(res, emask_out)

    main_p = ad.grid_to_seq(ad.avg_pool2d(ad.seq_to_grid(patches)))
    main = ad.zero_pad_channels(ad.concat([cls, main_p], axis=1), d_out)
    return ad.add(main, res), grid_side // 2


def rsr_forward(seq: TokenSequence, params: Params, stage: int) -> TokenSequence:
    out, g = rsr(seq.joined(), seq.grid_side, params, stage)
    return TokenSequence.split(out, g)


def forward(
    params: Params,
    arch: ArchConfig,
    images,
    *,
    training: bool = False,
    drop_path_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    masks=None,
    trace: list | None = None,
) -> tuple[Tensor, Tensor]:
    """Full network.  Returns (cls_logits [B, classes], token_logits [B, K, classes])."""
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=ad.default_dtype()))
    seq = stem_tokenize(images, arch, params, masks)
    x, g = seq.joined(), seq.grid_side
    for s, stage in enumerate(arch.stages):
        if s > 0:
            x, g = rsr(x, g, params, s, masks)
        if trace is not None:
            trace.append({"site": f"stage{s + 1}", "kind": "tokens", "seq_len": x.shape[1], "dim": x.shape[2]})
        for b, blk in enumerate(stage.blocks):
            x = block(
                x, params, f"stages.{s}.blocks.{b}", blk,
                drop_path_rate=drop_path_rate, training=training, rng=rng,
                masks=masks, stage=s, index=b, trace=trace,
            )
    last = len(arch.stages) - 1
    x = _ln(x, params, "norm", None if masks is None else masks.embed_active(last))
    cls_logits = _lin(ad.reshape(x[:, :1], (x.shape[0], x.shape[2])), params, "head")
    token_logits = _lin(x[:, 1:], params, "token_head")
    return cls_logits, token_logits


@dataclass
class ViTRes:
    """An architecture bound to its parameters."""

    arch: ArchConfig
    params: Params

    @classmethod
    def build(cls, arch: ArchConfig, seed: int = 0) -> "ViTRes":
        return cls(arch, init_params(arch, seed))

    def __call__(self, images, training: bool = False, drop_path_rate: float = 0.0, rng=None, trace=None):
        return forward(self.params, self.arch, images, training=training, drop_path_rate=drop_path_rate, rng=rng, trace=trace)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    @property
    def num_params(self) -> int:
        return param_count(self.params)
