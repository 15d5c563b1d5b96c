"""Differentiable-op cases shared by the autodiff tests and the acceptance suite.

Each builder takes a seeded rng and returns ``(f, inputs)`` where ``f()``
is a scalar built from leaf tensors in ``inputs``.  Outputs are contracted
with fixed random weights so no gradient is trivially uniform.
"""

import numpy as np

from vitresnas import autodiff as ad
from vitresnas.config import ArchConfig, BlockConfig, StageConfig
from vitresnas.model import drop_path, init_params, forward
from vitresnas.supernet import masked_layer_norm
from vitresnas.train import soft_cross_entropy


def leaf(rng, *shape, scale=1.0):
    return ad.tensor(rng.normal(size=shape) * scale, requires_grad=True)


def contract(out, rng):
    w = rng.normal(size=out.shape)
    return lambda y: ad.tsum(ad.mul(y, w))


def _case(op, *inputs, rng):
    probe = op(*inputs)
    c = contract(probe, rng)
    ad.get_tape().clear()
    return (lambda: c(op(*inputs))), list(inputs)


def add_broadcast(rng):
    return _case(ad.add, leaf(rng, 3, 4), leaf(rng, 4), rng=rng)


def neg(rng):
    return _case(ad.neg, leaf(rng, 5), rng=rng)


def mul(rng):
    return _case(ad.mul, leaf(rng, 2, 3), leaf(rng, 2, 1), rng=rng)


def gelu(rng):
    return _case(ad.gelu, leaf(rng, 4, 5, scale=2.0), rng=rng)


def reshape_transpose(rng):
    return _case(lambda x: ad.transpose(ad.reshape(x, (3, 2, 4)), (2, 0, 1)), leaf(rng, 6, 4), rng=rng)


def index_advanced(rng):
    return _case(lambda x: ad.index(x, (slice(None), [0, 2, 2])), leaf(rng, 3, 4), rng=rng)


def concat(rng):
    return _case(lambda a, b: ad.concat([a, b], axis=1), leaf(rng, 2, 3), leaf(rng, 2, 2), rng=rng)


def pad_and_slice(rng):
    return _case(lambda x: ad.slice_channels(ad.zero_pad_channels(x, 7), 6), leaf(rng, 2, 5), rng=rng)


def grid_roundtrip(rng):
    return _case(lambda x: ad.grid_to_seq(ad.gelu(ad.seq_to_grid(x))), leaf(rng, 2, 9, 3), rng=rng)


def tsum_mean(rng):
    return _case(lambda x: ad.mul(ad.tsum(x, axis=1), ad.mean(x, axis=1)), leaf(rng, 3, 4), rng=rng)


def matmul_batched(rng):
    return _case(ad.matmul, leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 5), rng=rng)


def linear(rng):
    return _case(ad.linear, leaf(rng, 2, 3, 4), leaf(rng, 4, 5), leaf(rng, 5), rng=rng)


def softmax(rng):
    return _case(ad.softmax, leaf(rng, 3, 6, scale=2.0), rng=rng)


def log_softmax(rng):
    return _case(ad.log_softmax, leaf(rng, 3, 6, scale=2.0), rng=rng)


def layer_norm(rng):
    return _case(lambda x, g, b: ad.layer_norm(x, g, b), leaf(rng, 2, 3, 8), leaf(rng, 8), leaf(rng, 8), rng=rng)


def masked_ln(rng):
    active = np.array([3, 8])
    x = leaf(rng, 2, 8)
    mask = (np.arange(8)[None, :] < active[:, None]).astype(float)
    return _case(
        lambda x, g, b: masked_layer_norm(ad.mul(x, mask), active, g, b),
        x, leaf(rng, 8), leaf(rng, 8), rng=rng,
    )


def conv_stride1_pad(rng):
    return _case(lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1), leaf(rng, 2, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3), rng=rng)


def conv_stride2(rng):
    return _case(lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1), leaf(rng, 1, 2, 6, 6), leaf(rng, 2, 2, 3, 3), leaf(rng, 2), rng=rng)


def conv_patch(rng):
    return _case(lambda x, w: ad.conv2d(x, w, None, stride=7), leaf(rng, 1, 2, 14, 14), leaf(rng, 3, 2, 7, 7), rng=rng)


def avg_pool(rng):
    return _case(ad.avg_pool2d, leaf(rng, 2, 3, 4, 4), rng=rng)


def drop_path_fixed(rng):
    seed = int(rng.integers(1 << 30))
    return _case(lambda x: drop_path(x, 0.4, True, np.random.default_rng(seed)), leaf(rng, 6, 3), rng=rng)


def soft_ce(rng):
    t = rng.random((3, 5))
    t /= t.sum(1, keepdims=True)
    return _case(lambda x: soft_cross_entropy(x, t), leaf(rng, 3, 5), rng=rng)


OP_CASES = {
    f.__name__: f
    for f in (
        add_broadcast, neg, mul, gelu, reshape_transpose, index_advanced, concat, pad_and_slice,
        grid_roundtrip, tsum_mean, matmul_batched, linear, softmax, log_softmax, layer_norm,
        masked_ln, conv_stride1_pad, conv_stride2, conv_patch, avg_pool, drop_path_fixed, soft_ce,
    )
}


def two_block_arch() -> ArchConfig:
    """Smallest full ViT-Res with exactly two transformer blocks."""
    return ArchConfig(
        2,
        (StageConfig(4, (BlockConfig(2, 2, 8),)), StageConfig(6, (BlockConfig(2, 3, 8),)), StageConfig(8, ())),
        num_classes=3,
        input_resolution=56,
    )


def two_block_model(rng):
    arch = two_block_arch()
    params = init_params(arch, int(rng.integers(1 << 30)))
    for t in params.values():
        t.data = t.data.astype(ad.default_dtype())
    x = rng.random((2, 3, 56, 56))
    w1, w2 = rng.normal(size=(2, 3)), rng.normal(size=(2, arch.num_token_labels, 3))

    def f():
        c, t = forward(params, arch, x)
        return ad.add(ad.tsum(ad.mul(c, w1)), ad.tsum(ad.mul(t, w2)))

    return f, list(params.values())
