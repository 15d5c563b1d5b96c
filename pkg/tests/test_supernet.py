import numpy as np
import pytest

from vitresnas import autodiff as ad
from vitresnas.errors import ContractError
from vitresnas.model import init_params
from vitresnas.space import decode, encode, max_choice, toy_space
from vitresnas.supernet import (
    MaskSet,
    SuperNet,
    choice_from_masks,
    extract_subnet,
    masked_layer_norm,
    masks_from_choice,
    sample_choice,
    supernet_forward_multi,
    warmup_bounds,
)


@pytest.fixture(scope="module")
def space():
    return toy_space()


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


class TestMaskedLayerNorm:
    def test_matches_plain_on_prefix(self, rng, f64):
        for _ in range(50):
            c = int(rng.integers(2, 20))
            a = int(rng.integers(1, c + 1))
            x = np.zeros((1, c))
            x[0, :a] = rng.normal(size=a) * rng.uniform(0.1, 10)
            g, b = rng.normal(size=c), rng.normal(size=c)
            out = masked_layer_norm(ad.tensor(x), np.array([a]), ad.tensor(g), ad.tensor(b)).data
            ref = ad.layer_norm(ad.tensor(x[:, :a]), ad.tensor(g[:a]), ad.tensor(b[:a])).data
            np.testing.assert_allclose(out[:, :a], ref, rtol=1e-10, atol=1e-12)
            assert np.all(out[:, a:] == 0.0)

    def test_per_row_widths(self, rng, f64):
        x = rng.normal(size=(2, 6))
        x[0, 2:] = 0
        out = masked_layer_norm(ad.tensor(x), np.array([2, 6]), ad.tensor(np.ones(6)), ad.tensor(np.ones(6))).data
        assert np.all(out[0, 2:] == 0) and np.all(out[1] != 0)

    def test_width_bounds(self):
        x = ad.tensor(np.zeros((1, 4)))
        with pytest.raises(ContractError):
            masked_layer_norm(x, np.array([0]), ad.tensor(np.ones(4)), ad.tensor(np.zeros(4)))
        with pytest.raises(ContractError):
            masked_layer_norm(x, np.array([5]), ad.tensor(np.ones(4)), ad.tensor(np.zeros(4)))


class TestMasks:
    def test_choice_roundtrip(self, space, rng):
        for _ in range(50):
            c = sample_choice(space, rng)
            assert choice_from_masks(masks_from_choice(c, space), 0, space) == c

    def test_stack_assigns_sub_batches(self, space, rng):
        cs = [sample_choice(space, rng) for _ in range(3)]
        m = MaskSet.stack([masks_from_choice(c, space) for c in cs], repeats=2)
        assert m.batch == 6
        assert [choice_from_masks(m, i, space) for i in range(6)] == [cs[0], cs[0], cs[1], cs[1], cs[2], cs[2]]

    def test_prefix_masks(self, space):
        c = decode((2,) + (0,) * (space.gene_length - 1), space)
        m = masks_from_choice(c, space)
        np.testing.assert_array_equal(m.embed_mask(0)[0, 0], [1.0] * 8 + [0.0] * 8)


class TestEquivalence:
    def test_masked_equals_extracted(self, space, f64):
        params = init_params(space.supernet_arch(), 1)
        rng = np.random.default_rng(2)
        x = rng.random((2, 3, 56, 56))
        for _ in range(10):
            c = sample_choice(space, rng)
            cls_m, tok_m = supernet_forward_multi(params, space, x, [c, c])
            arch, sub = extract_subnet(params, space, c)
            from vitresnas.model import forward

            cls_s, tok_s = forward(sub, arch, x)
            assert max_rel_err(cls_m.data, cls_s.data) <= 1e-10
            assert max_rel_err(tok_m.data, tok_s.data) <= 1e-10

    def test_mixed_batch_rows_match_single_choice_runs(self, space, rng, f64):
        net = SuperNet.build(space, 4)
        cs = [sample_choice(space, rng) for _ in range(3)]
        x = rng.random((3, 3, 56, 56))
        together = net(x, cs)[0].data
        for i, c in enumerate(cs):
            alone = net(x[i : i + 1], [c])[0].data
            np.testing.assert_allclose(together[i : i + 1], alone, rtol=1e-10)

    def test_max_choice_equals_plain_supernet(self, space, rng, f64):
        params = init_params(space.supernet_arch(), 0)
        from vitresnas.model import forward

        x = rng.random((1, 3, 56, 56))
        a = supernet_forward_multi(params, space, x, [max_choice(space)])[0].data
        b = forward(params, space.supernet_arch(), x)[0].data
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_batch_must_divide(self, space, rng):
        net = SuperNet.build(space, 0)
        cs = [sample_choice(space, rng) for _ in range(2)]
        with pytest.raises(ContractError):
            net(rng.random((3, 3, 56, 56)), cs)

    def test_extract_copies(self, space):
        net = SuperNet.build(space, 0)
        sub = net.extract(max_choice(space))
        sub.params["head.bias"].data += 1.0
        assert np.all(net.params["head.bias"].data == 0)


class TestGradientCoverage:
    def test_untouched_slices_get_zero_gradient(self, space, rng):
        net = SuperNet.build(space, 0)
        small = decode(tuple(len(o) - 1 for o in space.gene_options()), space)
        cs = [small, small]
        cls, tok = net(rng.random((2, 3, 56, 56)).astype(np.float32), cs)
        ad.backward(ad.add(ad.tsum(cls), ad.tsum(tok)))
        e0 = small.embed[0]
        w = net.params["stages.0.blocks.0.ffn.fc1.weight"].grad
        assert np.all(w[e0:] == 0) and np.all(w[:, small.hidden[0][0]:] == 0)
        assert np.any(w[:e0, : small.hidden[0][0]] != 0)
        # slot 1 of stage 1 is skipped by this choice
        assert not np.any(net.params["stages.0.blocks.1.ffn.fc1.weight"].grad)
        assert np.all(net.params["patch_embed.weight"].grad[e0:] == 0)


class TestSampling:
    def test_bounds_restrict_draws(self, space, rng):
        bounds = tuple(1 for _ in space.gene_options())
        for _ in range(5):
            assert sample_choice(space, rng, bounds) == max_choice(space)

    def test_uniform_positions(self, space):
        rng = np.random.default_rng(0)
        counts = np.zeros(3)
        n = 6000
        for _ in range(n):
            counts[encode(sample_choice(space, rng), space)[0]] += 1
        # chi-square with 2 dof, 99.9% quantile 13.8
        exp = n / 3
        assert np.sum((counts - exp) ** 2 / exp) < 13.8

    def test_warmup_schedule(self, space):
        full = tuple(len(o) for o in space.gene_options())
        assert warmup_bounds(0.0, space) == tuple(1 for _ in full)
        assert warmup_bounds(0.25, space) == full
        assert warmup_bounds(0.9, space) == full
        mid = warmup_bounds(0.125, space)
        assert all(1 <= m <= f for m, f in zip(mid, full))
        assert mid == tuple(1 + (f - 1) // 2 for f in full)

    def test_warmup_monotone(self, space):
        prev = warmup_bounds(0.0, space)
        for frac in np.linspace(0, 0.3, 31):
            cur = warmup_bounds(float(frac), space)
            assert all(c >= p for c, p in zip(cur, prev))
            prev = cur

    def test_bad_bounds(self, space, rng):
        with pytest.raises(ContractError):
            sample_choice(space, rng, (0,) * space.gene_length)
