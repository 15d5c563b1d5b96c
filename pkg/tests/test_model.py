import math

import numpy as np
import pytest

from vitresnas import autodiff as ad
from vitresnas.config import (
    ARCH_FIXTURES,
    ArchConfig,
    BlockConfig,
    StageConfig,
    resolve_arch,
    toy_config,
    vit_res_tiny_config,
)
from vitresnas.errors import ContractError, DimensionError
from vitresnas.model import ViTRes, _param_shapes, attention, drop_path, forward, init_params, rsr
from vitresnas.search import count_params, estimate_macs


@pytest.fixture(scope="module")
def toy():
    return ViTRes.build(toy_config(), seed=3)


def images(rng, n, res):
    return rng.random((n, 3, res, res)).astype(np.float32)


class TestArchConfig:
    def test_json_roundtrip(self):
        cfg = toy_config()
        assert ArchConfig.from_json(cfg.to_json()) == cfg

    @pytest.mark.parametrize("res", [50, 42, 0])
    def test_bad_resolution(self, res):
        with pytest.raises(ContractError):
            toy_config(input_resolution=res)

    def test_embed_dims_must_increase(self):
        with pytest.raises(ContractError):
            toy_config(dims=(16, 16, 32))

    def test_stage_count(self):
        with pytest.raises(ContractError):
            ArchConfig(4, (StageConfig(8, ()), StageConfig(16, ())))

    def test_grid_ladder(self):
        cfg = vit_res_tiny_config()
        assert cfg.grids == (16, 8, 4)
        assert cfg.seq_lengths == (257, 65, 17)
        assert cfg.num_token_labels == 16

    def test_resolve_arch(self, tmp_path):
        assert resolve_arch("vit-res-tiny") == vit_res_tiny_config()
        p = tmp_path / "a.json"
        p.write_text(toy_config().to_json())
        assert resolve_arch(str(p)) == toy_config()
        p.write_text("{not json")
        with pytest.raises(ContractError):
            resolve_arch(str(p))
        with pytest.raises(ContractError):
            resolve_arch("no-such-arch")


class TestParameters:
    @pytest.mark.parametrize("name", sorted(ARCH_FIXTURES))
    def test_shapes_match_closed_form_count(self, name):
        cfg = ARCH_FIXTURES[name]()
        assert sum(math.prod(s) for _, s, _ in _param_shapes(cfg)) == count_params(cfg)

    def test_init_is_seeded(self):
        a, b = init_params(toy_config(), 5), init_params(toy_config(), 5)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)


class TestForward:
    def test_output_shapes_and_trace(self, toy, rng):
        trace = []
        cls, tok = toy(images(rng, 2, 56), trace=trace)
        assert cls.shape == (2, 10)
        assert tok.shape == (2, toy.arch.num_token_labels, 10)
        seq = [t["seq_len"] for t in trace if t["kind"] == "tokens"]
        assert seq == list(toy.arch.seq_lengths)

    def test_wrong_image_size(self, toy, rng):
        with pytest.raises(DimensionError):
            toy(images(rng, 1, 70))

    def test_mac_count_matches_cost_model(self, toy, rng):
        with ad.no_grad(), ad.count_macs() as c:
            toy(images(rng, 1, 56))
        assert c.macs == estimate_macs(toy.arch)

    def test_examples_are_independent(self, toy, rng):
        x = images(rng, 3, 56)
        with ad.no_grad():
            full = toy(x)[0].data
            single = toy(x[1:2])[0].data
        np.testing.assert_allclose(full[1:2], single, rtol=1e-5, atol=1e-6)

    def test_attention_matches_per_head_loop(self, rng, f64):
        cfg = BlockConfig(heads=3, head_dim=4, hidden=8)
        d, a = 10, cfg.attn_dim
        params = {}
        for n in "qkv":
            params[f"at.{n}.weight"] = ad.tensor(rng.normal(size=(d, a)))
            params[f"at.{n}.bias"] = ad.tensor(rng.normal(size=a))
        params["at.proj.weight"] = ad.tensor(rng.normal(size=(a, d)))
        params["at.proj.bias"] = ad.tensor(rng.normal(size=d))
        x = rng.normal(size=(2, 5, d))
        out = attention(ad.tensor(x), params, "at", cfg).data
        p = {k: v.data for k, v in params.items()}
        q, k, v = (x @ p[f"at.{n}.weight"] + p[f"at.{n}.bias"] for n in "qkv")
        heads = []
        for h in range(3):
            sl = slice(4 * h, 4 * h + 4)
            s = q[..., sl] @ np.swapaxes(k[..., sl], 1, 2) / 2.0
            s = np.exp(s - s.max(-1, keepdims=True))
            heads.append((s / s.sum(-1, keepdims=True)) @ v[..., sl])
        ref = np.concatenate(heads, -1) @ p["at.proj.weight"] + p["at.proj.bias"]
        np.testing.assert_allclose(out, ref, rtol=1e-10)

    def test_rsr_main_branch_without_residual(self, rng, f64):
        arch = toy_config()
        params = init_params(arch, 0)
        for name in ("conv.weight", "conv.bias", "cls_linear.weight", "cls_linear.bias"):
            params[f"stages.1.rsr.{name}"].data[...] = 0.0
        params["stages.1.pos_embed"].data[...] = 0.0
        x = rng.normal(size=(1, 1 + 16, 16))
        out, g = rsr(ad.tensor(x), 4, params, 1)
        assert g == 2 and out.shape == (1, 5, 32)
        np.testing.assert_allclose(out.data[0, 0, :16], x[0, 0])
        grid = x[0, 1:].reshape(4, 4, 16)
        np.testing.assert_allclose(out.data[0, 1, :16], grid[0:2, 0:2].mean((0, 1)))
        np.testing.assert_allclose(out.data[0, 2, :16], grid[0:2, 2:4].mean((0, 1)))
        assert np.all(out.data[..., 16:] == 0)

    def test_odd_grid_rejected(self, rng):
        params = init_params(toy_config(), 0)
        with pytest.raises(DimensionError):
            rsr(ad.tensor(rng.normal(size=(1, 10, 16))), 3, params, 1)


class TestDropPath:
    def test_identity_outside_training(self, rng):
        x = ad.tensor(rng.normal(size=(4, 3)))
        assert drop_path(x, 0.5, False, None) is x

    def test_rate_bounds(self):
        x = ad.tensor(np.ones((2, 2)))
        with pytest.raises(ContractError):
            drop_path(x, 1.0, True, np.random.default_rng(0))

    def test_expectation_and_drop_fraction(self):
        n, rate = 20000, 0.3
        out = drop_path(ad.tensor(np.ones((n, 2))), rate, True, np.random.default_rng(0)).data
        dropped = np.mean(out[:, 0] == 0)
        sigma = math.sqrt(rate * (1 - rate) / n)
        assert abs(dropped - rate) < 4 * sigma
        # survivors are rescaled so the mean is preserved
        assert abs(out.mean() - 1.0) < 4 * sigma / (1 - rate)
        assert np.all(out[out != 0] == pytest.approx(1 / (1 - rate)))

    def test_full_model_dropout_changes_output(self, toy, rng):
        x = images(rng, 2, 56)
        with ad.no_grad():
            a = toy(x)[0].data
            b = toy(x, training=True, drop_path_rate=0.5, rng=np.random.default_rng(1))[0].data
        assert not np.allclose(a, b)


def test_forward_accepts_arrays(rng):
    arch = toy_config()
    params = init_params(arch, 0)
    with ad.no_grad():
        cls, _ = forward(params, arch, images(rng, 1, 56))
    assert cls.dtype == np.float32
