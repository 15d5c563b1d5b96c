import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitresnas.errors import ContractError
from vitresnas.space import (
    SPACE_FIXTURES,
    SearchSpaceDef,
    StageSpace,
    SubNetChoice,
    decode,
    encode,
    max_choice,
    micro_space,
    resnas_tiny_space,
    resolve_space,
    toy_space,
)
from vitresnas.config import vit_resnas_tiny_config


def genes(space):
    return st.tuples(*[st.integers(0, len(o) - 1) for o in space.gene_options()])


class TestGeneCodec:
    @settings(max_examples=200, deadline=None)
    @given(genes(toy_space()))
    def test_roundtrip_toy(self, gene):
        space = toy_space()
        assert encode(decode(gene, space), space) == gene

    @settings(max_examples=100, deadline=None)
    @given(genes(resnas_tiny_space()))
    def test_roundtrip_tiny(self, gene):
        space = resnas_tiny_space()
        choice = decode(gene, space)
        assert encode(choice, space) == gene
        assert SubNetChoice.from_dict(json.loads(json.dumps(choice.to_dict()))) == choice

    def test_layout(self):
        space = resnas_tiny_space()
        # 3 embed positions + per stage 6 slots (3 skippable) x 2 + 3 keep flags
        assert space.gene_length == 3 + 3 * (6 * 2 + 3)
        assert space.gene_options()[:3] == [st.embed_dims for st in space.stages]

    def test_index_zero_is_largest(self):
        space = toy_space()
        arch = max_choice(space).to_arch(space)
        assert arch == space.supernet_arch()

    def test_out_of_range(self):
        space = micro_space()
        with pytest.raises(ContractError):
            decode((2,) + (0,) * (space.gene_length - 1), space)
        with pytest.raises(ContractError):
            decode((0,) * 3, space)

    def test_unskippable_slot(self):
        space = toy_space()
        c = max_choice(space)
        keep = ((False, True),) + c.keep[1:]
        with pytest.raises(ContractError):
            encode(SubNetChoice(c.embed, keep, c.heads, c.hidden), space)

    def test_skipped_slots_drop_from_arch(self):
        space = toy_space()
        c = max_choice(space)
        keep = ((True, False),) + c.keep[1:]
        arch = SubNetChoice(c.embed, keep, c.heads, c.hidden).to_arch(space)
        assert [len(s.blocks) for s in arch.stages] == [1, 2, 2]


class TestSpaces:
    def test_sizes(self):
        assert micro_space().size == 4096
        assert toy_space().size == math.prod(len(o) for o in toy_space().gene_options())

    def test_tiny_space_contains_resnas_tiny(self):
        # every block of the searched Tiny network is an option of the tiny space
        space, arch = resnas_tiny_space(), vit_resnas_tiny_config()
        for st_space, stage in zip(space.stages, arch.stages):
            assert stage.embed_dim in st_space.embed_dims
            assert len(stage.blocks) <= st_space.num_slots
            for b in stage.blocks:
                assert b.heads in st_space.heads and b.hidden in st_space.hiddens

    def test_descending_lists_required(self):
        with pytest.raises(ContractError):
            SearchSpaceDef((StageSpace((8, 16), (1,), (8,), 4, (False,)),) * 3)

    def test_widths_must_increase_across_stages(self):
        a = StageSpace((16, 8), (1,), (8,), 4, (False,))
        b = StageSpace((24, 16), (1,), (8,), 4, (False,))
        c = StageSpace((32,), (1,), (8,), 4, (False,))
        with pytest.raises(ContractError):
            SearchSpaceDef((a, b, c))

    @pytest.mark.parametrize("name", sorted(SPACE_FIXTURES))
    def test_dict_roundtrip(self, name):
        space = SPACE_FIXTURES[name]()
        assert SearchSpaceDef.from_dict(json.loads(json.dumps(space.to_dict()))) == space

    def test_resolve(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps(micro_space().to_dict()))
        assert resolve_space(str(p)) == micro_space()
        with pytest.raises(ContractError):
            resolve_space("nowhere")

    def test_constraint(self):
        assert micro_space().with_constraint(5.0).max_macs == 5.0
        assert np.isinf(micro_space().max_macs)
