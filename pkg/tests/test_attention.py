import math

import numpy as np
import pytest
import torch

from ibimhav import engine
from ibimhav.attention import (
    MLP,
    IBMSA,
    AttentionConfig,
    SwinBlock,
    TransformerBlockPair,
    attention,
)
from ibimhav.config import ConfigError
from ibimhav.layers import init_weights
from ibimhav.profiler import flops_ibmsa, flops_msa
from ibimhav.windowing import WindowConfig, partition_windows
from oracles import naive_shifted_attention


def _randomize(module, seed, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * scale)


class TestAttentionKernel:
    def test_constant_values(self, rng):
        q = torch.from_numpy(rng.normal(size=(2, 5, 3)))
        k = torch.from_numpy(rng.normal(size=(2, 5, 3)))
        v = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64).expand(2, 5, 3)
        bias = torch.from_numpy(rng.normal(size=(5, 5)))
        out = attention(q, k, v, bias)
        assert torch.allclose(out, v, atol=1e-14)

    def test_singleton(self, rng):
        v = torch.from_numpy(rng.normal(size=(1, 1, 4)))
        out = attention(torch.ones(1, 1, 4, dtype=torch.float64), torch.ones(1, 1, 4, dtype=torch.float64), v)
        assert torch.equal(out, v)

    def test_bias_weights(self):
        z = torch.zeros(1, 2, 3, dtype=torch.float64)
        bias = torch.tensor([[0.0, math.log(3.0)], [0.0, 0.0]], dtype=torch.float64)
        _, w = attention(z, z, z, bias, return_weights=True)
        assert w[0, 0].tolist() == pytest.approx([0.25, 0.75], abs=1e-15)

    def test_rows_sum_to_one(self, rng):
        q, k, v = (torch.from_numpy(rng.normal(size=(3, 2, 8, 4)).astype(np.float32)) for _ in range(3))
        _, w = attention(q, k, v, torch.zeros(8, 8), return_weights=True)
        assert (w.sum(-1) - 1).abs().max() < 1e-6


def test_config_validation():
    with pytest.raises(ConfigError):
        AttentionConfig(10, 3)
    with pytest.raises(ConfigError):
        AttentionConfig(8, 2, "learned_everything")


class TestModes:
    def _modules(self):
        out = {}
        for mode in ("absolute_only", "relative_only", "inductive_biased"):
            m = IBMSA(AttentionConfig(8, 2, mode)).double()
            init_weights(m, seed=3)
            out[mode] = m
        return out

    def test_parameter_presence(self):
        m = self._modules()
        assert m["absolute_only"].rel_bias_table is None and m["absolute_only"].abs_pos is not None
        assert m["relative_only"].abs_pos is None and m["relative_only"].rel_bias_table.shape == (343, 2)
        assert m["inductive_biased"].abs_pos.shape == (64, 8)

    def test_degenerate_equivalence(self, rng):
        m = self._modules()
        ref = m["inductive_biased"]
        with torch.no_grad():
            ref.abs_pos.zero_()
            ref.rel_bias_table.zero_()
            m["relative_only"].load_state_dict(
                {k: v for k, v in ref.state_dict().items() if k != "abs_pos"})
        ws = torch.from_numpy(rng.normal(size=(3, 64, 8)))
        a = ref(ws)
        b = m["relative_only"](ws)
        # plain multi-head attention from the same projections
        qkv = (ws @ ref.qkv.weight + ref.qkv.bias).reshape(3, 64, 3, 2, 4).permute(2, 0, 3, 1, 4)
        plain = attention(qkv[0], qkv[1], qkv[2]).transpose(1, 2).reshape(3, 64, 8)
        plain = plain @ ref.proj.weight + ref.proj.bias
        assert torch.equal(a, b)
        assert torch.equal(a, plain)

    def test_single_window_unshifted(self, rng):
        cfg = AttentionConfig(8, 2, "inductive_biased", WindowConfig((4, 4, 4)))
        blk = SwinBlock(cfg, shifted=False).double()
        _randomize(blk, 1)
        x = torch.from_numpy(rng.normal(size=(1, 4, 4, 4, 8)))
        direct = blk.attn(x.reshape(1, 64, 8)).reshape(1, 4, 4, 4, 8)
        assert torch.equal(blk.window_attention(x), direct)

    def test_absolute_embedding_switch(self):
        pair = TransformerBlockPair(AttentionConfig(8, 2), absolute_in=(True, False))
        assert pair.regular.attn.abs_pos is not None and pair.shifted.attn.abs_pos is None


class TestBlocks:
    def test_mlp_zero_weights(self, rng):
        m = MLP(4).double()
        with torch.no_grad():
            for p in m.parameters():
                p.zero_()
        assert torch.all(m(torch.from_numpy(rng.normal(size=(5, 4)))) == 0)

    def test_mlp_hand_weights(self):
        m = MLP(2, ratio=1).double()
        with torch.no_grad():
            m.fc1.weight.copy_(torch.eye(2))
            m.fc1.bias.zero_()
            m.fc2.weight.copy_(torch.tensor([[2.0, 0.0], [0.0, 3.0]]))
            m.fc2.bias.copy_(torch.tensor([1.0, 0.0]))
        x = torch.tensor([[1.0, -1.0]], dtype=torch.float64)
        g = engine.gelu(x)
        expect = torch.stack([2 * g[:, 0] + 1, 3 * g[:, 1]], -1)
        assert torch.allclose(m(x), expect, atol=1e-15)
        assert m(x).shape == x.shape

    def test_zero_output_projections_give_identity(self, rng):
        pair = TransformerBlockPair(AttentionConfig(16, 4)).double()
        _randomize(pair, 2)
        with torch.no_grad():
            for blk in (pair.regular, pair.shifted):
                for lin in (blk.attn.proj, blk.mlp.fc2):
                    lin.weight.zero_()
                    lin.bias.zero_()
        t = torch.from_numpy(rng.normal(size=(1, 8, 8, 8, 16)))
        assert torch.equal(pair(t), t)

    def test_shape_preserved(self, rng):
        pair = TransformerBlockPair(AttentionConfig(16, 4))
        init_weights(pair, 0)
        for grid in ((8, 8, 8), (4, 4, 4), (6, 5, 7)):
            t = torch.from_numpy(rng.normal(size=(2, *grid, 16)).astype(np.float32))
            assert pair(t).shape == t.shape

    def test_padded_grid_matches_region_oracle(self, rng):
        # a 6x5x7 grid is zero-padded to 8x8x8; padded tokens must be invisible
        blk = SwinBlock(AttentionConfig(8, 2), shifted=True).double()
        _randomize(blk, 4)
        x = rng.normal(size=(6, 5, 7, 8))
        got = blk.window_attention(torch.from_numpy(x)[None])[0].detach().numpy()
        P = {n: p.detach().numpy() for n, p in blk.attn.named_parameters()}
        padded = np.zeros((8, 8, 8, 8))
        padded[:6, :5, :7] = x
        expect, _ = naive_shifted_attention(
            padded, (4, 4, 4), (2, 2, 2), 2, P["qkv.weight"], P["qkv.bias"], P["proj.weight"],
            P["proj.bias"], P["abs_pos"], P["rel_bias_table"], valid=(6, 5, 7))
        assert np.abs(got - expect[:6, :5, :7]).max() < 1e-10

    def test_pair_grad_check(self):
        prev = torch.get_default_dtype()
        torch.set_default_dtype(torch.float64)
        try:
            pair = TransformerBlockPair(AttentionConfig(4, 2, window=WindowConfig((2, 2, 2))),
                                        mlp_ratio=2)
            _randomize(pair, 5, scale=0.5)
            g = torch.Generator().manual_seed(6)
            x = torch.randn(1, 4, 4, 4, 4, generator=g)
            r = torch.randn(1, 4, 4, 4, 4, generator=g)
            params = [x] + list(pair.parameters())
            err = engine.grad_check(lambda: (pair(x) * r).sum(), params)
        finally:
            torch.set_default_dtype(prev)
        assert err < 1e-4


def test_mac_tally_matches_cost_formulas(rng):
    h, w, d, C = 8, 8, 4, 16
    cfg = AttentionConfig(C, 4, "inductive_biased")
    msa = IBMSA(cfg)
    init_weights(msa, 0)
    t = torch.from_numpy(rng.normal(size=(1, h, w, d, C)).astype(np.float32))
    with engine.count_macs() as macs:
        msa(partition_windows(t, cfg.window))
    assert macs[0] == flops_ibmsa(h, w, d, C, 4, 4, 4)
    # a single window spanning the whole grid is global attention
    glob = IBMSA(AttentionConfig(C, 4, "absolute_only", WindowConfig((h, w, d))))
    init_weights(glob, 0)
    with engine.count_macs() as macs:
        glob(t.reshape(1, -1, C))
    assert macs[0] == flops_msa(h, w, d, C)
