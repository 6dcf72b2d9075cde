import numpy as np
import torch
import torch.nn.functional as F

from samora import Level
from samora.errors import ConfigError, DimensionError
from samora.fusion import (
    FusionConfig, FusionOrder, CrossAttention, cross_attend, HlAttnBlock, hl_attn_fuse,
    block_output, LacFusion, GatedFusion, SingleExpertFusion, ComposeFusion,
    lac_fuse, gated_mixture_fuse, weight_compose, search_coefficients, build_fusion
)
from samora.models.encoder import FrozenEncoder, forward_frozen_block
from samora.models.lora import inject_lora, forward_merged_block, expert_deltas
import samora.util.test as smtu
from samora.util.test import central_fd_check

from pytest import raises, mark, approx


def _attend(q, k, v, heads):
    "Brute-force multi-head attention on unbatched [L, d] inputs."
    d = q.shape[-1]
    dk = d // heads
    out = []
    for j in range(heads):
        s = slice(j * dk, (j + 1) * dk)
        w = torch.softmax(q[:, s] @ k[:, s].T / np.sqrt(dk), -1)
        out.append(w @ v[:, s])
    return torch.cat(out, -1)


def _cross_oracle(p, qf, kvf):
    ctx = _attend(p.W_q(qf), p.W_k(kvf), p.W_v(kvf), p.heads)
    return p.norm(qf + p.out_proj(ctx))


def _randomize_out(module):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, CrossAttention):
                m.out_proj.weight.normal_(0, 0.2)
                m.out_proj.bias.normal_(0, 0.1)
        if isinstance(module, HlAttnBlock):
            module.out_proj.weight.normal_(0, 0.2)


@mark.parametrize('code,expected', [
    ('211', (('patch', 'pixel'), ('image', 'intermediate'))),
    ('112', (('image', 'patch'), ('intermediate', 'pixel'))),
    ('121', (('image', 'pixel'), ('intermediate', 'patch'))),
])
def test_order_pairings(code, expected):
    order = FusionOrder(code)
    assert order.pairings() == expected
    assert str(order) == code


@mark.parametrize('code', ['111', '222', '212x', 'abc', ''])
def test_order_invalid(code):
    with raises(ConfigError):
        FusionOrder(code)


def test_order_stages():
    order = FusionOrder('211')
    assert order.stage2 == Level.IMAGE
    assert order.stage1 == (Level.PATCH, Level.PIXEL)
    assert order.intermediate_level == Level.PATCH


def test_cross_fresh_is_layernorm():
    p = CrossAttention(8, 2)
    q = torch.randn(5, 8)
    kv = torch.randn(5, 8)
    assert torch.allclose(cross_attend(p, q, kv), F.layer_norm(q, (8,), eps=p.norm.eps),
                          atol=1e-5)


def test_cross_fresh_no_norm_identity():
    p = CrossAttention(8, 2, norm=False)
    q = torch.randn(2, 5, 8)
    assert torch.equal(cross_attend(p, q, torch.randn(2, 5, 8)), q)


@mark.parametrize('norm', [True, False])
def test_cross_oracle(norm):
    torch.manual_seed(3)
    for _ in range(20):
        p = CrossAttention(8, 2, norm).double()
        _randomize_out(p)
        q = torch.randn(6, 8, dtype=torch.float64)
        kv = torch.randn(6, 8, dtype=torch.float64)
        assert torch.allclose(cross_attend(p, q, kv), _cross_oracle(p, q, kv), atol=1e-9)


def test_cross_batch_mismatch():
    p = CrossAttention(8, 2)
    with raises(DimensionError):
        cross_attend(p, torch.randn(2, 5, 8), torch.randn(3, 5, 8))
    with raises(DimensionError):
        cross_attend(p, torch.randn(5, 8), torch.randn(2, 5, 8))


def test_cross_bad_heads():
    with raises(ConfigError):
        CrossAttention(10, 4)


def test_cross_weights_rows_sum():
    p = CrossAttention(8, 2)
    out, w = cross_attend(p, torch.randn(2, 5, 8), torch.randn(2, 7, 8), return_weights=True)
    assert out.shape == (2, 5, 8)
    assert w.shape == (2, 2, 5, 7)
    assert torch.allclose(w.sum(-1), torch.ones(2, 2, 5), atol=1e-5)


def test_cross_projection_gradients():
    p = CrossAttention(8, 2).double()
    _randomize_out(p)
    q = torch.randn(2, 5, 8, dtype=torch.float64)
    kv = torch.randn(2, 5, 8, dtype=torch.float64)
    tgt = torch.randn(2, 5, 8, dtype=torch.float64)

    def loss():
        return ((cross_attend(p, q, kv) - tgt) ** 2).mean()

    for w in [p.W_q.weight, p.W_k.weight, p.W_v.weight, p.out_proj.weight]:
        central_fd_check(loss, w)


def test_hl_attn_fresh_zero():
    h = HlAttnBlock(8, 2)
    e = [torch.randn(2, 5, 8) for _ in range(3)]
    assert torch.all(h(*e) == 0)


@mark.parametrize('code', FusionOrder.VALID)
def test_hl_attn_oracle(code):
    torch.manual_seed(11)
    h = HlAttnBlock(8, 2, code).double()
    _randomize_out(h)
    feats = {lvl: torch.randn(6, 8, dtype=torch.float64) for lvl in ['image', 'patch', 'pixel']}
    (q1, kv1), (q2, kv2) = FusionOrder(code).pairings()
    feats['intermediate'] = _cross_oracle(h.stage1_cross, feats[q1], feats[kv1])
    fused = _cross_oracle(h.stage2_cross, feats[q2], feats[kv2])
    fused = _cross_oracle(h.self_attn, fused, fused)
    expected = h.out_proj(fused)
    out = hl_attn_fuse(h, feats['image'], feats['patch'], feats['pixel'])
    assert torch.allclose(out, expected, atol=1e-9)


def test_hl_attn_weights():
    h = HlAttnBlock(8, 2)
    e = [torch.randn(1, 5, 8) for _ in range(3)]
    out, w = hl_attn_fuse(h, *e, return_weights=True)
    assert set(w) == {'stage1', 'stage2', 'self'}
    assert w['stage2'].shape == (1, 2, 5, 5)


def test_hl_attn_shape_mismatch():
    h = HlAttnBlock(8, 2)
    with raises(DimensionError):
        hl_attn_fuse(h, torch.randn(5, 8), torch.randn(5, 8), torch.randn(4, 8))


def test_hl_attn_identity_propagation():
    # identity output projection without norms: stage-2 query propagates through residuals
    h = HlAttnBlock(8, 2, '211', norm=False)
    with torch.no_grad():
        h.out_proj.weight.copy_(torch.eye(8))
    e_im = torch.randn(5, 8)
    out = h(e_im, torch.randn(5, 8), torch.randn(5, 8))
    assert torch.allclose(out, e_im, atol=1e-6)


def test_block_output():
    f = torch.randn(4, 8)
    e = torch.randn(4, 8)
    assert torch.equal(block_output(f, e), f + e)
    with raises(DimensionError):
        block_output(f, torch.randn(4, 7))


def test_lac_oracle():
    outs = [torch.randn(3, 4) for _ in range(3)]
    w = [0.2, -0.5, 1.5]
    expected = 0.2 * outs[0] - 0.5 * outs[1] + 1.5 * outs[2]
    assert torch.allclose(lac_fuse(w, outs), expected, atol=1e-6)


def test_lac_bad_weights():
    outs = [torch.randn(3, 4) for _ in range(3)]
    with raises(ValueError):
        lac_fuse([1.0, float('nan'), 0.0], outs)
    with raises(ValueError):
        lac_fuse([1.0, 0.0], outs)
    with raises(ValueError):
        lac_fuse([1, 1, 1], outs[:2])
    with raises(DimensionError):
        lac_fuse([1, 1, 1], outs[:2] + [torch.randn(3, 5)])


def test_lac_module_trainable():
    assert len(list(LacFusion().parameters())) == 0
    assert len(list(LacFusion(trainable=True).parameters())) == 1


def test_gated_weights_sum():
    g = GatedFusion(8)
    x = torch.randn(2, 5, 8)
    outs = [torch.randn(2, 5, 8) for _ in range(3)]
    out, w = gated_mixture_fuse(g.gate, outs, x, return_weights=True)
    assert w.shape == (2, 3)
    assert torch.allclose(w.sum(-1), torch.ones(2), atol=1e-6)
    assert out.shape == x.shape


def test_gated_equal_experts():
    g = GatedFusion(8)
    e = torch.randn(5, 8)
    assert torch.allclose(g(e, e, e, x=torch.randn(5, 8)), e, atol=1e-6)


def test_gated_needs_input():
    g = GatedFusion(8)
    e = torch.randn(5, 8)
    with raises(ValueError):
        g(e, e, e)


def test_single_expert_fresh_zero():
    s = SingleExpertFusion(8, 'patch')
    out = s(None, torch.randn(5, 8), None)
    assert torch.all(out == 0)


def test_weight_compose_deltas():
    enc = FrozenEncoder(smtu.tiny_encoder())
    exps = [inject_lora(enc, lvl, 2) for lvl in ['image', 'patch', 'pixel']]
    with torch.no_grad():
        for e in exps:
            for blk in e.blocks:
                for pair in blk.values():
                    pair.B.normal_()
    c = [0.5, -1.0, 0.25]
    comp = weight_compose(c, exps)
    assert comp.rank == 6
    assert comp.level is None
    for i in range(enc.config.depth):
        got = expert_deltas(comp, i)
        for name, d in got.items():
            expected = sum(ci * expert_deltas(e, i)[name] for ci, e in zip(c, exps))
            assert torch.allclose(d, expected, atol=1e-5)


def test_weight_compose_zero_is_frozen():
    enc = FrozenEncoder(smtu.tiny_encoder())
    exps = [inject_lora(enc, lvl, 2) for lvl in ['image', 'patch', 'pixel']]
    with torch.no_grad():
        for e in exps:
            e.blocks[0]['q'].B.normal_()
    comp = weight_compose([0, 0, 0], exps)
    x = torch.randn(1, 16, 16)
    assert torch.allclose(forward_merged_block(enc.blocks[0], comp, x, 0),
                          forward_frozen_block(enc.blocks[0], x), atol=1e-6)


def test_weight_compose_leaves_global_rng():
    enc = FrozenEncoder(smtu.tiny_encoder())
    exps = [inject_lora(enc, lvl, 2) for lvl in ['image', 'patch', 'pixel']]
    torch.manual_seed(17)
    expected = torch.randn(4)
    torch.manual_seed(17)
    for c in [[1, 0, 0], [0.5, 0.5, 0.5], [0, 0, 2]]:
        weight_compose(c, exps)
    assert torch.equal(torch.randn(4), expected)


def test_weight_compose_rank_mismatch():
    enc = FrozenEncoder(smtu.tiny_encoder())
    exps = [inject_lora(enc, 'image', 2), inject_lora(enc, 'patch', 4),
            inject_lora(enc, 'pixel', 2)]
    with raises(ConfigError):
        weight_compose([1, 1, 1], exps)


def test_compose_fusion_cache():
    enc = FrozenEncoder(smtu.tiny_encoder())
    exps = [inject_lora(enc, lvl, 2) for lvl in ['image', 'patch', 'pixel']]
    cf = ComposeFusion()
    a = cf.composite(exps)
    assert cf.composite(exps) is a
    cf.set_coefficients([1.0, 0.0, 0.0])
    assert cf.composite(exps) is not a


def test_search_reaches_target():
    target = np.array([0.5, -1.0, 1.0])
    c, score, hist = search_coefficients(lambda x: -np.sum((x - target) ** 2),
                                         start=[0, 0, 0], rounds=10)
    assert np.allclose(c, target)
    assert score == approx(0)
    assert all(a <= b for (a, b) in zip(hist, hist[1:]))


def test_search_respects_bounds():
    c, score, hist = search_coefficients(lambda x: np.sum(x), bounds=(-1.5, 1.5), rounds=8)
    assert np.all(c <= 1.5)
    assert np.allclose(c, 1.5)
    assert len(hist) == 8


def test_fusion_config_levels():
    cfg = FusionConfig(levels=['pixel'])
    assert cfg.single_level == Level.PIXEL
    assert FusionConfig().single_level is None
    cfg = FusionConfig(levels=['pixel', 'image', 'patch'])
    assert cfg.levels == ['image', 'patch', 'pixel']


@mark.parametrize('kw', [{'levels': ['image', 'patch']}, {'levels': ['image', 'image', 'pixel']},
                         {'strategy': 'moe'}, {'order': '222'}, {'lac_weights': [1, 2]}])
def test_fusion_config_invalid(kw):
    with raises(ConfigError):
        FusionConfig(**kw)


def test_build_fusion_types():
    assert isinstance(build_fusion(FusionConfig(), 8, 2, 3)[0], HlAttnBlock)
    assert len(build_fusion(FusionConfig(), 8, 2, 3)) == 3
    assert isinstance(build_fusion(FusionConfig(strategy='lac'), 8, 2, 2)[1], LacFusion)
    assert isinstance(build_fusion(FusionConfig(strategy='gated'), 8, 2, 2)[0], GatedFusion)
    assert isinstance(build_fusion(FusionConfig(strategy='compose'), 8, 2, 2), ComposeFusion)
    single = build_fusion(FusionConfig(levels=['image']), 8, 2, 2)
    assert isinstance(single[0], SingleExpertFusion)
