import copy

import numpy as np
import torch

from samora import Level
from samora.errors import ConfigError
from samora.models.encoder import FrozenEncoder, forward_frozen_block
from samora.models.lora import (
    LoraConfig, LoraPair, inject_lora, get_expert, forward_expert_block,
    forward_merged_block, expert_deltas
)
import samora.util.test as smtu
from samora.util.test import central_fd_check

from pytest import raises, mark


def _randomize(expert, scale=0.1):
    gen = torch.Generator().manual_seed(7)
    with torch.no_grad():
        for blk in expert.blocks:
            for pair in blk.values():
                pair.B.copy_(torch.randn(pair.B.shape, generator=gen) * scale)


def test_lora_config_bad_rank():
    with raises(ConfigError):
        LoraConfig(rank=0)


def test_lora_config_bad_path():
    with raises(ConfigError):
        LoraConfig(expert_path='sideways')


def test_pair_zero_init():
    p = LoraPair(8, 6, 2)
    assert p.rank == 2
    assert torch.all(p.B == 0)
    assert torch.any(p.A != 0)
    assert torch.all(p(torch.randn(3, 8)) == 0)


def test_pair_delta():
    p = LoraPair(5, 4, 3)
    with torch.no_grad():
        p.B.normal_()
    x = torch.randn(2, 5)
    assert torch.allclose(p(x), x @ p.delta().T, atol=1e-6)


def test_inject():
    enc = FrozenEncoder(smtu.tiny_encoder())
    ex = inject_lora(enc, 'patch', 2)
    assert ex.level == Level.PATCH
    assert ex.rank == 2
    assert ex.depth == enc.config.depth
    assert get_expert(enc, Level.PATCH) is ex


def test_inject_duplicate():
    enc = FrozenEncoder(smtu.tiny_encoder())
    inject_lora(enc, 'image')
    with raises(ConfigError):
        inject_lora(enc, Level.IMAGE)


def test_inject_bad_rank():
    enc = FrozenEncoder(smtu.tiny_encoder())
    with raises(ConfigError):
        inject_lora(enc, 'image', 0)
    with raises(ConfigError):
        inject_lora(enc, 'pixel', 1000)


def test_get_missing_expert():
    enc = FrozenEncoder(smtu.tiny_encoder())
    with raises(ConfigError):
        get_expert(enc, 'pixel')


def test_inject_reproducible():
    e1 = FrozenEncoder(smtu.tiny_encoder())
    e2 = FrozenEncoder(smtu.tiny_encoder())
    a = inject_lora(e1, 'image')
    b = inject_lora(e2, 'image')
    c = inject_lora(e2, 'patch')
    assert torch.equal(a.blocks[0]['q'].A, b.blocks[0]['q'].A)
    assert not torch.equal(b.blocks[0]['q'].A, c.blocks[0]['q'].A)


def test_adapter_out_of_range():
    enc = FrozenEncoder(smtu.tiny_encoder())
    ex = inject_lora(enc, 'image')
    with raises(ConfigError):
        ex.adapter(5, 'q')
    with raises(ConfigError):
        ex.adapter(0, 'k')


def test_delta_path_identity_at_init():
    enc = FrozenEncoder(smtu.tiny_encoder())
    ex = inject_lora(enc, 'image')
    x = torch.randn(2, 16, 16)
    for i, blk in enumerate(enc.blocks):
        assert torch.equal(forward_expert_block(blk, ex, x, i), x)


def test_full_path_frozen_at_init():
    enc = FrozenEncoder(smtu.tiny_encoder())
    ex = inject_lora(enc, 'image')
    x = torch.randn(2, 16, 16)
    out = forward_merged_block(enc.blocks[0], ex, x, 0)
    assert torch.allclose(out, forward_frozen_block(enc.blocks[0], x), atol=1e-6)


def test_full_path_is_merged_weights():
    enc = FrozenEncoder(smtu.tiny_encoder())
    ex = inject_lora(enc, 'image')
    _randomize(ex)
    blk = enc.blocks[1]
    merged = copy.deepcopy(blk)
    deltas = expert_deltas(ex, 1)
    with torch.no_grad():
        merged.attn.q.weight += deltas['q']
        merged.attn.v.weight += deltas['v']
        merged.mlp.fc1.weight += deltas['fc1']
        merged.mlp.fc2.weight += deltas['fc2']
    x = torch.randn(3, 16, 16)
    assert torch.allclose(forward_merged_block(blk, ex, x, 1), merged(x), atol=1e-5)


def test_delta_path_oracle():
    enc = FrozenEncoder(smtu.tiny_encoder()).double()
    ex = inject_lora(enc, 'patch', 2).double()
    _randomize(ex, 0.5)
    blk = enc.blocks[0]
    ad = ex.blocks[0]
    x = torch.randn(1, 16, 16, dtype=torch.float64)

    # brute force, one head at a time
    h = blk.norm1(x[0])
    q = h @ ad['q'].delta().T
    k = h @ blk.attn.k.weight.T
    v = h @ ad['v'].delta().T
    dk = 16 // blk.heads
    ctx = []
    for j in range(blk.heads):
        s = slice(j * dk, (j + 1) * dk)
        w = torch.softmax(q[:, s] @ k[:, s].T / np.sqrt(dk), -1)
        ctx.append(w @ v[:, s])
    x1 = x[0] + torch.cat(ctx, -1) @ blk.attn.proj.weight.T
    h2 = blk.norm2(x1)
    hid = torch.nn.functional.gelu(h2 @ ad['fc1'].delta().T)
    expected = x1 + hid @ ad['fc2'].delta().T

    out = forward_expert_block(blk, ex, x, 0, mode='delta')
    assert torch.allclose(out[0], expected, atol=1e-9)


def test_expert_weights_shape():
    enc = FrozenEncoder(smtu.tiny_encoder())
    ex = inject_lora(enc, 'image')
    x = torch.randn(2, 16, 16)
    out, w = forward_expert_block(enc.blocks[0], ex, x, 0, return_weights=True)
    assert w.shape == (2, 2, 16, 16)
    assert torch.allclose(w.sum(-1), torch.ones(2, 2, 16), atol=1e-5)


def test_unknown_mode():
    enc = FrozenEncoder(smtu.tiny_encoder())
    ex = inject_lora(enc, 'image')
    with raises(ConfigError):
        forward_expert_block(enc.blocks[0], ex, torch.randn(16, 16), 0, mode='other')


@mark.parametrize('mode', ['delta', 'full'])
def test_expert_gradcheck_input(mode):
    enc = FrozenEncoder(smtu.tiny_encoder(depth=1, dim=8, heads=2)).double()
    ex = inject_lora(enc, 'image', 2).double()
    _randomize(ex, 0.3)
    x = torch.randn(1, 16, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(
        lambda t: forward_expert_block(enc.blocks[0], ex, t, 0, mode=mode), (x,),
        eps=1e-6, atol=1e-5, rtol=1e-3)


@mark.parametrize('name', ['q', 'v', 'fc1', 'fc2'])
def test_adapter_gradients_fd(name):
    enc = FrozenEncoder(smtu.tiny_encoder(depth=1, dim=8, heads=2)).double()
    ex = inject_lora(enc, 'image', 2).double()
    _randomize(ex, 0.3)
    x = torch.randn(2, 16, 8, dtype=torch.float64)
    target = torch.randn(2, 16, 8, dtype=torch.float64)

    def loss():
        out = forward_expert_block(enc.blocks[0], ex, x, 0, mode='delta')
        return ((out - target) ** 2).mean()

    pair = ex.adapter(0, name)
    central_fd_check(loss, pair.A)
    central_fd_check(loss, pair.B)
