import numpy as np
import torch
import yaml

from samora import Level
from samora.checkpoint import (
    save_checkpoint, load_checkpoint, read_manifest, save_module, load_module, save_expert,
    load_expert_state, load_experts_into
)
from samora.errors import CheckpointError
from samora.models.assembly import SAMoraModel
from samora.models.encoder import FrozenEncoder
from samora.models.lora import LoraConfig, inject_lora
import samora.util.test as smtu

from pytest import raises, fixture


def _expert(level, rank=2, seed=0):
    enc = FrozenEncoder(smtu.tiny_encoder())
    ex = inject_lora(enc, level, rank)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in ex.parameters():
            p.copy_(torch.randn(p.shape, generator=gen))
    return ex


@fixture
def tensors():
    return {'a.weight': torch.randn(3, 4), 'a.bias': torch.randn(4), 'b/scale': torch.ones(())}


def test_save_layout(tensors, tmp_path):
    p = save_checkpoint(tmp_path / 'ck', tensors, stage='stage2', config_hash='abc', seed=3)
    man = read_manifest(p)
    assert man['stage'] == 'stage2'
    assert man['config_hash'] == 'abc'
    assert man['seed'] == 3
    assert 'version' in man
    assert [e['name'] for e in man['tensors']] == list(tensors)
    assert man['tensors'][0]['shape'] == [3, 4]
    assert man['tensors'][0]['dtype'] == 'float32'
    assert (p / 'a.weight.bin').stat().st_size == 12 * 4
    assert (p / 'b_scale.bin').exists()
    assert not list(tmp_path.glob('.ck-*'))


def test_blob_little_endian(tensors, tmp_path):
    p = save_checkpoint(tmp_path / 'ck', tensors, stage='stage2')
    raw = np.fromfile(p / 'a.bias.bin', dtype='<f4')
    assert np.array_equal(raw, tensors['a.bias'].numpy())


def test_load(tensors, tmp_path):
    save_checkpoint(tmp_path / 'ck', tensors, stage='stage2', config_hash='abc')
    ck = load_checkpoint(tmp_path / 'ck', stage='stage2', config_hash='abc')
    assert list(ck.tensors) == list(tensors)
    for k, t in tensors.items():
        assert torch.equal(ck.tensors[k], t)


def test_save_load_save_identical(tmp_path):
    ex = _expert('patch')
    save_expert(ex, tmp_path / 'one')
    other = _expert('patch', seed=9)
    load_module(other, tmp_path / 'one')
    save_expert(other, tmp_path / 'two')
    m1 = read_manifest(tmp_path / 'one')
    m2 = read_manifest(tmp_path / 'two')
    assert m1['tensors'] == m2['tensors']
    for e in m1['tensors']:
        assert (tmp_path / 'one' / e['file']).read_bytes() == \
            (tmp_path / 'two' / e['file']).read_bytes()


def test_replace_existing(tensors, tmp_path):
    save_checkpoint(tmp_path / 'ck', tensors, stage='stage2')
    save_checkpoint(tmp_path / 'ck', {'x': torch.zeros(2)}, stage='stage2')
    ck = load_checkpoint(tmp_path / 'ck')
    assert list(ck.tensors) == ['x']
    assert not (tmp_path / 'ck' / 'a.weight.bin').exists()


def test_truncated_blob(tensors, tmp_path):
    p = save_checkpoint(tmp_path / 'ck', tensors, stage='stage2')
    f = p / 'a.weight.bin'
    f.write_bytes(f.read_bytes()[:-4])
    with raises(CheckpointError, match='a.weight'):
        load_checkpoint(p)


def test_corrupt_blob(tensors, tmp_path):
    p = save_checkpoint(tmp_path / 'ck', tensors, stage='stage2')
    f = p / 'a.bias.bin'
    data = bytearray(f.read_bytes())
    data[0] ^= 0xFF
    f.write_bytes(bytes(data))
    with raises(CheckpointError, match='hash mismatch for tensor a.bias'):
        load_checkpoint(p)


def test_missing_blob(tensors, tmp_path):
    p = save_checkpoint(tmp_path / 'ck', tensors, stage='stage2')
    (p / 'b_scale.bin').unlink()
    with raises(CheckpointError, match='b/scale'):
        load_checkpoint(p)


def test_missing_manifest(tmp_path):
    (tmp_path / 'ck').mkdir()
    with raises(CheckpointError):
        load_checkpoint(tmp_path / 'ck')


def test_malformed_manifest(tmp_path):
    (tmp_path / 'ck').mkdir()
    (tmp_path / 'ck' / 'manifest.yaml').write_text(yaml.safe_dump({'stage': 'stage2'}))
    with raises(CheckpointError):
        load_checkpoint(tmp_path / 'ck')


def test_stage_mismatch(tensors, tmp_path):
    save_checkpoint(tmp_path / 'ck', tensors, stage='stage1-image', config_hash='abc')
    with raises(CheckpointError, match='stage1-image'):
        load_checkpoint(tmp_path / 'ck', stage='stage2')
    with raises(CheckpointError, match='config hash'):
        load_checkpoint(tmp_path / 'ck', config_hash='def')


def test_load_module_mismatch(tmp_path):
    save_expert(_expert('image', rank=2), tmp_path / 'ck')
    with raises(CheckpointError, match='shape'):
        load_module(_expert('image', rank=3), tmp_path / 'ck')


def test_load_module_extra_tensor(tmp_path):
    ex = _expert('image')
    state = dict(ex.state_dict())
    state['bonus'] = torch.zeros(1)
    save_checkpoint(tmp_path / 'ck', state, stage='stage1-image')
    with raises(CheckpointError, match='unexpected tensor bonus'):
        load_module(_expert('image'), tmp_path / 'ck')


def test_expert_manifest(tmp_path):
    save_expert(_expert('pixel', rank=2), tmp_path / 'ck', seed=1)
    man = read_manifest(tmp_path / 'ck')
    assert man['stage'] == 'stage1-pixel'
    assert man['level'] == 'pixel'
    assert man['rank'] == 2
    level, tensors = load_expert_state(tmp_path / 'ck')
    assert level == Level.PIXEL
    assert tensors


def test_not_expert(tensors, tmp_path):
    save_checkpoint(tmp_path / 'ck', tensors, stage='stage2')
    with raises(CheckpointError):
        load_expert_state(tmp_path / 'ck')


def test_experts_placed_by_level(tmp_path):
    experts = {lvl: _expert(lvl, seed=i) for (i, lvl) in enumerate(['image', 'patch', 'pixel'])}
    paths = []
    for lvl in ['pixel', 'image', 'patch']:
        paths.append(save_expert(experts[lvl], tmp_path / ('expert-' + lvl)))
    model = SAMoraModel(smtu.tiny_encoder(), LoraConfig(rank=2), num_classes=2)
    loaded = load_experts_into(model, paths)
    assert loaded == [Level.PIXEL, Level.IMAGE, Level.PATCH]
    assert model.adapters_loaded_
    for lvl, ex in experts.items():
        mine = model.expert(lvl).state_dict()
        for k, v in ex.state_dict().items():
            assert torch.equal(mine[k], v)


def test_experts_partial(tmp_path):
    p = save_expert(_expert('image'), tmp_path / 'img')
    model = SAMoraModel(smtu.tiny_encoder(), LoraConfig(rank=2), num_classes=2)
    load_experts_into(model, [p])
    assert not model.adapters_loaded_


def test_experts_duplicate(tmp_path):
    a = save_expert(_expert('image'), tmp_path / 'a')
    b = save_expert(_expert('image', seed=2), tmp_path / 'b')
    model = SAMoraModel(smtu.tiny_encoder(), LoraConfig(rank=2), num_classes=2)
    with raises(CheckpointError, match='two checkpoints'):
        load_experts_into(model, [a, b])


def test_save_module_model(tmp_path):
    model = SAMoraModel(smtu.tiny_encoder(), LoraConfig(rank=2), num_classes=2, seed=4)
    save_module(model, tmp_path / 'm', stage='stage2', extra={'strategy': model.strategy})
    other = SAMoraModel(smtu.tiny_encoder(), LoraConfig(rank=2), num_classes=2, seed=5)
    man = load_module(other, tmp_path / 'm', stage='stage2')
    assert man['strategy'] == 'hl_attn'
    x = torch.randn(1, 1, 32, 32)
    model.eval()
    other.eval()
    with torch.no_grad():
        assert torch.allclose(model(x), other(x))
