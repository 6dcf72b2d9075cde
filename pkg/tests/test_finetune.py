import numpy as np
import pandas as pd
import torch

from samora.datasets import SyntheticSpec, generate_synthetic
from samora.errors import ConfigError
from samora.fusion import FusionConfig
from samora.finetune import (
    FinetuneConfig, lr_at, dice_loss, combined_loss, trainable_parameters, load_adapters,
    predict_labels, Finetuner, finetune, write_train_report, DICE_EPS
)
from samora.models.assembly import SAMoraModel
from samora.models.encoder import FrozenEncoder
from samora.models.lora import LoraConfig, inject_lora
from samora.util import tensor_digest
import samora.util.test as smtu

from pytest import approx, raises, fixture, mark


@fixture(scope='module')
def train_set():
    spec = SyntheticSpec(num_cases=4, test_cases=1, slices_per_case=4, num_classes=2,
                         image_size=32, unlabeled_count=0)
    return generate_synthetic(spec).labeled.split('train')


def _model(strategy='hl_attn', **kw):
    fc = FusionConfig(strategy=strategy, **kw)
    return SAMoraModel(smtu.tiny_encoder(), LoraConfig(rank=2), fc, 2, seed=0)


def _cfg(**kw):
    opts = dict(epochs=1, batch_size=4, warmup=2, augment=False, allow_scratch_adapters=True)
    opts.update(kw)
    return FinetuneConfig(**opts)


def test_lr_schedule():
    cfg = FinetuneConfig(max_iter=18600)
    assert lr_at(cfg, 0) == 0.0
    assert lr_at(cfg, 125) == approx(0.0025)
    assert lr_at(cfg, 250) == approx(0.005)
    assert lr_at(cfg, 250 + 9300) == approx(0.0025)
    assert lr_at(cfg, 250 + 18600) == approx(0.0)
    assert lr_at(cfg, 250 + 30000) == 0.0


def test_lr_schedule_peak():
    cfg = FinetuneConfig(max_iter=100, warmup=10)
    lrs = [lr_at(cfg, t) for t in range(0, 120)]
    assert max(lrs) == approx(cfg.base_lr)
    assert int(np.argmax(lrs)) == 10
    assert np.all(np.diff(lrs[:11]) > 0)
    assert np.all(np.diff(lrs[10:111]) < 0)


def test_lr_no_warmup():
    cfg = FinetuneConfig(max_iter=10, warmup=0)
    assert lr_at(cfg, 0) == approx(cfg.base_lr)
    assert lr_at(cfg, 5) == approx(cfg.base_lr / 2)


def test_lr_errors():
    with raises(ValueError):
        lr_at(FinetuneConfig(max_iter=10), -1)
    with raises(ConfigError):
        lr_at(FinetuneConfig(), 3)


def test_config_validation():
    with raises(ConfigError):
        FinetuneConfig(warmup=-1)
    with raises(ConfigError):
        FinetuneConfig(warmup_unit='hours')
    with raises(ConfigError):
        FinetuneConfig(max_iter=0)
    with raises(ConfigError):
        FinetuneConfig(loss_ce=-0.1)


def test_warmup_units():
    assert FinetuneConfig(warmup=2, warmup_unit='epochs').warmup_steps(5) == 10
    assert FinetuneConfig(warmup=2).warmup_steps(5) == 2
    assert FinetuneConfig(warmup=2).decay_steps(20, 5) == 18
    assert FinetuneConfig(warmup=2, max_iter=7).decay_steps(20, 5) == 7


def _dice_oracle(logits, target):
    p = torch.softmax(logits, 1).numpy()
    t = target.numpy()
    scores = []
    for c in range(1, logits.shape[1]):
        q = (t == c).astype(np.float64)
        scores.append((2 * np.sum(p[:, c] * q) + DICE_EPS) / (p[:, c].sum() + q.sum() + DICE_EPS))
    return 1 - np.mean(scores)


def test_dice_loss_oracle():
    gen = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 3, 6, 6, generator=gen, dtype=torch.float64)
    target = torch.randint(0, 3, (2, 6, 6), generator=gen)
    assert float(dice_loss(logits, target)) == approx(_dice_oracle(logits, target))


def test_dice_loss_perfect():
    target = torch.randint(0, 3, (1, 5, 5), generator=torch.Generator().manual_seed(2))
    logits = torch.nn.functional.one_hot(target, 3).permute(0, 3, 1, 2).double() * 50
    assert float(dice_loss(logits, target)) == approx(0.0, abs=1e-6)


def test_dice_loss_unbatched():
    gen = torch.Generator().manual_seed(4)
    logits = torch.randn(3, 4, 4, generator=gen)
    target = torch.randint(0, 3, (4, 4), generator=gen)
    assert float(dice_loss(logits, target)) == approx(float(dice_loss(logits[None], target[None])))


def test_combined_loss_terms():
    gen = torch.Generator().manual_seed(5)
    logits = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    target = torch.randint(0, 3, (2, 4, 4), generator=gen)
    total, ce, dl = combined_loss(logits, target, return_terms=True)
    assert float(ce) == approx(float(torch.nn.functional.cross_entropy(logits, target)))
    assert float(total) == approx(0.2 * float(ce) + 0.8 * float(dl))
    other = combined_loss(logits, target, FinetuneConfig(loss_ce=1.0, loss_dice=0.0))
    assert float(other) == approx(float(ce))


def test_combined_loss_gradcheck():
    gen = torch.Generator().manual_seed(6)
    logits = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    target = torch.randint(0, 3, (2, 4, 4), generator=gen)
    assert torch.autograd.gradcheck(lambda z: combined_loss(z, target), (logits,),
                                    eps=1e-6, atol=1e-6)


def test_combined_loss_errors():
    logits = torch.randn(1, 3, 4, 4)
    with raises(ValueError):
        combined_loss(logits, torch.full((1, 4, 4), 3))
    with raises(ValueError):
        combined_loss(logits, torch.zeros(1, 4, 5, dtype=torch.long))


def test_trainable_stage2():
    model = _model()
    names = [n for (n, _) in trainable_parameters(model, 'stage2')]
    assert names
    assert all(n.startswith(('fusion.', 'decoder.')) for n in names)


def test_trainable_stage1():
    enc = FrozenEncoder(smtu.tiny_encoder())
    inject_lora(enc, 'image', 2)
    inject_lora(enc, 'patch', 2)
    named = trainable_parameters(enc, 'stage1-image', aux=torch.nn.Linear(2, 2))
    names = [n for (n, _) in named]
    assert all(n.startswith(('encoder.experts.image.', 'aux.')) for n in names)
    assert 'aux.weight' in names
    with raises(ConfigError):
        trainable_parameters(enc, 'stage1-pixel')
    with raises(ConfigError):
        trainable_parameters(enc, 'stage3')


def test_load_adapters():
    model = _model()
    src = FrozenEncoder(smtu.tiny_encoder())
    adapters = {}
    for lvl in ['image', 'patch', 'pixel']:
        ex = inject_lora(src, lvl, 2)
        with torch.no_grad():
            for p in ex.parameters():
                p.add_(1.0)
        adapters[lvl] = ex
    load_adapters(model, adapters)
    for lvl, ex in adapters.items():
        mine = model.expert(lvl).state_dict()
        assert all(torch.equal(mine[k], v) for (k, v) in ex.state_dict().items())
        assert not any(p.requires_grad for p in model.expert(lvl).parameters())


def test_load_adapters_missing():
    model = _model()
    with raises(ConfigError, match='patch'):
        load_adapters(model, {'image': model.expert('image').state_dict(),
                              'pixel': model.expert('pixel').state_dict()})
    load_adapters(model, {'image': model.expert('image').state_dict()}, allow_scratch=True)


def test_load_adapters_wrong_rank():
    model = _model()
    enc = FrozenEncoder(smtu.tiny_encoder())
    bad = {lvl: inject_lora(enc, lvl, 3) for lvl in ['image', 'patch', 'pixel']}
    with raises(ConfigError, match='do not fit'):
        load_adapters(model, bad)


def test_predict_labels(train_set):
    model = _model()
    pred = predict_labels(model, train_set.images[:3], batch_size=2)
    assert pred.shape == (3, 32, 32)
    assert pred.dtype == np.int64
    assert pred.min() >= 0 and pred.max() <= 2
    assert predict_labels(model, train_set.images[:0]).shape == (0, 32, 32)


def test_fit_requires_adapters(train_set):
    with raises(ConfigError):
        Finetuner(_cfg(allow_scratch_adapters=False)).fit(_model(), train_set)


def test_fit_requires_labels(train_set):
    with raises(ValueError):
        Finetuner(_cfg()).fit(_model(), train_set.unlabeled())


@mark.slow
def test_fit(train_set):
    model = _model()
    frozen = tensor_digest(model.frozen_named_parameters())
    decoder = tensor_digest(list(model.decoder.named_parameters()))
    cfg = _cfg()
    trainer = Finetuner(cfg).fit(model, train_set)
    state = trainer.state_
    # 12 slices in batches of 4
    assert state.step == 3
    assert state.frozen_digest == frozen
    assert tensor_digest(model.frozen_named_parameters()) == frozen
    assert tensor_digest(list(model.decoder.named_parameters())) != decoder
    rep = state.report
    assert list(rep.columns) == ['step', 'lr', 'loss_ce', 'loss_dice', 'loss_total']
    assert list(rep['step']) == [1, 2, 3]
    mi = cfg.decay_steps(3, 3)
    assert list(rep['lr']) == approx([lr_at(cfg, t, mi, 2) for t in [1, 2, 3]])
    assert rep['lr'].iloc[0] == approx(0.0025)
    expected = 0.2 * rep['loss_ce'].values + 0.8 * rep['loss_dice'].values
    assert rep['loss_total'].values == approx(expected, rel=1e-5)
    assert not model.training


@mark.slow
def test_fit_reproducible(train_set):
    a = finetune(_model(), train_set, _cfg(augment=True))
    b = finetune(_model(), train_set, _cfg(augment=True))
    assert a.report['loss_total'].values == approx(b.report['loss_total'].values)


@mark.slow
def test_fit_compose(train_set):
    model = _model('compose', compose_rounds=2)
    Finetuner(_cfg()).fit(model, train_set)
    c = model.fusion.coeffs.numpy()
    assert np.all(c >= -1.5) and np.all(c <= 1.5)


@mark.slow
def test_fit_single_level(train_set):
    model = _model(levels=['pixel'])
    state = finetune(model, train_set, _cfg())
    assert state.step == 3


def test_train_report(tmp_path):
    rep = pd.DataFrame({'step': [1, 2], 'lr': [0.001, 0.002], 'loss_ce': [1.0, 0.9],
                        'loss_dice': [0.5, 0.4], 'loss_total': [0.6, 0.5]})
    write_train_report(rep, tmp_path / 'r.txt')
    lines = (tmp_path / 'r.txt').read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith('step=1 lr=0.001 ')
    assert 'loss_total=0.5' in lines[1]
