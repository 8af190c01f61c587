from dataclasses import replace

import numpy as np
import pytest

from layercka import encoder as enc
from layercka import tasks, training
from layercka.errors import ConfigError, EmptyDataset, StepOutOfRange

CFG = enc.EncoderConfig(vocab_size=40, max_len=18, d_model=16, n_heads=2, n_layers=2, d_ff=32)


@pytest.fixture(scope="module")
def base():
    return enc.init_params(CFG, np.random.default_rng(0))


def test_schedule():
    c = training.TrainConfig(base_lr=1e-3, warmup_steps=10, max_steps=20)
    assert training.lr_at(c, 1) == pytest.approx(1e-4)
    assert training.lr_at(c, 10) == pytest.approx(1e-3)
    assert training.lr_at(c, 20) == 1e-3
    for t in (0, 21):
        with pytest.raises(StepOutOfRange):
            training.lr_at(c, t)
    assert training.lr_at(training.TrainConfig(warmup_steps=0, max_steps=5), 1) == 1e-3


def test_config_validation():
    with pytest.raises(ConfigError):
        training.TrainConfig(warmup_steps=10, max_steps=5)
    with pytest.raises(ConfigError):
        training.TrainConfig(base_lr=0)


def test_adam_against_reference():
    rng = np.random.default_rng(0)
    p = rng.normal(size=5)
    g1, g2 = rng.normal(size=5), rng.normal(size=5)
    state = training.AdamState.fresh(5)
    q = p.copy()
    training.adam_step(q, g1, state, 0.1)
    training.adam_step(q, g2, state, 0.1)
    m = 0.1 * g1
    v = 0.001 * g1 ** 2
    r = p - 0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    m = 0.9 * m + 0.1 * g2
    v = 0.999 * v + 0.001 * g2 ** 2
    r = r - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(q, r, rtol=1e-14)


def test_softmax_xent_gradient():
    rng = np.random.default_rng(2)
    z, y = rng.normal(size=(4, 3)), np.array([0, 2, 1, 2])
    loss, d = training.softmax_xent(z, y)
    eps = 1e-6
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        num = (training.softmax_xent(zp, y)[0] - training.softmax_xent(zm, y)[0]) / (2 * eps)
        assert d[idx] == pytest.approx(num, abs=1e-9)


def test_masking_statistics():
    rng = np.random.default_rng(0)
    toks = tasks.gen_corpus(1, 2000, max_len=18, vocab_size=40).tokens
    inputs, pos, targets = training.mask_tokens(toks, rng, 40)
    content = (toks >= enc.N_RESERVED).sum()
    assert 0.13 < len(targets) / content < 0.17
    assert np.array_equal(toks[pos], targets)
    new = inputs[pos]
    assert 0.77 < (new == enc.MASK).mean() < 0.83
    assert 0.07 < (new == targets).mean() < 0.13
    untouched = np.ones(toks.shape, bool)
    untouched[pos] = False
    assert np.array_equal(inputs[untouched], toks[untouched])


def test_replacement_always_changes_token():
    rng = np.random.default_rng(0)
    toks = tasks.gen_corpus(1, 500, max_len=18, vocab_size=40).tokens
    inputs, replaced, valid = training.replace_tokens(toks, rng, 40)
    assert np.all(inputs[replaced] != toks[replaced])
    assert np.all(inputs[replaced] >= enc.N_RESERVED)
    assert np.array_equal(inputs[~replaced], toks[~replaced])
    assert np.array_equal(valid, toks != enc.PAD)


@pytest.mark.parametrize("objective", ["mlm", "rtd"])
def test_pretrain_reduces_loss_and_is_pure(base, objective):
    corpus = tasks.gen_corpus(3, 400, max_len=18, vocab_size=40)
    before = base.flat.copy()
    log = []
    cfg = training.TrainConfig(base_lr=2e-3, batch_size=16, warmup_steps=10, max_steps=150, seed=1)
    out = training.pretrain(base, corpus, objective, cfg, log)
    assert np.array_equal(base.flat, before)
    first = np.mean([r.loss for r in log[:20]])
    last = np.mean([r.loss for r in log[-20:]])
    assert last < first
    again = training.pretrain(base, corpus, objective, cfg)
    assert again.digest() == out.digest()


def test_finetune_learns_easy_task(base):
    spec = tasks.TaskSpec("contains-pattern", n_train=600, n_validation=200, seed=2, seq_len=12)
    train, val = tasks.gen_task(spec, 40)
    cfg = training.TrainConfig(base_lr=2e-3, batch_size=16, warmup_steps=20, max_steps=400, seed=0)
    log = []
    ft = training.finetune(base, train, cfg, val, log, eval_every=100)
    acc = training.accuracy(enc.head_forward(ft.classifier(), enc.cls_states(ft, val.tokens)), val.labels)
    assert acc > 0.8
    assert log[-1].eval_metric == pytest.approx(acc)
    assert [r.step for r in log if r.eval_metric is not None] == [100, 200, 300, 400]
    text = training.log_csv(log)
    assert text.splitlines()[0] == "step,lr,loss,eval_metric"


def test_finetune_restarts_differ(base):
    train, _ = tasks.gen_task(tasks.TaskSpec("parity", n_train=64, n_validation=8, seq_len=12), 40)
    cfg = training.TrainConfig(batch_size=8, warmup_steps=2, max_steps=5)
    a = training.finetune(base, train, replace(cfg, seed=1))
    b = training.finetune(base, train, replace(cfg, seed=2))
    assert a.digest() != b.digest()


def test_tune_head_never_worse_than_start():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 8))
    y = (x[:, 0] + 0.3 * rng.normal(size=200) > 0).astype(int)
    init = enc.init_head(8, 2, rng)
    cfg = training.TrainConfig(base_lr=1e-2, batch_size=16, warmup_steps=5, max_steps=100)
    start = training.accuracy(enc.head_forward(init, x), y)
    h = training.tune_head(x, y, cfg, init=init, select="accuracy")
    assert training.accuracy(enc.head_forward(h, x), y) >= start
    assert training.accuracy(enc.head_forward(h, x), y) > 0.85
    h0 = training.tune_head(x, y, replace(cfg, max_steps=0, warmup_steps=0), init=init)
    assert np.array_equal(h0.flat, init.flat) and h0 is not init


def test_errors(base):
    empty = tasks.TokenDataset(np.zeros((0, 4), int))
    with pytest.raises(EmptyDataset):
        training.pretrain(base, empty, "mlm", training.TrainConfig())
    with pytest.raises(ConfigError):
        training.pretrain(base, tasks.gen_corpus(0, 4), "clm", training.TrainConfig())
    with pytest.raises(ConfigError):
        training.loss_and_grad(base, np.array([[0, 5]]), "nope", np.random.default_rng())
