import dataclasses
import math

import numpy as np
import pytest
import torch
from torch import nn

from ced import training
from ced.corpus import FeatureSequence, SynthConfig, TurnPair, synth_corpus
from ced.errors import ConfigError, EmptyCorpusError, EmptyInputError, NumericFailure
from ced.model import build_model, load_checkpoint
from ced.training import (
    EarlyStopping,
    TrainConfig,
    evaluate_loss,
    make_training_batches,
    split_sessions,
    train,
)

from conftest import TINY


class LogitFromFrames(nn.Module):
    """Stub whose logit is the first value of the leading turn."""

    def __init__(self):
        super().__init__()
        self.cfg = TINY
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, lead, resp, lead_mask=None, resp_mask=None):
        return lead[:, 0, 0] + 0 * self.dummy


def stub_pair(logit):
    frames = np.zeros((2, 8), np.float32)
    frames[0, 0] = logit
    return TurnPair(FeatureSequence("s", 0, "A", frames), FeatureSequence("s", 1, "B", frames.copy()))


def corpus(n=10, turns=9, dim=8, seed=0):
    return synth_corpus(SynthConfig(n_sessions=n, turns_per_session=turns, dim=dim, seed=seed, frames_min=3, frames_max=6))


def key(pair, label):
    return (pair.session_id, pair.index, pair.leading.turn_index, pair.responding.turn_index, label)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)


def test_batches_counts():
    batches = make_training_batches(corpus(), TrainConfig())
    labels = [y for b in batches for _, y in b]
    assert len(labels) == 160
    assert sum(labels) == 80


def test_batches_balanced_per_batch():
    for b in make_training_batches(corpus(), TrainConfig(batch_size=7), epoch=3):
        ones = sum(y for _, y in b)
        assert abs(ones - (len(b) - ones)) <= 1


def test_batches_deterministic_and_epoch_dependent():
    c, cfg = corpus(), TrainConfig(seed=5)
    a = [[key(p, y) for p, y in b] for b in make_training_batches(c, cfg, 1)]
    b = [[key(p, y) for p, y in b] for b in make_training_batches(c, cfg, 1)]
    other = [[key(p, y) for p, y in b] for b in make_training_batches(c, cfg, 2)]
    assert a == b
    assert a != other


def test_fake_pairs_differ_from_real_at_same_slot():
    c = corpus(n=20, turns=5)
    real, fake = training.labeled_pairs(c, seed=0, epoch=1)
    assert len(real) == len(fake)
    for r, f in zip(real, fake):
        assert r.index == f.index and r.session_id == f.session_id
        same = (np.array_equal(r.leading.frames, f.leading.frames)
                and np.array_equal(r.responding.frames, f.responding.frames))
        assert not same


def test_batches_empty_corpus():
    with pytest.raises(EmptyCorpusError):
        make_training_batches([], TrainConfig())


def test_evaluate_loss_zero_logits():
    batch = [(stub_pair(0.0), 1), (stub_pair(0.0), 0)] * 3
    loss, acc = evaluate_loss(LogitFromFrames(), [batch])
    assert loss == pytest.approx(math.log(2), abs=1e-7)
    assert acc == 0.5


def test_evaluate_loss_perfect_logits():
    batch = [(stub_pair(10.0), 1), (stub_pair(-10.0), 0)]
    loss, acc = evaluate_loss(LogitFromFrames(), [batch, batch])
    assert acc == 1.0 and loss < 1e-3


def test_evaluate_loss_hand_bce():
    logits, labels = [0.3, -1.2, 2.0], [1, 0, 0]
    sig = lambda x: 1 / (1 + math.exp(-x))  # noqa: E731
    expected = -sum(y * math.log(sig(l)) + (1 - y) * math.log(1 - sig(l)) for l, y in zip(logits, labels)) / 3
    loss, acc = evaluate_loss(LogitFromFrames(), [[(stub_pair(l), y) for l, y in zip(logits, labels)]])
    assert loss == pytest.approx(expected, rel=1e-6)
    assert acc == pytest.approx(2 / 3)


def test_evaluate_loss_empty():
    with pytest.raises(EmptyInputError):
        evaluate_loss(LogitFromFrames(), [])


def test_untrained_loss_near_ln2():
    model = build_model(TINY, seed=0)
    loss, _ = evaluate_loss(model, make_training_batches(corpus(), TrainConfig()))
    assert abs(loss - math.log(2)) < 0.1


def test_early_stopping_worsening():
    stop = EarlyStopping(10)
    for epoch in range(1, 50):
        _, done = stop.step(epoch, float(epoch))
        if done:
            break
    assert epoch == 11 and stop.best_epoch == 1


def test_train_stops_at_epoch_11_on_worsening_val(monkeypatch):
    losses = iter(float(i) for i in range(1, 100))
    monkeypatch.setattr(training, "evaluate_loss", lambda m, b: (next(losses), 0.5))
    _, history = train(build_model(TINY), corpus(n=5, turns=4), TrainConfig(patience=10, max_epochs=50, val_fraction=0.2))
    assert len(history) == 11


def test_session_level_split():
    c = corpus(n=20)
    tr, va = split_sessions(c, 0.25, seed=3)
    ids_tr, ids_va = {x.session_id for x in tr}, {x.session_id for x in va}
    assert ids_tr.isdisjoint(ids_va)
    assert ids_tr | ids_va == {x.session_id for x in c}
    assert len(ids_va) == 5


def test_train_reproducible():
    c = corpus(n=6, turns=5)
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=2, val_fraction=0.34, seed=1)
    m1, h1 = train(build_model(dataclasses.replace(TINY, dropout=0.2), seed=0), c, cfg)
    m2, h2 = train(build_model(dataclasses.replace(TINY, dropout=0.2), seed=0), c, cfg)
    strip = lambda h: [dataclasses.replace(r, wall_time=0.0) for r in h]  # noqa: E731
    assert strip(h1) == strip(h2)
    for t1, t2 in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(t1, t2)


def test_train_records_and_checkpoint(tmp_path):
    c = corpus(n=6, turns=5)
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=3, val_fraction=0.34, checkpoint_dir=str(tmp_path))
    model, history = train(build_model(TINY), c, cfg)
    assert [r.epoch for r in history] == [1, 2, 3]
    assert all(r.train_loss >= 0 and r.val_loss >= 0 and math.isfinite(r.val_loss) for r in history)
    loaded, extra = load_checkpoint(tmp_path / "best.ckpt")
    best = min(history, key=lambda r: r.val_loss)
    assert extra["epoch"] == best.epoch
    for t1, t2 in zip(loaded.state_dict().values(), model.state_dict().values()):
        assert torch.equal(t1, t2)


def test_train_dimension_mismatch():
    with pytest.raises(ConfigError):
        train(build_model(TINY), corpus(dim=5), TrainConfig())


def test_train_numeric_failure_keeps_checkpoint(tmp_path):
    c = corpus(n=6, turns=5)
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=1, val_fraction=0.34, checkpoint_dir=str(tmp_path))
    model, _ = train(build_model(TINY), c, cfg)
    before = (tmp_path / "best.ckpt").read_bytes()
    with torch.no_grad():
        model.head[0].weight.fill_(float("nan"))
    with pytest.raises(NumericFailure):
        train(model, c, cfg)
    assert (tmp_path / "best.ckpt").read_bytes() == before


@pytest.mark.slow
def test_overfit_small_corpus():
    c = corpus(n=5, turns=6)
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=200, patience=1000, val_fraction=0.2, seed=0)
    _, history = train(build_model(TINY, seed=0), c, cfg)
    assert len(history) == 200
    assert history[-1].train_loss < history[0].train_loss
