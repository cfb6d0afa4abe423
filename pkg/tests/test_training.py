import math

import numpy as np
import pytest

from vmrec.features import split_dataset
from vmrec.model import BranchSpec
from vmrec.numerics import RngStream
from vmrec.synth import SynthConfig, generate_synthetic_dataset
from vmrec.training import (
    HISTORY_COLUMNS,
    TrainConfig,
    TrainingDiverged,
    fresh_model,
    load_train_config,
    make_bce_batch,
    train,
    train_on_subsample,
    validation_loss,
)

from conftest import CONFIGS


def data(n=120, val=20, seed=0):
    d = generate_synthetic_dataset(SynthConfig(n_pairs=n, music_dim=12, video_dim=10, latent_dim=4, seed=seed))
    return split_dataset(d.manifest, val, RngStream(seed))


def model_for(ds, cfg):
    return fresh_model(BranchSpec(ds.music_dim, (16, 8)), BranchSpec(ds.video_dim, (8,)), cfg, (8, 1))


def cfg(**kw):
    base = dict(lr=1e-2, batch_size=20, max_epochs=3, patience=0, dropout_p=0.1)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="hinge")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(dropout_p=1.0)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lr": 1e-3, "learning_rate": 1})
    with pytest.raises(ValueError, match="unknown loss"):
        TrainConfig.from_dict({"loss": {"alpha": 1}})


def test_config_dict_round_trip_and_shipped_configs():
    c = cfg(mode="bce")
    assert c.mode == "BCE" and TrainConfig.from_dict(c.to_dict()) == c
    for p in sorted(CONFIGS.glob("*_tl.json")) + sorted(CONFIGS.glob("*_bce.json")):
        load_train_config(p)


def test_early_stopping_only_for_tl():
    assert TrainConfig(patience=3).early_stopping
    assert not TrainConfig(mode="BCE", patience=3).early_stopping
    assert not TrainConfig(patience=0).early_stopping


def test_bce_batch_balanced_and_deranged():
    bb = make_bce_batch(7, RngStream(0))
    assert bb.labels.sum() == 7 and len(bb.labels) == 14
    pos = bb.labels == 1
    assert np.array_equal(bb.music_rows[pos], bb.video_rows[pos])
    assert np.all(bb.music_rows[~pos] != bb.video_rows[~pos])
    with pytest.raises(ValueError):
        make_bce_batch(1, RngStream(0))


def test_zero_epochs_returns_initial_model():
    ds = data()
    c = cfg(max_epochs=0)
    m0 = model_for(ds, c)
    m, hist = train(m0, ds, c)
    assert m is m0 and hist.records == []


@pytest.mark.parametrize("mode", ["TL", "BCE"])
def test_training_reduces_loss(mode):
    ds = data()
    c = cfg(mode=mode, max_epochs=8, lr=5e-3)
    m0 = model_for(ds, c)
    before = validation_loss(m0, ds.subset("val"), c)
    m, hist = train(m0, ds, c)
    assert len(hist.records) == 8 and [r.epoch for r in hist.records] == list(range(1, 9))
    assert validation_loss(m, ds.subset("val"), c) < before
    assert all(math.isfinite(r.train_loss) for r in hist.records)


def test_training_is_deterministic():
    ds = data()
    c = cfg()
    a, ha = train(model_for(ds, c), ds, c)
    b, hb = train(model_for(ds, c), ds, c)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert [r.train_loss for r in ha.records] == [r.train_loss for r in hb.records]


def test_val_every_and_history_csv(tmp_path):
    ds = data()
    c = cfg(max_epochs=5, val_every=2)
    _, hist = train(model_for(ds, c), ds, c)
    assert [r.epoch for r in hist.records] == [2, 4, 5]
    hist.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS) and len(lines) == 4
    assert lines[1].endswith(",")
    hist.write_csv(tmp_path / "t.csv", timing=True)
    assert not (tmp_path / "t.csv").read_text().splitlines()[1].endswith(",")


def test_early_stopping_returns_best_model():
    ds = data()
    c = cfg(max_epochs=40, patience=2, lr=5e-2)
    m, hist = train(model_for(ds, c), ds, c)
    losses = [r.val_loss for r in hist.records]
    best = min(losses)
    assert validation_loss(m, ds.subset("val"), c) == pytest.approx(best, rel=1e-12)
    if len(losses) < 40:
        assert losses.index(best) == len(losses) - 1 - 2


def test_early_stopping_needs_val_split():
    ds = data(val=0)
    with pytest.raises(ValueError, match="validation"):
        train(model_for(ds, cfg(patience=2)), ds, cfg(patience=2))


def test_batch_larger_than_train_set():
    ds = data(n=30, val=20)
    with pytest.raises(ValueError, match="batch"):
        train(model_for(ds, cfg()), ds, cfg())


def test_divergence_is_reported(monkeypatch):
    import vmrec.training as tr

    real = tr.batch_loss_and_grads

    def poisoned(*a, **kw):
        loss, grads, buffers, comps = real(*a, **kw)
        return float("nan"), grads, buffers, comps

    monkeypatch.setattr(tr, "batch_loss_and_grads", poisoned)
    ds = data()
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(model_for(ds, cfg()), ds, cfg())


def test_subsample_training_uses_requested_size():
    ds = data(n=200, val=20)
    c = cfg(max_epochs=1)
    _, hist = train_on_subsample(model_for(ds, c), ds, c, 100)
    assert len(hist.records) == 1
