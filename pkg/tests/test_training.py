import csv
import math

import pytest
import torch

from weakloc import data as D
from weakloc import networks as N
from weakloc import synthetic
from weakloc import training as T

GEN = N.GeneratorConfig(channels=(4, 8, 8), convs_per_level=1)
DISC = N.DiscriminatorConfig(channels=(4, 8), convs_per_level=1, critic_channels=8, cls_channels=(8,), cls_hidden=8)


@pytest.fixture(scope="module")
def handles(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_ds")
    synthetic.generate_dataset(10, 2, 2, seed=1, out_dir=root, size=16)
    m = root / "manifest.csv"
    return D.load_synthetic(m, "train"), D.load_synthetic(m, "val")


def _config(**kw):
    base = dict(batch_size=4, max_epochs=1, seed=0, checkpoint_interval=1, eval_batch_size=8)
    base.update(kw)
    return T.TrainConfig(**base)


def _batches(handle, n=5, seed=0):
    return list(D.make_batches(handle, 4, seed))[:n]


def _params(model):
    return [p.detach().clone() for p in model.parameters()]


def test_five_critic_updates_per_generator_update(handles):
    train, _ = handles
    cfg = _config()
    state = T.init_state(cfg, GEN, DISC)
    report = T.train_step(state, _batches(train), cfg)
    assert (state.d_updates, state.g_updates, state.step) == (5, 1, 1)
    assert set(report.as_dict()) == {"adv_d", "gp", "cls_d", "total_d", "adv_g", "id", "rec", "cls_g", "total_g"}
    with pytest.raises(ValueError):
        T.train_step(state, _batches(train, 4), cfg)


def test_zero_learning_rate_freezes_parameters(handles):
    train, _ = handles
    cfg = _config(learning_rate=0.0)
    state = T.init_state(cfg, GEN, DISC)
    g0, d0 = _params(state.generator), _params(state.discriminator)
    T.train_step(state, _batches(train), cfg)
    assert all(torch.equal(a, b) for a, b in zip(g0, state.generator.parameters()))
    assert all(torch.equal(a, b) for a, b in zip(d0, state.discriminator.parameters()))


def test_critic_step_leaves_generator_untouched(handles):
    train, _ = handles
    cfg = _config()
    state = T.init_state(cfg, GEN, DISC)
    g0, d0 = _params(state.generator), _params(state.discriminator)
    T.discriminator_step(state, _batches(train, 1)[0], cfg)
    assert all(torch.equal(a, b) for a, b in zip(g0, state.generator.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(d0, state.discriminator.parameters()))


def test_generator_step_leaves_critic_untouched(handles):
    train, _ = handles
    cfg = _config()
    state = T.init_state(cfg, GEN, DISC)
    g0, d0 = _params(state.generator), _params(state.discriminator)
    T.generator_step(state, _batches(train, 1)[0], cfg)
    assert all(torch.equal(a, b) for a, b in zip(d0, state.discriminator.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(g0, state.generator.parameters()))
    assert all(p.requires_grad for p in state.discriminator.parameters())


def test_non_finite_loss_raises(handles):
    train, _ = handles
    cfg = _config()
    state = T.init_state(cfg, GEN, DISC)
    batch = _batches(train, 1)[0]
    batch.images[0, 0, 0, 0] = float("nan")
    with pytest.raises(T.NumericalDivergence):
        T.discriminator_step(state, batch, cfg)


def test_training_is_deterministic(handles, tmp_path):
    train, val = handles
    cfg = _config(max_epochs=2)
    _, rows_a = T.train(cfg, train, val, run_dir=tmp_path / "a", gcfg=GEN, dcfg=DISC)
    _, rows_b = T.train(cfg, train, val, run_dir=tmp_path / "b", gcfg=GEN, dcfg=DISC)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
    assert strip(rows_a) == strip(rows_b)
    assert len(rows_a) == 2  # 5 balanced batches per epoch -> one generator update


def test_zero_epochs_returns_initial_state(handles, tmp_path):
    train, val = handles
    best, rows = T.train(_config(max_epochs=0), train, val, run_dir=tmp_path, gcfg=GEN, dcfg=DISC)
    assert rows == [] and best.epoch == 0 and best.step == 0
    assert (tmp_path / "best.ckpt").exists()


def test_run_directory_contents(handles, tmp_path):
    train, val = handles
    T.train(_config(max_epochs=2), train, val, run_dir=tmp_path, gcfg=GEN, dcfg=DISC)
    for name in ("train_log.csv", "val_log.csv", "best.ckpt", "checkpoints/last.ckpt", "checkpoints/epoch_0002.ckpt"):
        assert (tmp_path / name).exists(), name
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == T.LOG_COLUMNS and len(rows) == 2
    with open(tmp_path / "val_log.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_checkpoint_round_trip(handles, tmp_path):
    train, _ = handles
    cfg = _config(learning_rate=3e-4)
    state = T.init_state(cfg, GEN, DISC)
    T.train_step(state, _batches(train), cfg)
    T.save_checkpoint(T.snapshot(state, cfg), tmp_path / "c.ckpt")
    restored, cfg2 = T.restore(T.load_checkpoint(tmp_path / "c.ckpt"))
    assert cfg2 == cfg
    for a, b in zip(state.generator.state_dict().values(), restored.generator.state_dict().values()):
        assert torch.equal(a, b)
    for a, b in zip(state.discriminator.parameters(), restored.discriminator.parameters()):
        assert torch.equal(a, b)
    assert (restored.step, restored.d_updates, restored.g_updates) == (1, 5, 1)
    assert torch.equal(restored.rng.get_state(), state.rng.get_state())


def test_checkpoint_version_mismatch(tmp_path):
    cfg = _config()
    ckpt = T.snapshot(T.init_state(cfg, GEN, DISC), cfg)
    ckpt.version = T.CHECKPOINT_VERSION + 1
    T.save_checkpoint(ckpt, tmp_path / "c.ckpt")
    with pytest.raises(T.VersionMismatch):
        T.load_checkpoint(tmp_path / "c.ckpt")
    with pytest.raises(FileNotFoundError):
        T.load_checkpoint(tmp_path / "missing.ckpt")


def test_resume_reproduces_uninterrupted_run(handles, tmp_path):
    train, val = handles
    _, full = T.train(_config(max_epochs=3), train, val, run_dir=tmp_path / "full", gcfg=GEN, dcfg=DISC)
    T.train(_config(max_epochs=1), train, val, run_dir=tmp_path / "part", gcfg=GEN, dcfg=DISC)
    _, rest = T.train(
        _config(max_epochs=3), train, val, run_dir=tmp_path / "part",
        resume_from=tmp_path / "part" / "checkpoints" / "last.ckpt",
    )
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
    assert strip(rest) == strip(full)[1:]
    with open(tmp_path / "part" / "train_log.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3


def test_config_dict_round_trip():
    cfg = _config(gp_partner="translated", weights=T.L.LossWeights(id=3.0))
    assert T.TrainConfig.from_dict(cfg.as_dict()) == cfg


def test_validation_score_uses_dice_then_accuracy(handles):
    from pathlib import Path

    train, _ = handles
    cfg = _config()
    state = T.init_state(cfg, GEN, DISC)
    score, metrics = T.validation_score(state, train, cfg)
    assert score == metrics["val_dice"]
    fixture = Path(__file__).parent / "fixtures" / "external"
    external = D.load_external(fixture, fixture / "labels.csv", resize_to=(16, 16))
    score, metrics = T.validation_score(state, external, cfg)
    assert metrics["val_dice"] is None and score == metrics["val_accuracy"]
