import numpy as np
import pytest

from helpers import TINY_MODEL, TINY_SSL, TINY_TRAIN, tiny_data
from patchtst import autodiff as ad
from patchtst.errors import ConfigError, ShapeError, TrainingError
from patchtst.model import PatchTST
from patchtst.patching import PatchMask, sample_mask
from patchtst.training import (Adam, TrainConfig, finetune_lp_then_ft, linear_probe, pretrain,
                               pretrain_loss, supervised_loss, train, transfer)


def test_supervised_loss_value():
    pred = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    loss = supervised_loss(pred, np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert loss.item() == pytest.approx((4 + 9 + 16) / 4)
    ad.backward(loss)
    np.testing.assert_allclose(pred.grad, [[0, 1], [1.5, 2]])


def test_masked_loss_hand_value_and_zero_visible_grad(rng):
    recon = ad.Tensor(rng.standard_normal((1, 2, 3, 4)), requires_grad=True)
    target = rng.standard_normal((1, 2, 3, 4))
    masked = np.array([[True, False, False, True], [False, False, True, False]])
    loss = pretrain_loss(recon, target, PatchMask(masked, 0.4))
    sel = np.broadcast_to(masked.reshape(1, 2, 1, 4), recon.shape)
    assert loss.item() == pytest.approx(((recon.data - target)[sel] ** 2).mean(), rel=1e-14)
    ad.backward(loss)
    assert np.all(recon.grad[~sel] == 0.0)
    assert np.all(recon.grad[sel] != 0.0)


def test_full_recon_loss_equals_mse(rng):
    r, tg = rng.standard_normal((1, 1, 2, 5)), rng.standard_normal((1, 1, 2, 5))
    loss = pretrain_loss(ad.Tensor(r), tg, PatchMask(np.ones((1, 5), bool), 1.0), masked_only=False)
    assert loss.item() == pytest.approx(((r - tg) ** 2).mean())


def test_empty_mask_is_an_error(rng):
    with pytest.raises(TrainingError):
        pretrain_loss(ad.Tensor(np.zeros((1, 1, 2, 5))), np.zeros((1, 1, 2, 5)),
                      PatchMask(np.zeros((1, 5), bool), 0.0))


def test_adam_first_step_is_lr_sized():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_adam_minimises_quadratic():
    p = ad.Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ad.backward(ad.tsum(ad.square(p)))
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(schedule="bogus")
    with pytest.raises(ConfigError):
        TrainConfig(mask_ratio=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)


def test_training_reduces_loss_and_is_deterministic():
    data = tiny_data()
    cfg = TINY_TRAIN.replace(epochs=4)
    m1, r1 = train(PatchTST(TINY_MODEL, seed=3), data, cfg)
    m2, r2 = train(PatchTST(TINY_MODEL, seed=3), data, cfg)
    assert r1.train_loss[-1] < r1.train_loss[0]
    assert r1.train_loss == r2.train_loss and r1.val_loss == r2.val_loss
    assert m1.params.fingerprint() == m2.params.fingerprint()
    assert r1.best_epoch == int(np.argmin(r1.val_loss))
    assert np.isfinite(r1.test_mse)


def test_best_validation_parameters_restored():
    data = tiny_data()
    model, report = train(PatchTST(TINY_MODEL, seed=3), data, TINY_TRAIN.replace(epochs=3, learning_rate=0.05))
    from patchtst.training import evaluate
    assert evaluate(model, data.val).mse == pytest.approx(min(report.val_loss), rel=1e-12)


def test_patience_zero_runs_all_epochs():
    data = tiny_data()
    _, r = train(PatchTST(TINY_MODEL, seed=3), data,
                 TINY_TRAIN.replace(epochs=6, patience=0, learning_rate=0.3))
    assert r.epochs_run == 6


def test_early_stopping_with_patience():
    data = tiny_data()
    _, r = train(PatchTST(TINY_MODEL, seed=3), data,
                 TINY_TRAIN.replace(epochs=40, patience=1, learning_rate=0.3))
    assert r.epochs_run <= r.best_epoch + 2 < 40


def test_max_steps_cap():
    data = tiny_data()
    _, r = train(PatchTST(TINY_MODEL, seed=3), data, TINY_TRAIN.replace(epochs=5, max_steps=3))
    assert r.steps == 3 and r.epochs_run == 1


def test_nan_loss_raises():
    data = tiny_data()
    m = PatchTST(TINY_MODEL, seed=3)
    m.params["head.b"].data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(m, data, TINY_TRAIN)


def test_pretrain_then_probe_freezes_trunk():
    data = tiny_data()
    model, rep = pretrain(PatchTST(TINY_SSL, seed=1), data, TINY_TRAIN)
    assert rep.epochs_run == 2 and all(np.isfinite(rep.val_loss))
    trunk = model.params.trunk_names()
    before = model.params.fingerprint(trunk)
    probed, prep = linear_probe(model, data, TINY_TRAIN, epochs=2)
    assert probed.params.fingerprint(trunk) == before
    assert prep.stage_boundaries == [2]
    for n in model.params.names():
        assert model.params[n].requires_grad


def test_lp_then_ft_stage_boundaries():
    data = tiny_data()
    model, _ = pretrain(PatchTST(TINY_SSL, seed=1), data, TINY_TRAIN.replace(epochs=1))
    cfg = TINY_TRAIN.replace(lp_epochs=2, ft_epochs=3, patience=0)
    trunk = model.params.trunk_names()
    before = model.params.fingerprint(trunk)
    tuned, rep = finetune_lp_then_ft(model, data, cfg)
    assert rep.stage_boundaries == [2, 5]
    assert rep.epochs_run == 5
    assert tuned.params.fingerprint(trunk) != before


def test_zero_epoch_stages():
    data = tiny_data()
    model, _ = pretrain(PatchTST(TINY_SSL, seed=1), data, TINY_TRAIN.replace(epochs=1))
    trunk = model.params.trunk_names()
    before = model.params.fingerprint(trunk)
    tuned, rep = finetune_lp_then_ft(model, data, TINY_TRAIN.replace(lp_epochs=2, ft_epochs=0))
    assert rep.stage_boundaries == [2, 2]
    assert tuned.params.fingerprint(trunk) == before
    _, rep = finetune_lp_then_ft(model, data, TINY_TRAIN.replace(lp_epochs=0, ft_epochs=2))
    assert rep.stage_boundaries == [0, 2]


def test_transfer_to_different_channel_count():
    src_data = tiny_data(channels=5)
    model, _ = pretrain(PatchTST(TINY_SSL, seed=1), src_data, TINY_TRAIN.replace(epochs=1))
    tgt = tiny_data(channels=3, seed=9)
    tuned, rep = transfer(model, tgt, TINY_TRAIN.replace(lp_epochs=1, ft_epochs=1))
    assert tuned.predict(tgt.test[0].x[None]).shape == (1, 3, 8)
    with pytest.raises(ShapeError, match="patch length"):
        transfer(model, tgt, TINY_TRAIN, P=8)


def test_probe_rejects_lookback_mismatch():
    model = PatchTST(TINY_SSL, seed=1)
    with pytest.raises(ShapeError):
        linear_probe(model, tiny_data(L=32), TINY_TRAIN)


def test_pretrain_rejects_overlap_and_forecast_head():
    data = tiny_data()
    with pytest.raises(ConfigError):
        pretrain(PatchTST(TINY_MODEL, seed=1), data, TINY_TRAIN)


def test_masked_only_training_ignores_visible_targets(rng):
    m = PatchTST(TINY_SSL, seed=1)
    x = rng.standard_normal((2, 2, 24))
    mask = sample_mask(4, TINY_SSL.N, 0.5, rng)
    recon, target, _ = m.forward_pretrain(x, mask=mask)
    bumped = target.copy()
    vis = ~mask.masked.reshape(2, 2, 1, -1).repeat(4, axis=2)
    bumped[vis] += 100.0
    a = pretrain_loss(recon, target, mask).item()
    b = pretrain_loss(recon, bumped, mask).item()
    assert a == b


def test_mean_imputation_baseline_matches_hand_computation():
    from patchtst.data import instance_normalize
    from patchtst.patching import mask_rng
    from patchtst.training import mean_imputation_mse, reconstruction_mse
    data = tiny_data()
    model = PatchTST(TINY_SSL, seed=1)
    x, _ = data.test.batch(np.arange(len(data.test)))
    recon, target, mask = model.forward_pretrain(x, ratio=0.4, rng=mask_rng(3, 10**6, 0))
    _, mu, sd = instance_normalize(x)
    guess = (-mu / (sd + 1e-5))[..., None, None]
    sel = np.broadcast_to(mask.masked.reshape(x.shape[0], x.shape[1], 1, -1), target.shape)
    expected = ((guess - target) ** 2)[sel].mean()
    got = mean_imputation_mse(model, data.test, 0.4, seed=3, batch_size=len(data.test))
    assert got == pytest.approx(expected, rel=1e-12)
    assert np.isfinite(reconstruction_mse(model, data.test, 0.4, seed=3))
