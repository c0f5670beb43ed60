"""Training loops: supervised, masked pretraining, linear probing, LP->FT and transfer."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import INSTANCE_EPS, ForecastData, WindowSet, instance_normalize
from .errors import ConfigError, ShapeError, TrainingError
from .metrics import Metrics, metric_mse_mae
from .model import FORECAST, RECONSTRUCT, ModelConfig, PatchTST, with_head
from .patching import NONOVERLAP, PatchMask, mask_count, mask_rng

logger = logging.getLogger(__name__)

SCHEDULES = ("supervised", "pretrain", "linear_probe", "lp_then_ft")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5  # <= 0 disables early stopping
    seed: int = 2021
    schedule: str = "supervised"
    mask_ratio: float = 0.4
    train_fraction: float = 1.0
    probe_epochs: int = 20
    lp_epochs: int = 10
    ft_epochs: int = 20
    loss_space: str = "raw"  # raw: loss on de-normalised output; normalized: in instance-norm space
    recon_loss: str = "masked"  # masked | all
    max_steps: int = 0  # 0 = no cap
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in [0, 1]")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if min(self.probe_epochs, self.lp_epochs, self.ft_epochs) < 0:
            raise ConfigError("stage epoch counts must be non-negative")
        if self.loss_space not in ("raw", "normalized"):
            raise ConfigError(f"loss_space must be raw or normalized, got {self.loss_space!r}")
        if self.recon_loss not in ("masked", "all"):
            raise ConfigError(f"recon_loss must be masked or all, got {self.recon_loss!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")

    def replace(self, **kw):
        return TrainConfig(**{**asdict(self), **kw})


@dataclass
class TrainReport:
    seed: int
    schedule: str = "supervised"
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stage_boundaries: list = field(default_factory=list)
    steps: int = 0
    test_mse: float = math.nan
    test_mae: float = math.nan
    wall_seconds: float = 0.0

    @property
    def epochs_run(self):
        return len(self.train_loss)

    def extend(self, other: "TrainReport"):
        offset = self.epochs_run
        self.train_loss += other.train_loss
        self.val_loss += other.val_loss
        if other.best_epoch >= 0:
            self.best_epoch = offset + other.best_epoch
        self.steps += other.steps
        self.wall_seconds += other.wall_seconds

    def to_csv(self, path):
        """Per-epoch losses plus a ``# summary`` line. Wall-clock time is left out
        so reruns are byte-identical."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
                w.writerow([i, repr(tr), repr(va)])
            stages = ";".join(str(b) for b in self.stage_boundaries)
            fh.write(f"# summary schedule={self.schedule} best_epoch={self.best_epoch} "
                     f"test_mse={self.test_mse!r} test_mae={self.test_mae!r} "
                     f"seed={self.seed} steps={self.steps} stages={stages}\n")


# -- losses ----------------------------------------------------------------

def supervised_loss(pred, target):
    """Squared error averaged per element over batch, channels and horizon."""
    return ad.mse(pred, target)


def pretrain_loss(recon, target, mask: PatchMask, masked_only=True):
    """MSE over the elements of masked patches (all patches when ``masked_only`` is False).

    ``recon`` and ``target`` are ``[B, M, P, N]``; ``mask.masked`` is ``[B*M, N]``.
    """
    B, M, P, N = recon.shape
    if tuple(target.shape) != (B, M, P, N):
        raise ShapeError(f"target {tuple(target.shape)} does not match reconstruction {recon.shape}")
    if not masked_only:
        return ad.mse(recon, target)
    w = mask.masked.reshape(B, M, 1, N).astype(np.float64)
    count = w.sum() * P
    if count == 0:
        raise TrainingError("empty mask: the masked reconstruction objective is undefined")
    diff = ad.sub(recon, target)
    return ad.mul(ad.tsum(ad.mul(ad.square(diff), w)), 1.0 / count)


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- evaluation --------------------------------------------------------------

def predict_windows(model: PatchTST, windows: WindowSet, batch_size=256):
    preds, targets = [], []
    for lo in range(0, len(windows), batch_size):
        x, y = windows.batch(np.arange(lo, min(lo + batch_size, len(windows))))
        preds.append(model.predict(x, batch_size))
        targets.append(y)
    return np.concatenate(preds), np.concatenate(targets)


def evaluate(model: PatchTST, windows: WindowSet, batch_size=256) -> Metrics:
    pred, target = predict_windows(model, windows, batch_size)
    return metric_mse_mae(pred, target)


def _masked_sq_errors(model: PatchTST, windows: WindowSet, ratio, seed, batch_size, masked_only, predict):
    """Sum of squared errors and element count over a fixed mask stream (eval mode).

    ``predict(recon, target, x)`` returns the reconstruction to score, so the
    model and baselines see exactly the same masks.
    """
    was = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        with ad.no_grad():
            for step, lo in enumerate(range(0, len(windows), batch_size)):
                x, _ = windows.batch(np.arange(lo, min(lo + batch_size, len(windows))))
                recon, target, mask = model.forward_pretrain(x, ratio=ratio, rng=mask_rng(seed, 10**6, step))
                sq = (predict(recon.data, target, x) - target) ** 2
                if masked_only:
                    w = mask.masked.reshape(x.shape[0], x.shape[1], 1, -1)
                    sq = sq * w
                    n = w.sum() * model.cfg.P
                else:
                    n = sq.size
                total += float(sq.sum())
                count += int(n)
    finally:
        model.train(was)
    return total / count


def reconstruction_mse(model: PatchTST, windows: WindowSet, ratio, seed, batch_size=256,
                       masked_only=True):
    """Masked-patch reconstruction MSE with a fixed mask stream (eval mode)."""
    return _masked_sq_errors(model, windows, ratio, seed, batch_size, masked_only,
                             lambda recon, target, x: recon)


def mean_imputation_mse(model: PatchTST, windows: WindowSet, ratio, seed, channel_means=None,
                        batch_size=256):
    """Baseline for :func:`reconstruction_mse`: every masked value is imputed by
    its channel's train mean (0 for standardised data), mapped into the same
    instance-normalised space as the targets."""

    def predict(recon, target, x):
        means = np.zeros(x.shape[1]) if channel_means is None else np.asarray(channel_means, float)
        if model.cfg.instance_norm:
            _, mu, sd = instance_normalize(x)
            means = (means - mu) / (sd + INSTANCE_EPS)
        return np.broadcast_to(np.reshape(means, means.shape + (1, 1)), target.shape)

    return _masked_sq_errors(model, windows, ratio, seed, batch_size, True, predict)


# -- core loop ---------------------------------------------------------------

def _fit(model: PatchTST, trainable, train_set: WindowSet, epochs, cfg: TrainConfig,
         batch_loss, val_metric, train_mode=True, schedule="supervised") -> TrainReport:
    """Adam over ``trainable`` names; restores the minimum-validation parameters."""
    report = TrainReport(seed=cfg.seed, schedule=schedule)
    if epochs == 0:
        return report
    if len(train_set) == 0:
        raise TrainingError("no training windows")
    start = time.perf_counter()
    frozen = [n for n in model.params.names() if n not in trainable]
    model.set_trainable(frozen, False)
    model.set_trainable(trainable, True)
    opt = Adam(model.parameters(trainable), cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    best_val, best_params = math.inf, None
    try:
        for epoch in range(epochs):
            order = np.random.default_rng([cfg.seed, epoch, 0x5348]).permutation(len(train_set))
            model.train(train_mode)
            total, seen = 0.0, 0
            for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[lo:lo + cfg.batch_size]
                x, y = train_set.batch(idx)
                loss = batch_loss(model, x, y, epoch, step)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                total += value * len(idx)
                seen += len(idx)
                report.steps += 1
                if cfg.max_steps and report.steps >= cfg.max_steps:
                    break
            val = val_metric(model)
            report.train_loss.append(total / seen)
            report.val_loss.append(val)
            logger.info("%s epoch %d train %.6f val %.6f", schedule, epoch, total / seen, val)
            if val < best_val:
                best_val, best_params, report.best_epoch = val, model.params.copy(), epoch
            elif cfg.patience > 0 and epoch - report.best_epoch >= cfg.patience:
                break
            if cfg.max_steps and report.steps >= cfg.max_steps:
                break
    finally:
        model.set_trainable(frozen, True)
    if best_params is not None:
        model.params = best_params
    model.set_trainable(model.params.names(), True)
    report.wall_seconds = time.perf_counter() - start
    return report


def _supervised_batch_loss(cfg: TrainConfig):
    def fn(model, x, y, epoch, step):
        if cfg.loss_space == "normalized" and model.cfg.instance_norm:
            pred = model.forward(x, denormalize=False)
            mu, sd = model.last_stats
            y = (y - mu[..., None]) / (sd[..., None] + INSTANCE_EPS)
            return supervised_loss(pred, y)
        return supervised_loss(model.forward(x), y)
    return fn


def _val_mse(windows, cfg):
    return lambda model: evaluate(model, windows, cfg.eval_batch_size).mse


def _finish(model, data: ForecastData, report: TrainReport, cfg: TrainConfig):
    m = evaluate(model, data.test, cfg.eval_batch_size)
    report.test_mse, report.test_mae = m.mse, m.mae
    model.eval()
    return model, report


# -- schedules ---------------------------------------------------------------

def train(model: PatchTST, data: ForecastData, cfg: TrainConfig):
    """Supervised training of every parameter; returns ``(model, report)``."""
    if model.cfg.head_kind != FORECAST:
        raise ConfigError("supervised training needs a forecast head")
    report = _fit(model, model.params.names(), data.train, cfg.epochs, cfg,
                  _supervised_batch_loss(cfg), _val_mse(data.val, cfg), schedule="supervised")
    return _finish(model, data, report, cfg)


def pretrain(model: PatchTST, data: ForecastData, cfg: TrainConfig):
    """Masked-patch reconstruction pretraining of trunk and reconstruction head."""
    if model.cfg.head_kind != RECONSTRUCT:
        raise ConfigError("pretraining needs head_kind='reconstruct'")
    if model.cfg.patch_mode != NONOVERLAP:
        raise ConfigError("pretraining needs non-overlapping patches")
    if mask_count(model.cfg.N, cfg.mask_ratio) == 0:
        raise ConfigError(f"mask ratio {cfg.mask_ratio} masks no patches out of {model.cfg.N}")
    masked_only = cfg.recon_loss == "masked"

    def batch_loss(m, x, y, epoch, step):
        recon, target, mask = m.forward_pretrain(x, ratio=cfg.mask_ratio, rng=mask_rng(cfg.seed, epoch, step))
        return pretrain_loss(recon, target, mask, masked_only)

    def val_metric(m):
        return reconstruction_mse(m, data.val, cfg.mask_ratio, cfg.seed, cfg.eval_batch_size, masked_only)

    report = _fit(model, model.params.names(), data.train, cfg.epochs, cfg, batch_loss, val_metric,
                  schedule="pretrain")
    model.eval()
    return model, report


def _forecast_cfg(source: ModelConfig, T: int) -> ModelConfig:
    return source.replace(head_kind=FORECAST, T=T)


def attach_forecast_head(model: PatchTST, T: int, seed: int) -> PatchTST:
    """Copy of ``model``'s trunk with a freshly initialised forecast head for horizon ``T``."""
    return with_head(model, _forecast_cfg(model.cfg, T), seed)


def linear_probe(model: PatchTST, data: ForecastData, cfg: TrainConfig, epochs=None, fresh_head=True):
    """Train only the head on a frozen, eval-mode trunk."""
    T = data.train.T
    if data.train.L != model.cfg.L:
        raise ShapeError(f"trunk was built for L={model.cfg.L}, data windows have L={data.train.L}")
    if fresh_head or model.cfg.head_kind != FORECAST or model.cfg.T != T:
        model = attach_forecast_head(model, T, cfg.seed)
    epochs = cfg.probe_epochs if epochs is None else epochs
    report = _fit(model, model.params.head_names(), data.train, epochs, cfg,
                  _supervised_batch_loss(cfg), _val_mse(data.val, cfg), train_mode=False,
                  schedule="linear_probe")
    report.stage_boundaries = [report.epochs_run]
    return _finish(model, data, report, cfg)


def finetune_lp_then_ft(model: PatchTST, data: ForecastData, cfg: TrainConfig):
    """Linear probing for ``lp_epochs`` then end-to-end training for ``ft_epochs``."""
    model, report = linear_probe(model, data, cfg, epochs=cfg.lp_epochs)
    report.schedule = "lp_then_ft"
    stage2 = _fit(model, model.params.names(), data.train, cfg.ft_epochs, cfg,
                  _supervised_batch_loss(cfg), _val_mse(data.val, cfg), schedule="finetune")
    report.extend(stage2)
    report.stage_boundaries = [report.stage_boundaries[0], report.epochs_run]
    return _finish(model, data, report, cfg)


def transfer(source: PatchTST, data: ForecastData, cfg: TrainConfig, mode="lp_then_ft", P=None):
    """Reuse a pretrained trunk on another dataset (any channel count) with a new head."""
    if P is not None and P != source.cfg.P:
        raise ShapeError(f"source trunk uses patch length {source.cfg.P}, target wants {P}")
    if mode == "probe":
        return linear_probe(source, data, cfg)
    if mode == "lp_then_ft":
        return finetune_lp_then_ft(source, data, cfg)
    raise ConfigError(f"transfer mode must be probe or lp_then_ft, got {mode!r}")
