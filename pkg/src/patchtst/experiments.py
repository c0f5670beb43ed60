"""Benchmark, ablation and sweep drivers, naive baselines and CSV writers."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import ForecastData, SeriesTable, WindowSet, prepare_data
from .metrics import Metrics, metric_mse_mae
from .model import PatchTST
from .patching import num_patches
from .training import train

logger = logging.getLogger(__name__)


# -- baselines -------------------------------------------------------------

def repeat_last_forecast(x, T):
    """Copy the final look-back value over the horizon; ``x`` is ``[n, M, L]``."""
    return np.repeat(np.asarray(x)[..., -1:], T, axis=-1)


class ChannelOLS:
    """Per-channel least-squares map from ``L`` inputs (plus intercept) to ``T`` outputs."""

    def __init__(self):
        self.coef = None  # [M, L+1, T]

    def fit(self, windows: WindowSet, max_windows=20000):
        idx = np.arange(len(windows))
        if len(idx) > max_windows:
            idx = idx[np.linspace(0, len(idx) - 1, max_windows).astype(int)]
        x, y = windows.batch(idx)
        n, M, L = x.shape
        self.coef = np.empty((M, L + 1, y.shape[-1]))
        for m in range(M):
            design = np.hstack([x[:, m, :], np.ones((n, 1))])
            self.coef[m] = np.linalg.lstsq(design, y[:, m, :], rcond=None)[0]
        return self

    def predict(self, x):
        x = np.asarray(x)
        design = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
        return np.einsum("nml,mlt->nmt", design, self.coef)


def naive_baselines(data: ForecastData) -> dict:
    """Test-split metrics of the repeat-last and per-channel OLS baselines."""
    x, y = data.test.all()
    T = data.test.T
    ols = ChannelOLS().fit(data.train)
    return {
        "repeat_last": metric_mse_mae(repeat_last_forecast(x, T), y),
        "ols": metric_mse_mae(ols.predict(x), y),
    }


# -- CSV helpers -------------------------------------------------------------

def write_rows(path, rows, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])
    return path


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_predictions(path, forecast):
    """``forecast [M, T]`` as ``channel,step,value`` rows."""
    rows = [{"channel": m, "step": t, "value": float(forecast[m, t])}
            for m in range(forecast.shape[0]) for t in range(forecast.shape[1])]
    return write_rows(path, rows, ["channel", "step", "value"])


def write_attention(path, maps):
    """Averaged attention ``[M, N, N]`` as ``channel,query,key,weight`` rows."""
    rows = [{"channel": m, "query": i, "key": j, "weight": float(maps[m, i, j])}
            for m in range(maps.shape[0]) for i in range(maps.shape[1]) for j in range(maps.shape[2])]
    return write_rows(path, rows, ["channel", "query", "key", "weight"])


# -- single run --------------------------------------------------------------

def run_one(rc: RunConfig, table: SeriesTable):
    """Train one supervised model for ``rc``; returns ``(model, report, data)``."""
    data = prepare_data(table, rc.L, rc.T, rc.split_spec(), rc.standardize, rc.train_fraction)
    model = PatchTST(rc.model_config(table.n_channels), seed=rc.seed)
    model, report = train(model, data, rc.train_config())
    return model, report, data


def _cell_metrics(args):
    rc, table = args
    start = time.perf_counter()
    _, report, _ = run_one(rc, table)
    return Metrics(report.test_mse, report.test_mae), time.perf_counter() - start


def _map_cells(cells, parallel):
    if parallel > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_cell_metrics, cells))
    return [_cell_metrics(c) for c in cells]


# -- benchmark ---------------------------------------------------------------

def run_benchmark(rc: RunConfig, tables, horizons=None, baselines=True):
    """One row per (dataset, T): test MSE/MAE of the model and, optionally, baselines."""
    horizons = tuple(horizons or rc.horizons)
    rows = []
    for table in tables:
        if table is None:
            continue
        cells = [(rc.replace(T=T), table) for T in horizons]
        results = _map_cells(cells, rc.parallel)
        for T, (m, _) in zip(horizons, results):
            row = {"dataset": table.name, "T": T, "mse": m.mse, "mae": m.mae}
            if baselines:
                base = naive_baselines(prepare_data(table, rc.L, T, rc.split_spec(), rc.standardize))
                row.update(repeat_last_mse=base["repeat_last"].mse, ols_mse=base["ols"].mse)
            rows.append(row)
    return rows


BENCHMARK_COLUMNS = ["dataset", "T", "mse", "mae", "repeat_last_mse", "ols_mse"]


# -- ablation ----------------------------------------------------------------

VARIANTS = ("P+CI", "CI", "P", "original")
VARIANT_FIELDS = ("P", "S", "channel_mode")


def variant_configs(rc: RunConfig) -> dict:
    """The four patching / channel-independence variants of ``rc``."""
    configs = {
        "P+CI": rc.replace(channel_mode="independent"),
        "CI": rc.replace(P=1, S=1, channel_mode="independent"),
        "P": rc.replace(channel_mode="mixing"),
        "original": rc.replace(P=1, S=1, channel_mode="mixing"),
    }
    check_variants_differ_only(configs)
    return configs


def check_variants_differ_only(configs: dict):
    base = asdict(next(iter(configs.values())))
    for name, c in configs.items():
        diff = {k for k, v in asdict(c).items() if base[k] != v}
        if not diff <= set(VARIANT_FIELDS):
            raise AssertionError(f"variant {name} differs in {sorted(diff - set(VARIANT_FIELDS))}")


def estimate_memory_mb(rc: RunConfig, n_channels: int) -> float:
    """Rough peak activation memory of one training step."""
    N = num_patches(rc.L, rc.P, rc.S)
    rows = rc.batch_size * (n_channels if rc.channel_mode == "independent" else 1)
    per_layer = rows * (4 * rc.heads * N * N + N * (12 * rc.d_model + 3 * rc.d_ff))
    return 8.0 * rc.layers * per_layer / 2**20


def run_ablation(rc: RunConfig, table: SeriesTable, variants=VARIANTS):
    """One row per variant; rows over the memory budget are marked '-'."""
    configs = variant_configs(rc)
    rows, cells, keys = {}, [], []
    for name in variants:
        c = configs[name]
        row = {"variant": name, "P": c.P, "S": c.S, "channel_mode": c.channel_mode,
               "N": num_patches(c.L, c.P, c.S)}
        if estimate_memory_mb(c, table.n_channels) > rc.memory_budget_mb:
            row.update(mse="-", mae="-")
        else:
            cells.append((c, table))
            keys.append(name)
        rows[name] = row
    for name, (m, _) in zip(keys, _map_cells(cells, rc.parallel)):
        rows[name].update(mse=m.mse, mae=m.mae)
    return [rows[n] for n in variants]


ABLATION_COLUMNS = ["variant", "P", "S", "channel_mode", "N", "mse", "mae"]


# -- sweeps ------------------------------------------------------------------

SWEEP_AXES = {
    "look_back": lambda rc, v: rc.replace(L=int(v)),
    "patch_len": lambda rc, v: rc.replace(P=int(v), S=int(v)),
    "train_fraction": lambda rc, v: rc.replace(train_fraction=float(v)),
    "seed": lambda rc, v: rc.replace(seed=int(v)),
}

SEEDS = (2019, 2020, 2021, 2022, 2023)


def run_sweep(rc: RunConfig, table: SeriesTable, axis: str, values, timing=False):
    """One training run per axis value.

    The seed axis appends a ``mean`` row whose ``mse_std``/``mae_std`` hold
    the standard deviation across seeds. ``timing`` adds a wall-clock column
    (which makes the CSV differ between reruns).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    if not values:
        raise ValueError("sweep needs at least one value")
    cells = [(SWEEP_AXES[axis](rc, v), table) for v in values]
    results = _map_cells(cells, rc.parallel)
    rows = []
    for v, (m, secs) in zip(values, results):
        row = {"axis": axis, "value": v, "mse": m.mse, "mae": m.mae}
        if timing:
            row["wall_seconds"] = secs
        rows.append(row)
    if axis == "seed":
        mses = np.array([r["mse"] for r in rows])
        maes = np.array([r["mae"] for r in rows])
        rows.append({"axis": axis, "value": "mean", "mse": float(mses.mean()), "mae": float(maes.mean()),
                     "mse_std": float(mses.std()), "mae_std": float(maes.std())})
    return rows


def sweep_columns(axis, timing=False):
    cols = ["axis", "value", "mse", "mae"]
    if axis == "seed":
        cols += ["mse_std", "mae_std"]
    if timing:
        cols.append("wall_seconds")
    return cols
