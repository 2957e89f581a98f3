"""NMSE evaluation, Doppler and horizon sweeps, and CSV reports.

Every predictor is called as ``predictor(dataset, t, horizon) -> (B, 2D)``:
it may look at frames ``0 .. t`` and the scenario vectors and must return a
prediction of frame ``t + horizon`` for every sample.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baseline, kernels, rng
from . import model as cvae
from .channel import DOPPLER_NORM_HZ, Dataset, GridConfig, build_dataset, speed_for_doppler

AXES = ("doppler_hz", "horizon_frames", "none")
PREDICTORS = ("cvae", "stale", "ar1", "recurrent", "zero")
CSV_HEADER = "axis,predictor,nmse_mean,nmse_stderr,n,seed"

SWEEP_CARRIER_HZ = 28e9
SWEEP_BANDWIDTH_HZ = 5e6
DEFAULT_DOPPLERS = tuple(float(f) for f in np.linspace(500.0, 5000.0, 10))
DEFAULT_HORIZONS = tuple(range(1, 11))
HORIZON_SWEEP_DOPPLER_HZ = 2500.0


class DegenerateInput(ValueError):
    """The reference vector has zero norm, so NMSE is undefined."""


def nmse(h, h_hat) -> float:
    """``||h - h_hat||^2 / ||h||^2`` for one real feature vector."""
    h = np.asarray(h, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    if h.shape != h_hat.shape:
        raise ValueError(f"length mismatch: {h.shape} vs {h_hat.shape}")
    ref = float(np.dot(h, h))
    if ref == 0.0:
        raise DegenerateInput("zero-norm target")
    d = h - h_hat
    return float(np.dot(d, d)) / ref


def nmse_rows(h, h_hat):
    """Per-row NMSE; rows with zero-norm targets come back as NaN."""
    h = np.asarray(h, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    if h.shape != h_hat.shape:
        raise ValueError(f"shape mismatch: {h.shape} vs {h_hat.shape}")
    ref = np.einsum("ij,ij->i", h, h)
    d = h - h_hat
    err = np.einsum("ij,ij->i", d, d)
    out = np.full(len(h), np.nan)
    ok = ref > 0
    out[ok] = err[ok] / ref[ok]
    return out, err, ref


# -- predictors -------------------------------------------------------------

def zero_predictor(d: Dataset, t: int, horizon: int):
    return baseline.predict_zero(d.features()[:, t])


def stale_predictor(d: Dataset, t: int, horizon: int):
    return baseline.predict_stale(d.features()[:, t], horizon)


def ar1_predictor(d: Dataset, t: int, horizon: int):
    return baseline.predict_ar1(d.features()[:, t], horizon, d.doppler_hz(), d.frame_duration_s())


def recurrent_predictor(models: dict):
    """Wrap per-horizon :class:`baseline.RecurrentParams` models."""

    def predict(d: Dataset, t: int, horizon: int):
        m = _pick(models, horizon, "recurrent")
        n = baseline.history_length(d.grid.F, horizon, m.config.unroll)
        if t + 1 < n:
            raise ValueError(f"offset {t} leaves fewer than {n} history frames")
        hist = baseline.histories(d.features(), t, n)
        return baseline.predict_recurrent(m, hist, d.conditioning(), horizon)

    return predict


def cvae_predictor(models: dict, n_samples: int = 16, seed: int = 0):
    """Wrap per-horizon :class:`model.CVAE` models; prediction is the mean of prior draws."""

    def predict(d: Dataset, t: int, horizon: int):
        m = _pick(models, horizon, "cvae")
        c = cvae.conditioning_for(d, t, horizon, m.config.mode)
        mean, _ = cvae.predict(m, c, n_samples, rng.stream(seed, rng.PREDICT, horizon))
        return mean

    return predict


def _pick(models, horizon, what):
    if horizon in models:
        return models[horizon]
    if None in models:
        return models[None]
    raise KeyError(f"no {what} model for horizon {horizon}")


# -- evaluation -------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    axis: float
    predictor: str
    nmse_mean: float
    nmse_stderr: float
    n: int
    seed: int
    pooled_nmse: float = math.nan
    excluded: int = 0


@dataclass
class EvalReport:
    sweep_axis: str
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sweep_axis not in AXES:
            raise ValueError(f"sweep axis must be one of {AXES}")

    def sorted(self) -> "EvalReport":
        order = {name: i for i, name in enumerate(PREDICTORS)}
        rows = sorted(self.rows, key=lambda r: (r.axis, order.get(r.predictor, len(order)), r.predictor))
        return EvalReport(self.sweep_axis, rows, dict(self.meta))

    def curve(self, predictor: str):
        """``(axis values, nmse means)`` for one predictor, in axis order."""
        rows = [r for r in self.sorted().rows if r.predictor == predictor]
        return np.array([r.axis for r in rows]), np.array([r.nmse_mean for r in rows])


def evaluate(predictor, name: str, test_set: Dataset, horizon: int, axis_value=0.0, seed: int = 0,
             t: int | None = None) -> EvalRow:
    """NMSE of predicting frame ``t + horizon`` from frames up to ``t``.

    ``t`` defaults to ``F - 1 - horizon`` so the target is the last stored
    frame. Reports the per-sample mean and its standard error, plus the pooled
    ratio ``sum ||h - h_hat||^2 / sum ||h||^2``. Zero-norm targets are
    excluded and counted.
    """
    F = test_set.grid.F
    if horizon < 0 or horizon >= F:
        raise ValueError(f"horizon {horizon} outside [0, {F - 1}] for {F} stored frames")
    if t is None:
        t = F - 1 - horizon
    if t < 0 or t + horizon >= F:
        raise ValueError(f"offset {t} with horizon {horizon} exceeds {F} stored frames")
    target = test_set.features()[:, t + horizon]
    pred = predictor(test_set, t, horizon)
    per, err, ref = nmse_rows(target, pred)
    ok = np.isfinite(per)
    n = int(ok.sum())
    if n == 0:
        raise DegenerateInput("every target in the test set has zero norm")
    vals = per[ok]
    mean = float(math.fsum(vals) / n)
    stderr = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    pooled = float(math.fsum(err[ok]) / math.fsum(ref[ok]))
    return EvalRow(float(axis_value), name, mean, stderr, n, int(seed), pooled, int(len(per) - n))


def _sweep_overrides(doppler_hz, horizon):
    return {"carrier_hz": SWEEP_CARRIER_HZ, "speed": speed_for_doppler(doppler_hz, SWEEP_CARRIER_HZ),
            "bandwidth_hz": SWEEP_BANDWIDTH_HZ, "horizon": int(horizon)}


def _run_points(points, work, threads):
    if threads > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            chunks = list(ex.map(work, points))
    else:
        chunks = [work(p) for p in points]
    return [row for rows in chunks for row in rows]


def sweep_doppler(grid: GridConfig, predictors: dict, count: int, seed: int,
                  dopplers=DEFAULT_DOPPLERS, horizon: int = 1, threads: int = 1) -> EvalReport:
    """One fresh test set per Doppler value (forced via speed at 28 GHz, 5 MHz bandwidth)."""
    for f in dopplers:
        if not 0.0 <= f <= DOPPLER_NORM_HZ:
            raise ValueError(f"Doppler {f} Hz not reachable with speeds up to 60 m/s at 28 GHz")

    def work(f):
        d = build_dataset(grid, count, seed, overrides=_sweep_overrides(f, horizon))
        return [evaluate(p, name, d, horizon, axis_value=f, seed=seed) for name, p in predictors.items()]

    rows = _run_points(list(dopplers), work, threads)
    meta = {"horizon": horizon, "carrier_hz": SWEEP_CARRIER_HZ, "bandwidth_hz": SWEEP_BANDWIDTH_HZ,
            "doppler_forced_via": "speed"}
    return EvalReport("doppler_hz", rows, meta).sorted()


def sweep_horizon(grid: GridConfig, predictors: dict, count: int, seed: int,
                  horizons=DEFAULT_HORIZONS, doppler_hz: float = HORIZON_SWEEP_DOPPLER_HZ,
                  threads: int = 1) -> EvalReport:
    """One fresh test set per horizon at a fixed Doppler frequency."""
    for h in horizons:
        if not 0 <= h < grid.F:
            raise ValueError(f"horizon {h} outside [0, {grid.F - 1}]")

    def work(h):
        d = build_dataset(grid, count, seed, overrides=_sweep_overrides(doppler_hz, h))
        return [evaluate(p, name, d, h, axis_value=h, seed=seed) for name, p in predictors.items()]

    rows = _run_points(list(horizons), work, threads)
    meta = {"doppler_hz": doppler_hz, "carrier_hz": SWEEP_CARRIER_HZ, "bandwidth_hz": SWEEP_BANDWIDTH_HZ,
            "doppler_forced_via": "speed"}
    return EvalReport("horizon_frames", rows, meta).sorted()


# -- reports ----------------------------------------------------------------

def format_csv(report: EvalReport) -> str:
    lines = [CSV_HEADER]
    for r in report.sorted().rows:
        lines.append(f"{r.axis!r},{r.predictor},{r.nmse_mean!r},{r.nmse_stderr!r},{r.n},{r.seed}")
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list:
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("not an NMSE report")
    rows = []
    for line in lines[1:]:
        a, p, m, s, n, seed = line.split(",")
        rows.append(EvalRow(float(a), p, float(m), float(s), int(n), int(seed)))
    return rows


def emit_report(report: EvalReport, path, extra_meta: dict | None = None):
    """Write the CSV and a ``<path>.meta.json`` sidecar; both are deterministic."""
    report = report.sorted()
    with open(path, "w", newline="") as fh:
        fh.write(format_csv(report))
    meta = {"sweep_axis": report.sweep_axis, "backend": kernels.BACKEND, **report.meta, **(extra_meta or {})}
    meta["rows"] = [{"axis": r.axis, "predictor": r.predictor, "pooled_nmse": r.pooled_nmse,
                     "excluded": r.excluded} for r in report.rows]
    with open(meta_path(path), "w") as fh:
        json.dump(_jsonable(meta), fh, sort_keys=True, indent=1)
        fh.write("\n")


def meta_path(path) -> str:
    return os.fspath(path) + ".meta.json"


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return _jsonable(dataclasses.asdict(x))
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x
