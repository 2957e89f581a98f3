"""Reference predictors: zero, stale CSI, scalar AR(1) and a small recurrent net.

The recurrent predictor is a simplified stand-in for learned recurrent
channel predictors: a tanh cell reads the last few observed frames (each
concatenated with the scenario vector) and a linear head emits the frame
``horizon`` steps after the last one. It is labeled ``simplified-recurrent``
in checkpoints and reports.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import j0

from . import formats, rng
from . import tensor as T
from .channel import Dataset, with_horizon
from .model import TrainHyper, _dense, _init_dense
from .tensor import NumericFailure, ParameterSet, ShapeError

ARCH_TAG = "simplified-recurrent"


def predict_zero(x_t):
    return np.zeros_like(np.asarray(x_t, dtype=np.float64))


def predict_stale(x_t, horizon=None):
    """The last observed frame, unchanged, for any horizon."""
    return np.array(x_t, dtype=np.float64)


def ar1_coefficient(doppler_hz, frame_s, horizon):
    """Jakes correlation ``J0(2 pi f_D tau horizon)`` between frames ``horizon`` apart."""
    return j0(2.0 * np.pi * np.asarray(doppler_hz) * np.asarray(frame_s) * horizon)


def predict_ar1(x_t, horizon, doppler_hz, frame_s):
    """One-tap Wiener predictor ``rho * x_t``; per-row ``rho`` for batched input."""
    x = np.asarray(x_t, dtype=np.float64)
    rho = np.asarray(ar1_coefficient(doppler_hz, frame_s, horizon), dtype=np.float64)
    if x.ndim == 2 and rho.ndim == 1:
        rho = rho[:, None]
    return rho * x


# -- recurrent baseline -----------------------------------------------------

@dataclass(frozen=True)
class RecurrentConfig:
    x_dim: int
    e_dim: int = 20
    hidden: int = 64
    unroll: int = 4


class RecurrentParams:
    """Input, recurrent and output maps of a tanh RNN plus its configuration."""

    def __init__(self, config: RecurrentConfig, params: ParameterSet, meta: dict | None = None):
        self.config = config
        self.params = params
        self.meta = dict(meta or {})

    @classmethod
    def init(cls, config: RecurrentConfig, seed: int = 0) -> "RecurrentParams":
        s = rng.stream(seed, rng.INIT)
        p = ParameterSet()
        _init_dense(p, s, "rnn.in", config.x_dim + config.e_dim, config.hidden)
        bound = 1.0 / math.sqrt(config.hidden)
        p.add("rnn.rec.W", s.uniform(-bound, bound, (config.hidden, config.hidden)))
        _init_dense(p, s, "rnn.out", config.hidden, config.x_dim)
        return cls(config, p)

    def zeroed(self) -> "RecurrentParams":
        p = ParameterSet.from_arrays({k: np.zeros_like(v) for k, v in self.params.arrays().items()})
        return RecurrentParams(self.config, p, self.meta)

    def copy(self) -> "RecurrentParams":
        return RecurrentParams(self.config, self.params.copy(), self.meta)

    def forward(self, history, e):
        """``history`` is ``(B, H, x_dim)`` oldest first, ``e`` is ``(B, e_dim)``."""
        history = np.asarray(history, dtype=np.float64)
        e = np.atleast_2d(np.asarray(e, dtype=np.float64))
        if history.ndim != 3 or history.shape[2] != self.config.x_dim or history.shape[1] < 1:
            raise ShapeError(f"history must be (B, H>=1, {self.config.x_dim}), got {history.shape}")
        if e.shape != (history.shape[0], self.config.e_dim):
            raise ShapeError(f"conditioning must be ({history.shape[0]}, {self.config.e_dim}), got {e.shape}")
        h = None
        for k in range(history.shape[1]):
            pre = _dense(self.params, "rnn.in", np.concatenate([history[:, k], e], axis=1))
            if h is not None:
                pre = T.add(pre, T.matmul(h, self.params["rnn.rec.W"]))
            h = T.tanh(pre)
        return _dense(self.params, "rnn.out", h)

    def save(self, path):
        header = {"arch": ARCH_TAG, "config": dataclasses.asdict(self.config), "meta": self.meta}
        formats.write_ddck(path, header, self.params.arrays())

    @classmethod
    def load(cls, path) -> "RecurrentParams":
        header, arrays = formats.read_ddck(path)
        if header.get("arch") != ARCH_TAG:
            raise formats.FormatError(f"{path}: expected a {ARCH_TAG} checkpoint, got {header.get('arch')!r}")
        out = cls(RecurrentConfig(**header["config"]), ParameterSet.from_arrays(arrays), header.get("meta"))
        for name, t in cls.init(out.config).params.items():
            if name not in out.params or out.params[name].shape != t.shape:
                raise formats.FormatError(f"{path}: block {name!r} missing or misshapen")
        return out


def history_length(F: int, horizon: int, unroll: int) -> int:
    """Frames of history usable when the target must still fit in ``F`` frames."""
    n = min(unroll, F - horizon)
    if n < 1:
        raise ValueError(f"horizon {horizon} leaves no observed frame in {F} stored frames")
    return n


def histories(feats, t, n):
    """``feats[i, t_i-n+1 .. t_i]`` for every row ``i``; shape ``(B, n, 2D)``."""
    t = np.broadcast_to(np.asarray(t), (len(feats),))
    idx = t[:, None] + np.arange(1 - n, 1)[None]
    return feats[np.arange(len(feats))[:, None], idx]


def _loss(model, hist, e, target):
    pred = model.forward(hist, e)
    return T.scale(T.sum_squares(T.sub(pred, target)), 1.0 / len(target))


def train_recurrent(train_set: Dataset, hyper: TrainHyper, config: RecurrentConfig | None = None,
                    progress=None):
    """Mini-batch Adam on squared error for one horizon; returns ``(model, losses)``.

    Each epoch every sample contributes one window whose last observed frame
    is drawn uniformly among the offsets that leave room for the target.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    g = train_set.grid
    if config is None:
        config = RecurrentConfig(x_dim=g.feature_len, e_dim=g.E_dim)
    horizon = 1 if hyper.horizon is None else int(hyper.horizon)
    n_hist = history_length(g.F, horizon, config.unroll)
    model = RecurrentParams.init(config, hyper.seed)
    feats = train_set.features()
    e = with_horizon(train_set.conditioning(), horizon)
    n = len(feats)
    losses = []
    for epoch in range(hyper.epochs):
        s = rng.stream(hyper.seed, rng.EPOCH, epoch)
        t = n_hist - 1 + np.floor(s.random(n) * (g.F - horizon - n_hist + 1)).astype(np.int64)
        hist = histories(feats, t, n_hist)
        target = feats[np.arange(n), t + horizon]
        order = s.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            try:
                loss = _loss(model, hist[idx], e[idx], target[idx])
                grads = T.backward(loss, model.params)
                T.adam_step(model.params, grads, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
            except NumericFailure:
                T.clear_tape()
                raise
            total += float(loss.value) * len(idx)
        losses.append(total / n)
        if progress is not None:
            progress(epoch + 1, losses[-1])
    model.meta.update({"epochs": hyper.epochs, "seed": hyper.seed, "lr": hyper.lr, "horizon": horizon,
                       "history": n_hist, "grid": dataclasses.asdict(g)})
    return model, losses


def predict_recurrent(model: RecurrentParams, history, e, horizon: int):
    """Predict the frame ``horizon`` steps after the last row of ``history``."""
    e = with_horizon(np.atleast_2d(e), horizon)
    with T.no_grad():
        return model.forward(history, e).value
