"""Conditional VAE with conditional planar flows on the posterior latent.

Networks (all tanh MLPs over batches of row vectors):

* encoder ``q(z0 | x, c)``: ``[x, c] -> hidden -> (mu_q, log_sigma_q)``
* conditional prior ``p(z | c)``: ``c -> hidden -> (mu_p, log_sigma_p)``
* K planar flow blocks whose ``(u, w, b)`` are affine functions of ``c``
* decoder ``g(z, c)``: ``[z, c] -> hidden -> x_hat``, plus an optional
  linear path ``c -> x_hat`` initialized to copy the observed frame

In observation mode ``c = [e, x_t]``: the scenario vector followed by the
flattened frame observed ``horizon`` frames before the target.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import formats, rng
from . import tensor as T
from .channel import E_DIM, Dataset, with_horizon
from .tensor import NumericFailure, ParameterSet, ShapeError, Tensor

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 3.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
# shift so that m(0) = 0 in the invertibility map m(a) = softplus(a + s) - 1
_M_SHIFT = math.log(math.e - 1.0)
_W_EPS = 1e-12

MODES = ("observation", "parametric")
ARCH_TAG = "cvae-flow"


@dataclass(frozen=True)
class ModelConfig:
    x_dim: int
    e_dim: int = E_DIM
    z_dim: int = 48
    enc_hidden: tuple = (256, 128)
    dec_hidden: tuple = (128, 256)
    prior_hidden: tuple = (64,)
    n_flows: int = 4
    mode: str = "observation"
    decoder_skip: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_flows < 0 or self.z_dim < 1 or self.x_dim < 1:
            raise ValueError("need x_dim, z_dim >= 1 and n_flows >= 0")
        object.__setattr__(self, "enc_hidden", tuple(self.enc_hidden))
        object.__setattr__(self, "dec_hidden", tuple(self.dec_hidden))
        object.__setattr__(self, "prior_hidden", tuple(self.prior_hidden))

    @property
    def c_dim(self) -> int:
        return self.e_dim + (self.x_dim if self.mode == "observation" else 0)

    def halved(self) -> "ModelConfig":
        half = lambda hs: tuple(max(1, h // 2) for h in hs)
        return dataclasses.replace(self, enc_hidden=half(self.enc_hidden), dec_hidden=half(self.dec_hidden),
                                   prior_hidden=half(self.prior_hidden))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("enc_hidden", "dec_hidden", "prior_hidden"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class LatentSample:
    z0: Tensor
    zK: Tensor
    log_q0: Tensor
    sum_logdet: Tensor


@dataclass(frozen=True)
class ElboParts:
    """Per-row terms, each a ``(B, 1)`` tensor; ``elbo = recon_loglik - kl_term``."""

    recon_loglik: Tensor
    kl_term: Tensor
    elbo: Tensor

    def means(self) -> dict:
        return {k: float(getattr(self, k).value.mean()) for k in ("recon_loglik", "kl_term", "elbo")}


def _init_dense(params, stream, name, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    params.add(f"{name}.W", stream.uniform(-bound, bound, (fan_in, fan_out)))
    params.add(f"{name}.b", np.zeros((1, fan_out)))


def _dense(params, name, x):
    return T.add(T.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def _mlp(params, prefix, x, n_hidden):
    h = x
    for i in range(n_hidden):
        h = T.tanh(_dense(params, f"{prefix}.{i}", h))
    return h


class CVAE:
    """Model parameters plus architecture metadata."""

    def __init__(self, config: ModelConfig, params: ParameterSet, meta: dict | None = None):
        self.config = config
        self.params = params
        self.meta = dict(meta or {})

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "CVAE":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, drawn from a seeded stream."""
        s = rng.stream(seed, rng.INIT)
        p = ParameterSet()
        cfg = config
        z, c, x = cfg.z_dim, cfg.c_dim, cfg.x_dim

        def stack(prefix, fan_in, hidden, out):
            for i, h in enumerate(hidden):
                _init_dense(p, s, f"{prefix}.{i}", fan_in, h)
                fan_in = h
            _init_dense(p, s, f"{prefix}.out", fan_in, out)

        stack("enc", x + c, cfg.enc_hidden, 2 * z)
        stack("prior", c, cfg.prior_hidden, 2 * z)
        for k in range(cfg.n_flows):
            _init_dense(p, s, f"flow.{k}.u", c, z)
            _init_dense(p, s, f"flow.{k}.w", c, z)
            _init_dense(p, s, f"flow.{k}.b", c, 1)
        stack("dec", z + c, cfg.dec_hidden, x)
        if cfg.decoder_skip:
            # start from the stale prediction: identity on the observed-frame rows
            W = np.zeros((c, x))
            if cfg.mode == "observation":
                W[cfg.e_dim:, :] = np.eye(x)
            p.add("dec.skip.W", W)
        return cls(config, p)

    def zeroed(self) -> "CVAE":
        """Same architecture with every parameter set to zero."""
        p = ParameterSet.from_arrays({k: np.zeros_like(v) for k, v in self.params.arrays().items()})
        return CVAE(self.config, p, self.meta)

    def copy(self) -> "CVAE":
        return CVAE(self.config, self.params.copy(), self.meta)

    # -- networks -----------------------------------------------------------

    def _check(self, a, dim, what):
        if a.value.ndim != 2 or a.shape[1] != dim:
            raise ShapeError(f"{what}: expected (B, {dim}), got {a.shape}")

    def _gauss_head(self, prefix, n_hidden, inp):
        h = _mlp(self.params, prefix, inp, n_hidden)
        out = _dense(self.params, f"{prefix}.out", h)
        z = self.config.z_dim
        mu = T.columns(out, 0, z)
        log_sigma = T.clamp(T.columns(out, z, 2 * z), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma

    def encode(self, x, c):
        """Posterior parameters ``(mu_q, log_sigma_q)``; ``log_sigma_q`` clamped to [-6, 3]."""
        x, c = _rows(x), _rows(c)
        self._check(x, self.config.x_dim, "encode x")
        self._check(c, self.config.c_dim, "encode c")
        return self._gauss_head("enc", len(self.config.enc_hidden), T.concat(x, c))

    def prior(self, c):
        c = _rows(c)
        self._check(c, self.config.c_dim, "prior c")
        return self._gauss_head("prior", len(self.config.prior_hidden), c)

    def decode(self, z, c):
        z, c = _rows(z), _rows(c)
        self._check(z, self.config.z_dim, "decode z")
        self._check(c, self.config.c_dim, "decode c")
        h = _mlp(self.params, "dec", T.concat(z, c), len(self.config.dec_hidden))
        out = _dense(self.params, "dec.out", h)
        if self.config.decoder_skip:
            out = T.add(out, T.matmul(c, self.params["dec.skip.W"]))
        return out

    def flow_block(self, k, c):
        """Raw ``(u, w, b)`` for block ``k`` as functions of ``c``."""
        return (_dense(self.params, f"flow.{k}.u", c),
                _dense(self.params, f"flow.{k}.w", c),
                _dense(self.params, f"flow.{k}.b", c))

    # -- checkpoints --------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        header = {"arch": ARCH_TAG, "config": self.config.to_dict(), "meta": self.meta}
        if extra:
            header["meta"] = {**self.meta, **extra}
        formats.write_ddck(path, header, self.params.arrays())

    @classmethod
    def load(cls, path) -> "CVAE":
        header, arrays = formats.read_ddck(path)
        if header.get("arch") != ARCH_TAG:
            raise formats.FormatError(f"{path}: expected a {ARCH_TAG} checkpoint, got {header.get('arch')!r}")
        model = cls(ModelConfig(**header["config"]), ParameterSet.from_arrays(arrays), header.get("meta"))
        expected = CVAE.init(model.config).params
        for name, t in expected.items():
            if name not in model.params or model.params[name].shape != t.shape:
                raise formats.FormatError(f"{path}: block {name!r} missing or misshapen")
        return model


def _rows(a):
    a = T.as_tensor(a)
    if a.value.ndim == 1:
        return Tensor(a.value[None, :]) if not a.requires_grad else a
    return a


def reparameterize(mu, log_sigma, eps):
    """``z0 = mu + exp(log_sigma) * eps`` and the posterior log-density at ``z0``.

    Returns ``(z0, log_q0)`` with ``log_q0`` a ``(B, 1)`` column.
    """
    mu, log_sigma = _rows(mu), _rows(log_sigma)
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    z0 = T.add(mu, T.mul(T.exp(log_sigma), eps))
    const = -0.5 * np.sum(eps * eps, axis=1, keepdims=True) - HALF_LOG_2PI * eps.shape[1]
    log_q0 = T.sub(const, T.sum_rows(log_sigma))
    return z0, log_q0


def planar_step(z, u, w, b):
    """One planar map ``z + u_hat * tanh(w.z + b)`` and its ``log|det J|``.

    ``u_hat = u + (m(w.u) - w.u) w / |w|^2`` with ``m(a) = softplus(a + s) - 1``
    keeps ``w.u_hat > -1`` so the map stays invertible.
    """
    wu = T.sum_rows(T.mul(w, u))
    wn2 = T.add(T.sum_rows(T.square(w)), _W_EPS)
    m = T.sub(T.softplus(T.add(wu, _M_SHIFT)), 1.0)
    u_hat = T.add(u, T.mul(T.div(T.sub(m, wu), wn2), w))
    act = T.tanh(T.add(T.sum_rows(T.mul(w, z)), b))
    z_next = T.add(z, T.mul(u_hat, act))
    # det(I + u_hat psi^T) = 1 + (1 - act^2) w.u_hat
    det = T.add(T.mul(T.sub(1.0, T.square(act)), T.sum_rows(T.mul(w, u_hat))), 1.0)
    if np.any(det.value <= 0):
        raise NumericFailure("planar flow lost invertibility")
    return z_next, T.log(det)


def apply_flows(model: CVAE, z0, c, log_q0=None) -> LatentSample:
    z0, c = _rows(z0), _rows(c)
    z = z0
    total = Tensor(np.zeros((z0.shape[0], 1)))
    for k in range(model.config.n_flows):
        u, w, b = model.flow_block(k, c)
        z, ld = planar_step(z, u, w, b)
        total = T.add(total, ld)
    if log_q0 is None:
        log_q0 = Tensor(np.zeros((z0.shape[0], 1)))
    return LatentSample(z0=z0, zK=z, log_q0=log_q0, sum_logdet=total)


def kl_gauss(mu_q, log_sigma_q, mu_p, log_sigma_p):
    """Closed-form ``KL(N(mu_q, s_q^2) || N(mu_p, s_p^2))`` summed over dims, per row."""
    mu_q, log_sigma_q, mu_p, log_sigma_p = (_rows(a) for a in (mu_q, log_sigma_q, mu_p, log_sigma_p))
    var_ratio = T.exp(T.scale(T.sub(log_sigma_q, log_sigma_p), 2.0))
    diff = T.sub(mu_q, mu_p)
    mahal = T.div(T.square(diff), T.exp(T.scale(log_sigma_p, 2.0)))
    per_dim = T.sub(T.add(T.sub(log_sigma_p, log_sigma_q), T.scale(T.add(var_ratio, mahal), 0.5)), 0.5)
    return T.sum_rows(per_dim)


def gauss_logpdf(z, mu, log_sigma):
    """Row-wise diagonal Gaussian log-density, ``(B, 1)``."""
    r = T.div(T.sub(z, mu), T.exp(log_sigma))
    per_dim = T.sub(T.add(T.scale(T.square(r), -0.5), T.scale(log_sigma, -1.0)), HALF_LOG_2PI)
    return T.sum_rows(per_dim)


def elbo(model: CVAE, x, c, eps) -> ElboParts:
    """Single-sample ELBO per row.

    The data term is a unit-variance Gaussian log-likelihood. With no flow
    blocks the KL is closed form; otherwise it is the one-sample estimate
    ``log q0(z0) - sum log|det| - log p(zK | c)``.
    """
    x, c = _rows(x), _rows(c)
    mu_q, ls_q = model.encode(x, c)
    mu_p, ls_p = model.prior(c)
    z0, log_q0 = reparameterize(mu_q, ls_q, eps)
    if model.config.n_flows == 0:
        zK = z0
        kl = kl_gauss(mu_q, ls_q, mu_p, ls_p)
    else:
        lat = apply_flows(model, z0, c, log_q0)
        zK = lat.zK
        kl = T.sub(T.sub(lat.log_q0, lat.sum_logdet), gauss_logpdf(zK, mu_p, ls_p))
    x_hat = model.decode(zK, c)
    recon = T.sub(T.scale(T.sum_rows(T.square(T.sub(x, x_hat))), -0.5), HALF_LOG_2PI * x.shape[1])
    return ElboParts(recon_loglik=recon, kl_term=kl, elbo=T.sub(recon, kl))


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    beta_warmup_epochs: int = 10
    horizon: int | None = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def beta(self, epoch: int) -> float:
        if self.beta_warmup_epochs <= 0:
            return 1.0
        return min(1.0, epoch / self.beta_warmup_epochs)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    beta: float
    recon_loglik: float
    kl_term: float
    elbo: float


class TrainingFailure(NumericFailure):
    """Training hit a non-finite value; ``last_good`` holds the previous parameters."""

    def __init__(self, msg, last_good: CVAE, log: list):
        super().__init__(msg)
        self.last_good = last_good
        self.log = log


class FixedPairs:
    """A fixed set of ``(targets, conds)`` rows used in every epoch."""

    def __init__(self, targets, conds):
        self.targets = np.asarray(targets, dtype=np.float64)
        self.conds = np.asarray(conds, dtype=np.float64)
        if len(self.targets) != len(self.conds):
            raise ValueError("targets and conditioning rows differ in count")

    def __len__(self):
        return len(self.targets)

    def epoch(self, stream):
        return self.targets, self.conds


class FramePairs:
    """Training pairs drawn from frame sequences.

    Every epoch each sample contributes one pair ``(x_{t+h}, c(e, x_t))``
    with the observation offset ``t`` drawn uniformly from ``0 .. F-1-h``.
    ``horizon=None`` uses each sample's own scenario horizon; otherwise the
    given horizon is used for all samples and written into ``e``.
    """

    def __init__(self, dataset: Dataset, horizon: int | None, mode: str):
        F = dataset.grid.F
        h = np.array([s.scenario.horizon for s in dataset.samples]) if horizon is None \
            else np.full(len(dataset), int(horizon))
        if np.any(h < 0) or np.any(h >= F):
            raise ValueError(f"horizons must lie in [0, {F - 1}] for {F} stored frames")
        self.feats = dataset.features()
        self.e = with_horizon(dataset.conditioning(), h)
        self.h = h
        self.mode = mode
        self.F = F

    def __len__(self):
        return len(self.feats)

    def _rows(self, t):
        i = np.arange(len(self.feats))
        targets = self.feats[i, t + self.h]
        if self.mode == "observation":
            return targets, np.concatenate([self.e, self.feats[i, t]], axis=1)
        return targets, self.e

    def epoch(self, stream):
        t = np.floor(stream.random(len(self.feats)) * (self.F - self.h)).astype(np.int64)
        return self._rows(t)

    def all(self):
        """Every valid ``(sample, t)`` pair, sample-major."""
        out_t, out_c = [], []
        for t in range(self.F):
            ok = t + self.h < self.F
            if not ok.any():
                break
            targets, conds = self._rows(np.where(ok, t, 0))
            out_t.append(targets[ok])
            out_c.append(conds[ok])
        return np.concatenate(out_t), np.concatenate(out_c)


def conditioning_for(dataset: Dataset, t: int, horizon: int, mode: str):
    """Conditioning rows for predicting frame ``t + horizon`` from frame ``t``."""
    e = with_horizon(dataset.conditioning(), horizon)
    if mode == "observation":
        return np.concatenate([e, dataset.features()[:, t]], axis=1)
    return e


def fit(model: CVAE, pairs, hyper: TrainHyper, progress=None):
    """Mini-batch Adam ascent on the mean ELBO (KL weighted by the warm-up beta).

    ``pairs`` is a :class:`FramePairs` or :class:`FixedPairs`. Returns
    ``(model, log)``; ``log`` has one :class:`EpochRecord` per epoch with the
    unweighted ELBO averaged over that epoch's batches.
    """
    n = len(pairs)
    if n == 0:
        raise ValueError("empty training set")
    z = model.config.z_dim
    log = []
    for epoch in range(hyper.epochs):
        s = rng.stream(hyper.seed, rng.EPOCH, epoch)
        targets, conds = pairs.epoch(s)
        order = s.permutation(n)
        beta = hyper.beta(epoch)
        sums = np.zeros(3)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            eps = s.standard_normal((len(idx), z))
            try:
                parts = elbo(model, targets[idx], conds[idx], eps)
                loss = T.scale(T.total(T.sub(T.scale(parts.kl_term, beta), parts.recon_loglik)), 1.0 / len(idx))
                grads = T.backward(loss, model.params)
                T.adam_step(model.params, grads, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
            except NumericFailure as exc:
                # adam_step validates every gradient before touching the parameters
                T.clear_tape()
                raise TrainingFailure(f"epoch {epoch}: {exc}", model.copy(), log) from exc
            sums += len(idx) * np.array([parts.recon_loglik.value.mean(), parts.kl_term.value.mean(),
                                         parts.elbo.value.mean()])
        rec = EpochRecord(epoch + 1, beta, *(sums / n))
        log.append(rec)
        if progress is not None:
            progress(rec)
    model.meta.update({"epochs": hyper.epochs, "seed": hyper.seed, "lr": hyper.lr,
                       "batch_size": hyper.batch_size, "horizon": hyper.horizon})
    return model, log


def train(train_set: Dataset, hyper: TrainHyper, config: ModelConfig | None = None, progress=None):
    """Initialize from ``hyper.seed`` and fit on ``train_set``; returns ``(model, log)``."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if config is None:
        config = ModelConfig(x_dim=train_set.grid.feature_len)
    if config.x_dim != train_set.grid.feature_len:
        raise ShapeError(f"model x_dim {config.x_dim} != dataset feature length {train_set.grid.feature_len}")
    model = CVAE.init(config, hyper.seed)
    model.meta["grid"] = dataclasses.asdict(train_set.grid)
    return fit(model, FramePairs(train_set, hyper.horizon, config.mode), hyper, progress)


def predict(model: CVAE, c, n_samples: int = 16, stream=None):
    """Prior-driven prediction.

    Draws ``z ~ N(mu_p, sigma_p^2)`` (the latent density the KL term matches
    the flowed posterior against), decodes every draw and returns
    ``(mean, draws)`` with shapes ``(B, x_dim)`` and ``(S, B, x_dim)``.
    """
    if stream is None:
        stream = rng.stream(0, rng.PREDICT)
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    B = c.shape[0]
    with T.no_grad():
        mu, ls = model.prior(c)
        eps = stream.standard_normal((n_samples, B, model.config.z_dim))
        z = mu.value[None] + np.exp(ls.value)[None] * eps
        c_rep = np.broadcast_to(c, (n_samples,) + c.shape).reshape(n_samples * B, -1)
        draws = model.decode(z.reshape(n_samples * B, -1), c_rep).value.reshape(n_samples, B, -1)
    return draws.mean(axis=0), draws


def log_to_csv(log, path):
    with open(path, "w") as fh:
        fh.write("epoch,beta,recon_loglik,kl_term,elbo\n")
        for r in log:
            fh.write(f"{r.epoch},{r.beta!r},{r.recon_loglik!r},{r.kl_term!r},{r.elbo!r}\n")


def smoothed(values, window=5):
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    return np.array([v[max(0, i - window + 1):i + 1].mean() for i in range(len(v))])

