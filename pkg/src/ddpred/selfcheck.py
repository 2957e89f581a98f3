"""Numerical self-checks: gradients, flow log-determinants, KL and fading statistics.

Each check returns a :class:`Check`; :func:`run_all` runs them in order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import baseline, rng
from . import model as cvae
from . import tensor as T
from .channel import synthesize_taps

FD_STEP = 1e-4
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-6


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail}"


def bessel_j0_series(x, terms: int = 40):
    """``J0(x) = sum_k (-1)^k (x/2)^{2k} / (k!)^2``, accurate for ``|x| <= 10`` with 40 terms."""
    x = np.asarray(x, dtype=np.float64)
    q = -(x / 2.0) ** 2
    term = np.ones_like(x)
    out = np.ones_like(x)
    for k in range(1, terms):
        term = term * q / (k * k)
        out = out + term
    return out


# -- gradient checks --------------------------------------------------------

def tiny_model(seed: int = 0, n_flows: int = 2) -> cvae.CVAE:
    """A small parametric-mode model: 2D = 16, C = 6, Z = 4."""
    cfg = cvae.ModelConfig(x_dim=16, e_dim=6, z_dim=4, enc_hidden=(8,), dec_hidden=(8,), prior_hidden=(8,),
                           n_flows=n_flows, mode="parametric")
    return cvae.CVAE.init(cfg, seed)


def gradient_errors(params: T.ParameterSet, loss_fn, step: float = FD_STEP):
    """Worst scaled error between backprop and central differences over every entry.

    The error of one entry is ``|g - g_fd| / max(|g_fd|, atol / rtol)`` so a
    value below ``rtol`` passes both the relative test and the absolute floor.
    """
    grads = T.backward(loss_fn(), params)
    analytic = {k: np.array(v) for k, v in grads.items()}
    worst, where = 0.0, None
    floor = GRAD_ATOL / GRAD_RTOL
    with T.no_grad():
        for name, t in params.items():
            w = t.value
            flat = w.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + step
                up = float(loss_fn().value)
                flat[i] = old - step
                down = float(loss_fn().value)
                flat[i] = old
                fd = (up - down) / (2.0 * step)
                err = abs(analytic[name].reshape(-1)[i] - fd) / max(abs(fd), floor)
                if err > worst:
                    worst, where = err, f"{name}[{i}]"
    return worst, where


def check_cvae_gradients(seed: int = 0) -> Check:
    model = tiny_model(seed)
    s = rng.stream(seed, 99)
    x = s.standard_normal((3, 16))
    c = s.uniform(0.0, 1.0, (3, 6))
    eps = s.standard_normal((3, 4))
    # random weights everywhere, including the zero-initialized biases
    model.params.flat[:] += 0.1 * s.standard_normal(model.params.count())

    def loss():
        parts = cvae.elbo(model, x, c, eps)
        return T.scale(T.total(parts.elbo), -1.0 / 3)

    worst, where = gradient_errors(model.params, loss)
    return Check("cvae gradient", worst < GRAD_RTOL,
                 f"{model.params.count()} params, worst scaled error {worst:.2e} at {where}")


def check_recurrent_gradients(seed: int = 0) -> Check:
    cfg = baseline.RecurrentConfig(x_dim=16, e_dim=6, hidden=5, unroll=3)
    m = baseline.RecurrentParams.init(cfg, seed)
    s = rng.stream(seed, 98)
    m.params.flat[:] += 0.1 * s.standard_normal(m.params.count())
    hist = s.standard_normal((2, 3, 16))
    e = s.uniform(0.0, 1.0, (2, 6))
    target = s.standard_normal((2, 16))
    worst, where = gradient_errors(m.params, lambda: baseline._loss(m, hist, e, target))
    return Check("recurrent gradient", worst < GRAD_RTOL,
                 f"{m.params.count()} params, worst scaled error {worst:.2e} at {where}")


# -- flow and KL oracles ----------------------------------------------------

def flow_logdet_error(model: cvae.CVAE, z, c, step: float = 1e-5) -> float:
    """``|sum_logdet - ln|det J||`` with ``J`` from central differences of the flow map."""
    with T.no_grad():
        lat = cvae.apply_flows(model, z[None], c[None])
        Z = len(z)
        J = np.empty((Z, Z))
        for j in range(Z):
            dz = np.zeros(Z)
            dz[j] = step
            up = cvae.apply_flows(model, (z + dz)[None], c[None]).zK.value[0]
            down = cvae.apply_flows(model, (z - dz)[None], c[None]).zK.value[0]
            J[:, j] = (up - down) / (2.0 * step)
    _, logabs = np.linalg.slogdet(J)
    return abs(float(lat.sum_logdet.value[0, 0]) - logabs)


def check_flow_logdet(seed: int = 0, points: int = 100) -> Check:
    cfg = cvae.ModelConfig(x_dim=4, e_dim=3, z_dim=6, enc_hidden=(4,), dec_hidden=(4,), prior_hidden=(4,),
                           n_flows=2, mode="parametric")
    model = cvae.CVAE.init(cfg, seed)
    s = rng.stream(seed, 97)
    # scale up the flow maps so each block bends the latent noticeably
    for name, t in model.params.items():
        if name.startswith("flow."):
            t.value[...] = s.uniform(-1.5, 1.5, t.shape)
    worst = max(flow_logdet_error(model, s.standard_normal(6), s.uniform(0, 1, 3)) for _ in range(points))
    return Check("flow log-det", worst < 1e-6, f"{points} points, worst |error| {worst:.2e}")


def check_kl(seed: int = 0, n: int = 100_000) -> Check:
    s = rng.stream(seed, 96)
    mu, ls = s.normal(0, 2, (5, 7)), s.uniform(-3, 2, (5, 7))
    self_kl = cvae.kl_gauss(mu, ls, mu, ls).value
    a = [s.normal(0, 3, (n, 4)) for _ in range(2)]
    b = [s.uniform(-6, 3, (n, 4)) for _ in range(2)]
    kl = cvae.kl_gauss(a[0], b[0], a[1], b[1]).value
    ok = bool(np.all(self_kl == 0.0) and np.all(kl >= 0.0))
    return Check("kl closed form", ok, f"KL(p,p) max {np.abs(self_kl).max():.1e}, min over {n} draws {kl.min():.3e}")


def mc_kl_identity_flow(seed: int = 0, n: int = 100_000):
    """Monte Carlo KL term of an identity-flow model against its closed form.

    Returns ``(mc_mean, stderr, closed_form)``.
    """
    cfg = cvae.ModelConfig(x_dim=3, e_dim=2, z_dim=3, enc_hidden=(4,), dec_hidden=(4,), prior_hidden=(4,),
                           n_flows=2, mode="parametric")
    model = cvae.CVAE.init(cfg, seed)
    s = rng.stream(seed, 95)
    for name, t in model.params.items():
        if name.startswith("flow.") and ".u." in name:
            t.value[...] = 0.0
        elif name.startswith(("enc.", "prior.")):
            t.value[...] = s.uniform(-0.5, 0.5, t.shape)
    x = np.broadcast_to(s.standard_normal(3), (n, 3))
    c = np.broadcast_to(s.uniform(0, 1, 2), (n, 2))
    eps = s.standard_normal((n, 3))
    with T.no_grad():
        kl = cvae.elbo(model, x, c, eps).kl_term.value[:, 0]
        closed = float(cvae.kl_gauss(*model.encode(x[:1], c[:1]), *model.prior(c[:1])).value[0, 0])
    return float(kl.mean()), float(kl.std(ddof=1) / math.sqrt(n)), closed


def check_mc_kl(seed: int = 0) -> Check:
    mc, se, closed = mc_kl_identity_flow(seed)
    ok = abs(mc - closed) <= 3 * se
    return Check("identity-flow MC KL", ok, f"MC {mc:.5f} +- {se:.5f} vs closed form {closed:.5f}")


# -- channel statistics -----------------------------------------------------

def autocorrelation_error(seed: int = 0, taps: int = 2000, doppler_hz: float = 1000.0,
                          period_s: float = 1e-5, max_lag: int = 100, starts: int = 64):
    """Max ``|r(tau) - J0(2 pi f_D tau)|`` over lags with ``f_D tau <= 1``."""
    n = max_lag + starts
    rows = [synthesize_taps(doppler_hz, period_s, n, [1.0], [rng.stream(seed, rng.TAP, i, 0)])[0]
            for i in range(taps)]
    h = np.asarray(rows)
    lags = np.arange(max_lag + 1)
    r = np.array([np.mean(np.real(h[:, k:k + starts] * np.conj(h[:, :starts]))) for k in lags])
    ref = bessel_j0_series(2.0 * np.pi * doppler_hz * lags * period_s)
    return float(np.max(np.abs(r - ref)))


def check_autocorrelation(seed: int = 0) -> Check:
    err = autocorrelation_error(seed)
    return Check("tap autocorrelation vs J0", err < 0.05, f"2000 taps, max |error| {err:.4f}")


CHECKS = (check_cvae_gradients, check_recurrent_gradients, check_flow_logdet, check_kl, check_mc_kl,
          check_autocorrelation)


def run_all(seed: int = 0, out=print):
    results = []
    for fn in CHECKS:
        try:
            res = fn(seed)
        except (T.NumericFailure, ArithmeticError) as exc:
            res = Check(fn.__name__.removeprefix("check_"), False, f"raised {exc}")
        out(res.line())
        results.append(res)
    return results
