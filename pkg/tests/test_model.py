import dataclasses
import math

import numpy as np
import pytest

from ddpred import model as M
from ddpred import rng as rngmod
from ddpred import tensor as T
from ddpred.selfcheck import check_cvae_gradients, flow_logdet_error, mc_kl_identity_flow, tiny_model

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def tiny_cfg(**kw):
    base = dict(x_dim=10, e_dim=4, z_dim=3, enc_hidden=(6,), dec_hidden=(6,), prior_hidden=(5,), n_flows=2,
                mode="parametric")
    base.update(kw)
    return M.ModelConfig(**base)


def test_config_dims():
    assert M.ModelConfig(x_dim=512).c_dim == 532
    assert M.ModelConfig(x_dim=512, mode="parametric").c_dim == 20
    h = M.ModelConfig(x_dim=512).halved()
    assert h.enc_hidden == (128, 64) and h.dec_hidden == (64, 128) and h.prior_hidden == (32,)
    with pytest.raises(ValueError):
        M.ModelConfig(x_dim=4, mode="oracle")


def test_zero_weights_give_standard_outputs(rng):
    m = M.CVAE.init(tiny_cfg()).zeroed()
    x, c = rng.standard_normal((2, 10)), rng.standard_normal((2, 4))
    mu, ls = m.encode(x, c)
    assert not mu.value.any() and not ls.value.any()
    mu, ls = m.prior(c)
    assert not mu.value.any() and not ls.value.any()
    assert not m.decode(rng.standard_normal((2, 3)), c).value.any()


def test_networks_deterministic_and_sensitive(rng):
    m = M.CVAE.init(tiny_cfg(), seed=5)
    x, c = rng.standard_normal((1, 10)), rng.uniform(0, 1, (1, 4))
    a = m.encode(x, c)[0].value
    np.testing.assert_array_equal(a, m.encode(x, c)[0].value)
    c2 = c.copy()
    c2[0, 2] += 0.1
    assert not np.allclose(a, m.encode(x, c2)[0].value)
    np.testing.assert_array_equal(m.prior(c)[1].value, m.prior(c)[1].value)
    z = rng.standard_normal((1, 3))
    np.testing.assert_array_equal(m.decode(z, c).value, m.decode(z, c).value)


def test_log_sigma_clamped(rng):
    m = M.CVAE.init(tiny_cfg(), seed=1)
    m.params["enc.out.b"].value[...] = 50.0
    m.params["prior.out.b"].value[...] = -50.0
    x, c = rng.standard_normal((2, 10)), rng.standard_normal((2, 4))
    assert np.all(m.encode(x, c)[1].value == 3.0)
    assert np.all(m.prior(c)[1].value == -6.0)


def test_dimension_mismatch():
    m = M.CVAE.init(tiny_cfg())
    with pytest.raises(T.ShapeError):
        m.encode(np.zeros((1, 9)), np.zeros((1, 4)))
    with pytest.raises(T.ShapeError):
        m.decode(np.zeros((1, 3)), np.zeros((1, 5)))


def test_observation_skip_starts_stale(rng):
    cfg = tiny_cfg(mode="observation")
    m = M.CVAE.init(cfg, 2)
    W = m.params["dec.skip.W"].value
    np.testing.assert_array_equal(W[4:], np.eye(10))
    assert not W[:4].any()
    assert not M.CVAE.init(tiny_cfg(), 2).params["dec.skip.W"].value.any()


# -- reparameterize ---------------------------------------------------------

def test_reparameterize_eps_zero(rng):
    mu = rng.standard_normal((2, 3))
    z0, _ = M.reparameterize(mu, rng.standard_normal((2, 3)), np.zeros((2, 3)))
    np.testing.assert_array_equal(z0.value, mu)


def test_reparameterize_standard():
    eps = np.ones((1, 4))
    z0, lq = M.reparameterize(np.zeros((1, 4)), np.zeros((1, 4)), eps)
    np.testing.assert_array_equal(z0.value, eps)
    assert lq.value[0, 0] == pytest.approx(4 * (-0.5 - HALF_LOG_2PI))


def test_reparameterize_grad_identity(rng):
    mu = T.Tensor(rng.standard_normal((1, 3)), requires_grad=True)
    z0, _ = M.reparameterize(mu, np.zeros((1, 3)), rng.standard_normal((1, 3)))
    T.backward(T.total(z0))
    np.testing.assert_array_equal(mu.grad, np.ones((1, 3)))


# -- flows ------------------------------------------------------------------

def test_identity_flow_when_u_zero(rng):
    m = M.CVAE.init(tiny_cfg(), 3)
    for k in range(2):
        m.params[f"flow.{k}.u.W"].value[...] = 0.0
    z0 = rng.standard_normal((4, 3))
    lat = M.apply_flows(m, z0, rng.uniform(0, 1, (4, 4)))
    np.testing.assert_allclose(lat.zK.value, z0, atol=1e-15)
    np.testing.assert_allclose(lat.sum_logdet.value, 0.0, atol=1e-15)


def test_no_flow_blocks_pass_through(rng):
    m = M.CVAE.init(tiny_cfg(n_flows=0))
    z0 = rng.standard_normal((2, 3))
    lat = M.apply_flows(m, z0, np.zeros((2, 4)))
    np.testing.assert_array_equal(lat.zK.value, z0)
    assert not lat.sum_logdet.value.any()


def test_logdet_matches_numeric_jacobian(rng):
    cfg = tiny_cfg(z_dim=8, n_flows=1)
    m = M.CVAE.init(cfg, 7)
    for name, t in m.params.items():
        if name.startswith("flow."):
            t.value[...] = rng.uniform(-1.5, 1.5, t.shape)
    for _ in range(20):
        assert flow_logdet_error(m, rng.standard_normal(8), rng.uniform(0, 1, 4)) < 1e-6


def test_invertibility_guard(rng):
    """1 + w.u_hat psi > 0 at many random points, including adversarial u."""
    n = 100_000
    z = T.Tensor(rng.standard_normal((n, 5)) * 3)
    w = T.Tensor(rng.standard_normal((n, 5)) * 2)
    u = T.Tensor(-w.value * rng.uniform(0, 5, (n, 1)))  # w.u strongly negative
    b = T.Tensor(rng.standard_normal((n, 1)))
    with T.no_grad():
        _, logdet = M.planar_step(z, u, w, b)
    assert np.all(np.isfinite(logdet.value))


# -- KL and ELBO ------------------------------------------------------------

def test_kl_gauss_examples():
    assert M.kl_gauss(np.array([[0.3, -1.0]]), np.array([[0.2, 1.0]]), np.array([[0.3, -1.0]]),
                      np.array([[0.2, 1.0]])).value[0, 0] == 0.0
    assert M.kl_gauss([[1.0]], [[0.0]], [[0.0]], [[0.0]]).value[0, 0] == 0.5


def test_kl_gauss_nonnegative(rng):
    n = 100_000
    kl = M.kl_gauss(rng.normal(0, 2, (n, 3)), rng.uniform(-6, 3, (n, 3)), rng.normal(0, 2, (n, 3)),
                    rng.uniform(-6, 3, (n, 3))).value
    assert kl.min() >= 0.0


def test_elbo_at_optimum():
    m = M.CVAE.init(tiny_cfg(n_flows=0)).zeroed()
    x = np.zeros((1, 10))
    parts = M.elbo(m, x, np.zeros((1, 4)), np.zeros((1, 3)))
    assert parts.kl_term.value[0, 0] == 0.0
    assert parts.elbo.value[0, 0] == pytest.approx(-10 * HALF_LOG_2PI, abs=1e-12)


def test_elbo_is_recon_minus_kl(rng):
    m = M.CVAE.init(tiny_cfg(), 4)
    parts = M.elbo(m, rng.standard_normal((3, 10)), rng.uniform(0, 1, (3, 4)), rng.standard_normal((3, 3)))
    np.testing.assert_array_equal(parts.elbo.value, parts.recon_loglik.value - parts.kl_term.value)
    T.clear_tape()


def test_identity_flow_mc_kl():
    mc, se, closed = mc_kl_identity_flow(seed=2)
    assert abs(mc - closed) <= 3 * se


def test_end_to_end_gradients():
    res = check_cvae_gradients(seed=1)
    assert res.ok, res.detail
    assert tiny_model().params.count() < 10_000


# -- training and prediction ------------------------------------------------

@pytest.fixture(scope="module")
def desk_like():
    from ddpred.channel import GridConfig, build_dataset
    return build_dataset(GridConfig(M=4, N=4, L=2, F=5), 64, 3)


def small_model_cfg(grid):
    return M.ModelConfig(x_dim=grid.feature_len, z_dim=4, enc_hidden=(16,), dec_hidden=(16,), prior_hidden=(8,),
                         n_flows=2)


def test_zero_epochs_returns_init(desk_like):
    cfg = small_model_cfg(desk_like.grid)
    m, log = M.train(desk_like, M.TrainHyper(epochs=0, seed=9), cfg)
    assert log == []
    np.testing.assert_array_equal(m.params.flat, M.CVAE.init(cfg, 9).params.flat)


def test_training_deterministic(desk_like):
    cfg = small_model_cfg(desk_like.grid)
    a, la = M.train(desk_like, M.TrainHyper(epochs=2, seed=9), cfg)
    b, lb = M.train(desk_like, M.TrainHyper(epochs=2, seed=9), cfg)
    np.testing.assert_array_equal(a.params.flat, b.params.flat)
    assert la == lb and len(la) == 2
    c, _ = M.train(desk_like, M.TrainHyper(epochs=2, seed=10), cfg)
    assert not np.array_equal(a.params.flat, c.params.flat)


def test_beta_schedule():
    h = M.TrainHyper()
    assert [h.beta(e) for e in (0, 5, 10, 40)] == [0.0, 0.5, 1.0, 1.0]
    assert M.TrainHyper(beta_warmup_epochs=0).beta(0) == 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_failure_keeps_last_good(desk_like):
    cfg = small_model_cfg(desk_like.grid)
    pairs = M.FixedPairs(np.full((4, cfg.x_dim), 1e200), np.zeros((4, cfg.c_dim)))
    model = M.CVAE.init(cfg, 0)
    before = model.params.flat.copy()
    with pytest.raises(M.TrainingFailure) as info:
        M.fit(model, pairs, M.TrainHyper(epochs=1))
    np.testing.assert_array_equal(info.value.last_good.params.flat, before)
    assert T.tape_length() == 0


def test_frame_pairs(desk_like):
    pairs = M.FramePairs(desk_like, horizon=2, mode="observation")
    targets, conds = pairs.all()
    assert len(targets) == 64 * 3
    f = desk_like.features()
    np.testing.assert_array_equal(targets[:64], f[:, 2])
    np.testing.assert_array_equal(conds[:64, 20:], f[:, 0])
    assert np.all(conds[:, 4] == 0.2)
    t, c = pairs.epoch(rngmod.stream(0, 1))
    assert t.shape == (64, f.shape[2]) and c.shape == (64, 20 + f.shape[2])
    with pytest.raises(ValueError):
        M.FramePairs(desk_like, horizon=5, mode="observation")


def test_predict_shapes_and_determinism(desk_like):
    m = M.CVAE.init(small_model_cfg(desk_like.grid), 1)
    c = M.conditioning_for(desk_like, 0, 1, "observation")[:5]
    mean, draws = M.predict(m, c, 16, rngmod.stream(4, 5))
    assert mean.shape == (5, 64) and draws.shape == (16, 5, 64)
    one_a, _ = M.predict(m, c, 1, rngmod.stream(4, 5))
    one_b, _ = M.predict(m, c, 1, rngmod.stream(4, 5))
    np.testing.assert_array_equal(one_a, one_b)


def test_predict_collapsed_prior(desk_like):
    m = M.CVAE.init(small_model_cfg(desk_like.grid), 1)
    m.params["prior.out.b"].value[0, 4:] = -50.0  # log sigma at the clamp floor
    c = M.conditioning_for(desk_like, 0, 1, "observation")[:3]
    _, draws = M.predict(m, c, 16, rngmod.stream(1, 5))
    assert draws.var(axis=0).max() < 1e-3


def test_mean_of_draws_beats_single_draw(desk_like):
    cfg = small_model_cfg(desk_like.grid)
    m, _ = M.train(desk_like, M.TrainHyper(epochs=3, seed=0), cfg)
    c = M.conditioning_for(desk_like, 3, 1, "observation")
    y = desk_like.features()[:, 4]
    mean, draws = M.predict(m, c, 16, rngmod.stream(2, 5))
    nm = lambda p: np.mean(np.sum((y - p) ** 2, 1) / np.sum(y ** 2, 1))
    assert nm(mean) < np.mean([nm(d) for d in draws])


def test_checkpoint_roundtrip(tmp_path, desk_like):
    m = M.CVAE.init(small_model_cfg(desk_like.grid), 6)
    m.meta["note"] = "x"
    m.save(tmp_path / "m.ddck")
    back = M.CVAE.load(tmp_path / "m.ddck")
    assert back.config == m.config and back.meta["note"] == "x"
    np.testing.assert_array_equal(back.params.flat, m.params.flat.astype(np.float32))


def test_checkpoint_wrong_arch(tmp_path):
    from ddpred import formats
    formats.write_ddck(tmp_path / "x", {"arch": "other"}, {})
    with pytest.raises(formats.FormatError):
        M.CVAE.load(tmp_path / "x")


def test_smoothed():
    np.testing.assert_allclose(M.smoothed([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])
