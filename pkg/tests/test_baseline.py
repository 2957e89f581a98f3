import numpy as np
import pytest
from scipy.special import j0

from ddpred import baseline as B
from ddpred import evaluate as ev
from ddpred.channel import GridConfig, build_dataset
from ddpred.model import TrainHyper
from ddpred.selfcheck import check_recurrent_gradients


def test_zero_predictor(rng):
    h = rng.standard_normal(12)
    x = B.predict_zero(h)
    assert x.shape == h.shape and ev.nmse(h, x) == 1.0


def test_stale_predictor(rng):
    h = rng.standard_normal(12)
    assert ev.nmse(h, B.predict_stale(h, 0)) == 0.0


def test_ar1_limits(rng):
    x = rng.standard_normal((3, 8))
    np.testing.assert_array_equal(B.predict_ar1(x, 1, 0.0, 1e-3), x)  # rho = 1
    first_zero = 2.404825557695773 / (2 * np.pi)
    np.testing.assert_allclose(B.predict_ar1(x, 1, first_zero, 1.0), 0.0, atol=1e-15)
    rows = B.predict_ar1(x, 2, np.array([0.0, 100.0, 200.0]), np.full(3, 1e-3))
    np.testing.assert_allclose(rows[1], j0(2 * np.pi * 100 * 2e-3) * x[1])


def anchor_case(fd_tau, count=2000, seed=5):
    """Desk-grid test set where ``f_D * frame * horizon = fd_tau`` (speed forced at 28 GHz, 5 MHz)."""
    grid = GridConfig(M=8, N=8, L=4, F=11)
    tau = grid.MN / 5e6
    horizon = int(np.ceil(fd_tau / (5000.0 * tau)))
    fd = fd_tau / (tau * horizon)
    d = build_dataset(grid, count, seed, overrides={"carrier_hz": 28e9, "bandwidth_hz": 5e6,
                                                    "speed": fd * 299_792_458.0 / 28e9})
    return d, horizon


@pytest.mark.parametrize("fd_tau", [0.05, 0.2, 0.45])
def test_stale_and_ar1_track_bessel(fd_tau):
    d, horizon = anchor_case(fd_tau)
    rho = j0(2 * np.pi * fd_tau)
    stale = ev.evaluate(ev.stale_predictor, "stale", d, horizon)
    ar1 = ev.evaluate(ev.ar1_predictor, "ar1", d, horizon)
    assert stale.pooled_nmse == pytest.approx(2 * (1 - rho), rel=0.1)
    assert ar1.pooled_nmse == pytest.approx(1 - rho ** 2, rel=0.1)
    assert ar1.pooled_nmse <= stale.pooled_nmse


def test_history_length():
    assert B.history_length(11, 1, 4) == 4
    assert B.history_length(11, 9, 4) == 2
    assert B.history_length(11, 10, 4) == 1
    with pytest.raises(ValueError):
        B.history_length(11, 11, 4)


def test_histories_windows(rng):
    feats = rng.standard_normal((3, 6, 2))
    h = B.histories(feats, np.array([2, 5, 3]), 3)
    np.testing.assert_array_equal(h[1], feats[1, 3:6])
    np.testing.assert_array_equal(h[0], feats[0, 0:3])


def test_zero_weights_predict_zero(rng):
    m = B.RecurrentParams.init(B.RecurrentConfig(x_dim=8, e_dim=20, hidden=4)).zeroed()
    out = B.predict_recurrent(m, rng.standard_normal((2, 3, 8)), np.zeros((2, 20)), 1)
    assert not out.any()


def test_recurrent_gradients():
    res = check_recurrent_gradients(seed=3)
    assert res.ok, res.detail


@pytest.fixture(scope="module")
def trained():
    grid = GridConfig(M=4, N=4, L=2, F=6)
    d = build_dataset(grid, 200, 8)
    hyper = TrainHyper(epochs=15, seed=2, horizon=1)
    return d, hyper, B.train_recurrent(d.subset(np.arange(160)), hyper)


def test_recurrent_deterministic(trained):
    d, hyper, (m, losses) = trained
    m2, losses2 = B.train_recurrent(d.subset(np.arange(160)), hyper)
    np.testing.assert_array_equal(m.params.flat, m2.params.flat)
    assert losses == losses2 and len(losses) == 15


def test_recurrent_beats_zero(trained):
    d, _, (m, _) = trained
    row = ev.evaluate(ev.recurrent_predictor({1: m}), "recurrent", d.subset(np.arange(160, 200)), 1)
    assert row.nmse_mean < 1.0


def test_recurrent_checkpoint(tmp_path, trained):
    _, _, (m, _) = trained
    m.save(tmp_path / "r.ddck")
    back = B.RecurrentParams.load(tmp_path / "r.ddck")
    assert back.config == m.config and back.meta["horizon"] == 1
    np.testing.assert_allclose(back.params.flat, m.params.flat, rtol=1e-6)
    from ddpred import formats, model
    with pytest.raises(formats.FormatError):
        model.CVAE.load(tmp_path / "r.ddck")
