import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddpred import channel as ch
from ddpred import evaluate as ev
from ddpred import model as M
from ddpred import tensor as T
from ddpred.selfcheck import gradient_errors

finite = st.floats(-1e3, 1e3, allow_nan=False)

scenarios = st.builds(
    ch.ScenarioParams,
    snr_db=st.floats(0, 30), speed=st.floats(1, 60), carrier_hz=st.sampled_from(ch.CARRIERS_HZ),
    bandwidth_hz=st.floats(5e6, 40e6), scs_hz=st.sampled_from(ch.SCS_HZ), cp_len=st.sampled_from(ch.CP_LENGTHS),
    n_tx=st.sampled_from(ch.ANTENNA_COUNTS), n_rx=st.sampled_from(ch.ANTENNA_COUNTS),
    horizon=st.integers(0, 10))


@given(scenarios)
def test_conditioning_invariants(p):
    e = ch.encode_conditioning(p)
    assert e.shape == (20,) and np.all((e >= 0) & (e <= 1))
    for off in (5, 8, 11, 14, 17):
        assert e[off:off + 3].sum() == 1.0
    q = ch.decode_conditioning(e)
    assert (q.carrier_hz, q.scs_hz, q.cp_len, q.n_tx, q.n_rx, q.horizon) == \
           (p.carrier_hz, p.scs_hz, p.cp_len, p.n_tx, p.n_rx, p.horizon)


@given(st.integers(1, 4), st.integers(1, 4), st.data())
def test_flatten_bijection(M_, N_, data):
    L = data.draw(st.integers(1, M_))
    grid = ch.GridConfig(M=M_, N=N_, L=L, F=2)
    re = data.draw(arrays(np.float64, (M_, N_, L), elements=finite))
    im = data.draw(arrays(np.float64, (M_, N_, L), elements=finite))
    h = re + 1j * im
    x = ch.flatten_channel(h, grid)
    np.testing.assert_array_equal(ch.unflatten_channel(x, grid), h)
    np.testing.assert_array_equal(x[:grid.D], h.transpose(2, 0, 1).reshape(-1).real)


vec = arrays(np.float64, (2, 3), elements=st.floats(-5, 5))
logs = arrays(np.float64, (2, 3), elements=st.floats(-6, 3))


@given(vec, logs, vec, logs)
def test_kl_nonnegative_and_zero_on_equal(mq, lq, mp, lp):
    assert np.all(M.kl_gauss(mq, lq, mp, lp).value >= -1e-12)
    assert np.all(M.kl_gauss(mq, lq, mq, lq).value == 0.0)


@given(arrays(np.float64, 8, elements=finite), arrays(np.float64, 8, elements=finite))
def test_nmse_nonnegative_and_complex(h, g):
    if np.dot(h, h) == 0.0:  # includes underflow to zero
        return
    val = ev.nmse(h, g)
    assert val >= 0
    hc, gc = h[:4] + 1j * h[4:], g[:4] + 1j * g[4:]
    assert np.isclose(val, np.sum(np.abs(hc - gc) ** 2) / np.sum(np.abs(hc) ** 2), rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.integers(1, 4))
def test_random_graph_gradients(seed, n_in, n_hidden):
    """Composed graphs of primitives pass the finite-difference check."""
    r = np.random.default_rng(seed)
    p = T.ParameterSet()
    p.add("W", r.standard_normal((n_in, n_hidden)) * 0.5)
    p.add("b", r.standard_normal((1, n_hidden)) * 0.2)
    p.add("V", r.standard_normal((n_hidden, 2)) * 0.5)
    x = r.standard_normal((3, n_in))
    ops = r.integers(0, 3, size=2)

    def loss():
        h = T.add(T.matmul(x, p["W"]), p["b"])
        h = (T.tanh, T.softplus, lambda a: T.scale(T.exp(T.scale(a, 0.3)), 0.5))[ops[0]](h)
        out = T.matmul(h, p["V"])
        out = (T.tanh, T.square, T.softplus)[ops[1]](out)
        return T.add(T.sum_squares(out), T.mean(T.concat(out, h)))

    worst, where = gradient_errors(p, loss)
    assert worst < 1e-4, where


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_planar_step_invertible(seed):
    r = np.random.default_rng(seed)
    n = 200
    scale = r.uniform(0.1, 10)
    z, w, u = (T.Tensor(r.standard_normal((n, 4)) * scale) for _ in range(3))
    b = T.Tensor(r.standard_normal((n, 1)) * scale)
    with T.no_grad():
        _, ld = M.planar_step(z, u, w, b)
    assert np.all(np.isfinite(ld.value))
