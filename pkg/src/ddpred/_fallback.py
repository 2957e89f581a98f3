"""numpy implementations of the compiled kernels in ``_core``."""
import numpy as np


def sos_synthesize(omega, phase, amp, dt, n):
    """Sum ``amp[l] * sum_s exp(j(omega[l, s] t + phase[l, s]))`` over ``t = k dt``.

    Returns a complex array of shape ``(n_taps, n)``.
    """
    omega = np.ascontiguousarray(omega, dtype=np.float64)
    phase = np.ascontiguousarray(phase, dtype=np.float64)
    amp = np.ascontiguousarray(amp, dtype=np.float64)
    t = np.arange(n) * dt
    out = np.empty((omega.shape[0], n), dtype=np.complex128)
    for l in range(omega.shape[0]):
        re = np.zeros(n)
        im = np.zeros(n)
        for s in range(omega.shape[1]):
            th = omega[l, s] * t + phase[l, s]
            re += np.cos(th)
            im += np.sin(th)
        out[l].real = amp[l] * re
        out[l].imag = amp[l] * im
    return out


def adam_update(w, g, m, v, lr, beta1, beta2, eps, c1, c2):
    """numpy twin of the compiled fused Adam update (same operation order)."""
    if not np.all(np.isfinite(g)):
        return False
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    w -= (lr / c1) * m / (np.sqrt(v * (1.0 / c2)) + eps)
    return True
