"""Sequential inner loops (LSTM recurrence, AR(1) synthesis).

Every kernel here is plain numpy that numba can also compile unchanged.
``nepadd._accel`` decides which flavour the rest of the package calls.
"""
import numpy as np


def lstm_forward(xw, w_hh):
    """Run one LSTM direction over precomputed input projections.

    ``xw`` is ``x @ W_ih + b`` with shape (T, 4H), gate order (i, f, g, o).
    Returns hidden states and cell states with a leading zero row (T+1, H)
    and post-activation gates (T, 4H).
    """
    T = xw.shape[0]
    H = w_hh.shape[0]
    h = np.zeros((T + 1, H))
    c = np.zeros((T + 1, H))
    gates = np.empty((T, 4 * H))
    for t in range(T):
        z = xw[t] + np.dot(h[t], w_hh)
        i = 1.0 / (1.0 + np.exp(-z[:H]))
        f = 1.0 / (1.0 + np.exp(-z[H:2 * H]))
        g = np.tanh(z[2 * H:3 * H])
        o = 1.0 / (1.0 + np.exp(-z[3 * H:]))
        gates[t, :H] = i
        gates[t, H:2 * H] = f
        gates[t, 2 * H:3 * H] = g
        gates[t, 3 * H:] = o
        c[t + 1] = f * c[t] + i * g
        h[t + 1] = o * np.tanh(c[t + 1])
    return h, c, gates


def lstm_backward(dh_out, c, gates, w_hh):
    """Backprop through time. Returns dL/dz for the pre-activation gates (T, 4H).

    ``dW_hh`` is ``h[:-1].T @ dz`` and is left to the caller.
    """
    T = dh_out.shape[0]
    H = w_hh.shape[0]
    w_hh_t = np.ascontiguousarray(w_hh.T)
    dz = np.empty((T, 4 * H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        i = gates[t, :H]
        f = gates[t, H:2 * H]
        g = gates[t, 2 * H:3 * H]
        o = gates[t, 3 * H:]
        dh = dh_out[t] + dh_next
        tc = np.tanh(c[t + 1])
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[t, :H] = dc * g * i * (1.0 - i)
        dz[t, H:2 * H] = dc * c[t] * f * (1.0 - f)
        dz[t, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[t, 3 * H:] = dh * tc * o * (1.0 - o)
        dh_next = np.dot(dz[t], w_hh_t)
        dc_next = dc * f
    return dz


def ar1_filter(innov, coeff):
    """Unit-variance AR(1): x[t] = a[t] x[t-1] + sqrt(1 - a[t]^2) e[t].

    ``innov`` is (T, D) standard normal, ``coeff`` is (T,) per-frame AR
    coefficients in [0, 1). x[0] = e[0] so the process starts stationary.
    """
    T = innov.shape[0]
    out = np.empty_like(innov)
    out[0] = innov[0]
    for t in range(1, T):
        a = coeff[t]
        out[t] = a * out[t - 1] + np.sqrt(1.0 - a * a) * innov[t]
    return out
