"""Pure-numpy GRU recurrence (fallback for the compiled ``_gru_ext``).

Layout is time-major: ``A`` holds input-side pre-activations
``x_t @ Wx + b`` of shape (T, B, 3H), gate order ``[update, reset, candidate]``.
Padded steps (``mask[t, b] == 0``) carry the hidden state through unchanged.
"""

import numpy as np
from scipy.special import expit


def gru_forward(A, h0, Wh, mask):
    """Run the recurrence.

    Returns ``(Hs, Z, R, N, Cn)`` where ``Hs`` is (T+1, B, H) with ``Hs[0] = h0``
    and the rest are (T, B, H) caches needed by :func:`gru_backward`.
    """
    T, B, G = A.shape
    H = G // 3
    Hs = np.empty((T + 1, B, H))
    Z = np.empty((T, B, H))
    R = np.empty((T, B, H))
    N = np.empty((T, B, H))
    Cn = np.empty((T, B, H))
    Hs[0] = h0
    for t in range(T):
        h = Hs[t]
        c = h @ Wh
        a = A[t]
        z = expit(a[:, :H] + c[:, :H])
        r = expit(a[:, H:2 * H] + c[:, H:2 * H])
        cn = c[:, 2 * H:]
        n = np.tanh(a[:, 2 * H:] + r * cn)
        hn = (1.0 - z) * n + z * h
        m = mask[t][:, None] > 0
        Hs[t + 1] = np.where(m, hn, h)
        Z[t], R[t], N[t], Cn[t] = z, r, n, cn
    return Hs, Z, R, N, Cn


def gru_backward(dHs, Hs, Z, R, N, Cn, Wh, mask):
    """Backpropagate ``dHs`` (T, B, H), the loss gradient w.r.t. ``Hs[1:]``.

    Returns ``(dA, dC, dh0)``: gradients w.r.t. the input pre-activations,
    the recurrent pre-activations ``h_{t-1} @ Wh`` and the initial state.
    """
    T, B, H = dHs.shape
    dA = np.empty((T, B, 3 * H))
    dC = np.empty((T, B, 3 * H))
    dh = np.zeros((B, H))
    WhT = Wh.T
    for t in range(T - 1, -1, -1):
        dh = dh + dHs[t]
        m = (mask[t] > 0)[:, None]
        dhn = np.where(m, dh, 0.0)
        z, r, n, cn, h = Z[t], R[t], N[t], Cn[t], Hs[t]
        dz = dhn * (h - n) * z * (1.0 - z)
        dan = dhn * (1.0 - z) * (1.0 - n * n)
        dr = dan * cn * r * (1.0 - r)
        dA[t, :, :H] = dz
        dA[t, :, H:2 * H] = dr
        dA[t, :, 2 * H:] = dan
        dC[t, :, :H] = dz
        dC[t, :, H:2 * H] = dr
        dC[t, :, 2 * H:] = dan * r
        dh = np.where(m, dhn * z, dh) + dC[t] @ WhT
    return dA, dC, dh


def adam_step(w, g, m, v, lr, b1, b2, eps, t):
    """In-place bias-corrected Adam update."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
