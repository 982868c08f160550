"""Reference implementations used as test oracles (plain loops, no tape)."""

import math

import numpy as np
from scipy.special import erf


def gelu_ref(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def layer_norm_ref(x, gamma, beta, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def attention_loop(x, wq, bq, wk, bk, wv, bv, mask=None):
    """One head, one sequence, scalar loops. x: (L, d); returns (L, dh)."""
    L, d = x.shape
    dh = wq.shape[1]
    q = np.zeros((L, dh)); k = np.zeros((L, dh)); v = np.zeros((L, dh))
    for t in range(L):
        for j in range(dh):
            q[t, j] = bq[j] + sum(x[t, i] * wq[i, j] for i in range(d))
            k[t, j] = bk[j] + sum(x[t, i] * wk[i, j] for i in range(d))
            v[t, j] = bv[j] + sum(x[t, i] * wv[i, j] for i in range(d))
    out = np.zeros((L, dh))
    for t in range(L):
        s = []
        for u in range(L):
            val = sum(q[t, j] * k[u, j] for j in range(dh)) / math.sqrt(dh)
            if mask is not None and mask[u] == 0:
                val += -1e9
            s.append(val)
        m = max(s)
        e = [math.exp(a - m) for a in s]
        z = sum(e)
        for u in range(L):
            out[t] += e[u] / z * v[u]
    return out
