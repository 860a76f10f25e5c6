"""Straight-line extended-precision reference implementations used as test oracles.

Nothing here imports the package under test.
"""

import mpmath as mp

mp.mp.dps = 40


def softmax(v):
    e = [mp.e ** mp.mpf(float(x)) for x in v]
    s = sum(e)
    return [x / s for x in e]


def entropy_bits(p):
    return -sum(mp.mpf(x) * mp.log(mp.mpf(x), 2) for x in p if x > 0)


def forward(x, W0, b0, W1, b1, M, K):
    """Returns (pre, z, soft, probs) as lists of mpf."""
    d, w = len(W0), len(W0[0])
    C = len(W1[0])
    pre = [sum(mp.mpf(float(x[i])) * mp.mpf(float(W0[i][j])) for i in range(d)) + mp.mpf(float(b0[j])) for j in range(w)]
    z = [p if p > 0 else mp.mpf(0) for p in pre]
    soft = []
    for m in range(M):
        soft += softmax(z[m * K : (m + 1) * K])
    logits = [sum(soft[j] * mp.mpf(float(W1[j][c])) for j in range(w)) + mp.mpf(float(b1[c])) for c in range(C)]
    return pre, z, soft, softmax(logits)


def total_loss(X, y, W0, b0, W1, b1, M, K, gamma, mu):
    T = len(X)
    C = len(W1[0])
    traces = [forward(x, W0, b0, W1, b1, M, K) for x in X]
    cls = sum(-mp.log(t[3][yi], 2) / mp.log(C, 2) for t, yi in zip(traces, y)) / T
    code_ent = [sum(entropy_bits(t[2][m * K : (m + 1) * K]) for m in range(M)) for t in traces]
    w = M * K
    bbar = [sum(t[2][j] for t in traces) / T for j in range(w)]
    ebar = sum(entropy_bits(bbar[m * K : (m + 1) * K]) for m in range(M))
    scale = M * mp.log(K, 2)
    return cls + gamma / scale * sum(code_ent) / T - mu / scale * ebar
