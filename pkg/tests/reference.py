"""Slow, loop-based reference implementations used as test oracles."""
import math

import numpy as np


def softmax_attention_rows(q, k, v, allowed):
    """Row-by-row softmax(q k^T / sqrt(d)) v over allowed columns, in plain Python floats."""
    n, d = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        cols = [j for j in range(k.shape[0]) if allowed(i, j)]
        logits = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in cols]
        m = max(logits)
        w = [math.exp(x - m) for x in logits]
        z = sum(w)
        for wj, j in zip(w, cols):
            out[i] += (wj / z) * v[j]
    return out


def rope_complex(x, positions, base=10000.0):
    """Rotate interleaved pairs in the first half of the last axis via complex products."""
    d = x.shape[-1]
    n_pairs = d // 4
    out = np.array(x, dtype=np.float64, copy=True)
    for p in range(n_pairs):
        theta = base ** (-2.0 * p / (d // 2))
        z = x[..., 2 * p] + 1j * x[..., 2 * p + 1]
        z = z * np.exp(1j * np.asarray(positions) * theta)
        out[..., 2 * p] = z.real
        out[..., 2 * p + 1] = z.imag
    return out


def dense_head_ref(X, wq, wk, wv, wo, positions=None, base=10000.0):
    """One causal head on a single sequence ``X [T, h]``."""
    q, k, v = X @ wq, X @ wk, X @ wv
    if positions is not None:
        q, k = rope_complex(q, positions, base), rope_complex(k, positions, base)
    return softmax_attention_rows(q, k, v, lambda i, j: j <= i) @ wo


def mosa_head_ref(X, wq, wk, wv, wo, wr, k, include_first=False, base=10000.0):
    """One MoSA head on ``X [T, h]`` following the textbook recipe step by step."""
    T = X.shape[0]
    r = [1.0 / (1.0 + math.exp(-float(X[t] @ wr))) for t in range(T)]
    # rank by score, ties to the lower position; position 0 forced first when requested
    order = sorted(range(T), key=lambda t: (-(math.inf if include_first and t == 0 else r[t]), t))
    idx = sorted(order[:k])
    Xs = X[idx]
    q, kk, v = Xs @ wq, Xs @ wk, Xs @ wv
    q, kk = rope_complex(q, idx, base), rope_complex(kk, idx, base)
    A = softmax_attention_rows(q, kk, v, lambda i, j: idx[j] <= idx[i])
    A = A * np.array([r[t] for t in idx])[:, None]
    Y = np.zeros((T, wo.shape[1]))
    Y[idx] = A @ wo
    return Y, idx


def unigram_entropy_ref(data: bytes) -> float:
    counts = {}
    for b in data:
        counts[b] = counts.get(b, 0) + 1
    n = len(data)
    return -sum(c / n * math.log(c / n) for c in counts.values())
