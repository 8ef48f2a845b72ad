"""Compiled scaled forward-backward over concatenated sequences."""
import numpy as np
from numba import njit


@njit(cache=True)
def forward_backward(B, starts, lengths, initial, A, want_posteriors):
    """Scaled recursions on row-stacked sequences.

    ``B[i, k]`` is the emission density of row i under state k divided by a
    per-row constant. Returns (alpha, beta, c, xi) with alpha normalized per
    row, c the per-row scaling factors, and xi the expected transition counts
    summed over all sequences. beta and xi are empty unless requested.
    """
    N, K = B.shape
    alpha = np.empty((N, K))
    c = np.empty(N)
    if want_posteriors:
        beta = np.empty((N, K))
    else:
        beta = np.empty((0, K))
    xi = np.zeros((K, K))
    tmp = np.empty(K)
    for s in range(starts.shape[0]):
        o = starts[s]
        T = lengths[s]
        tot = 0.0
        for k in range(K):
            v = initial[k] * B[o, k]
            alpha[o, k] = v
            tot += v
        c[o] = tot
        for k in range(K):
            alpha[o, k] /= tot
        for t in range(1, T):
            i = o + t
            tot = 0.0
            for l in range(K):
                acc = 0.0
                for k in range(K):
                    acc += alpha[i - 1, k] * A[k, l]
                v = acc * B[i, l]
                alpha[i, l] = v
                tot += v
            c[i] = tot
            for l in range(K):
                alpha[i, l] /= tot
        if not want_posteriors:
            continue
        last = o + T - 1
        for k in range(K):
            beta[last, k] = 1.0
        for t in range(T - 2, -1, -1):
            i = o + t
            for l in range(K):
                tmp[l] = B[i + 1, l] * beta[i + 1, l] / c[i + 1]
            for k in range(K):
                acc = 0.0
                ak = alpha[i, k]
                for l in range(K):
                    w = A[k, l] * tmp[l]
                    acc += w
                    xi[k, l] += ak * w
                beta[i, k] = acc
    return alpha, beta, c, xi


@njit(cache=True)
def viterbi_path(log_pi, log_a, logb):
    """Log-space MAP path; ties go to the lower state index."""
    T, K = logb.shape
    delta = np.empty(K)
    nxt = np.empty(K)
    back = np.zeros((T, K), np.int64)
    for k in range(K):
        delta[k] = log_pi[k] + logb[0, k]
    for t in range(1, T):
        for l in range(K):
            best = delta[0] + log_a[0, l]
            arg = 0
            for k in range(1, K):
                v = delta[k] + log_a[k, l]
                if v > best:
                    best = v
                    arg = k
            back[t, l] = arg
            nxt[l] = best + logb[t, l]
        for l in range(K):
            delta[l] = nxt[l]
    path = np.empty(T, np.int64)
    arg = 0
    for k in range(1, K):
        if delta[k] > delta[arg]:
            arg = k
    path[T - 1] = arg
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path
