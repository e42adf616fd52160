"""Numba-compiled kernels, same contracts as ``_kernels_np``."""
import numpy as np
from numba import njit


@njit(cache=True)
def context_unfold(x, offsets, start, out_len):
    B, T, C = x.shape
    K = offsets.shape[0]
    out = np.zeros((B, out_len, K * C), dtype=x.dtype)
    for b in range(B):
        for t in range(out_len):
            for k in range(K):
                src = t + start + offsets[k]
                if src < 0 or src >= T:
                    continue
                base = k * C
                for c in range(C):
                    out[b, t, base + c] = x[b, src, c]
    return out


@njit(cache=True)
def context_fold(g, offsets, start, in_len):
    B, out_len, KC = g.shape
    K = offsets.shape[0]
    C = KC // K
    dx = np.zeros((B, in_len, C), dtype=g.dtype)
    # k outermost keeps the summation order identical to the numpy path
    for k in range(K):
        base = k * C
        for b in range(B):
            for t in range(out_len):
                dst = t + start + offsets[k]
                if dst < 0 or dst >= in_len:
                    continue
                for c in range(C):
                    dx[b, dst, c] += g[b, t, base + c]
    return dx


@njit(cache=True)
def maxpool_forward(x, pool):
    B, T, C = x.shape
    n_out = T // pool
    y = np.empty((B, n_out, C), dtype=x.dtype)
    idx = np.empty((B, n_out, C), dtype=np.int64)
    for b in range(B):
        for j in range(n_out):
            for c in range(C):
                best = j * pool
                v = x[b, best, c]
                for p in range(1, pool):
                    cand = x[b, j * pool + p, c]
                    if cand > v:
                        v = cand
                        best = j * pool + p
                y[b, j, c] = v
                idx[b, j, c] = best
    return y, idx


@njit(cache=True)
def maxpool_backward(dy, idx, in_len):
    B, n_out, C = dy.shape
    dx = np.zeros((B, in_len, C), dtype=dy.dtype)
    for b in range(B):
        for j in range(n_out):
            for c in range(C):
                dx[b, idx[b, j, c], c] += dy[b, j, c]
    return dx


@njit(cache=True)
def cqt_magnitudes(x, centers, kern_re, kern_im, kern_starts, kern_lens):
    n = x.shape[0]
    n_frames = centers.shape[0]
    n_bins = kern_starts.shape[0]
    out = np.zeros((n_frames, n_bins))
    for f in range(n_frames):
        for k in range(n_bins):
            L = kern_lens[k]
            s = kern_starts[k]
            first = centers[f] - L // 2
            re = 0.0
            im = 0.0
            for j in range(L):
                pos = first + j
                if pos < 0 or pos >= n:
                    continue
                v = x[pos]
                re += v * kern_re[s + j]
                im += v * kern_im[s + j]
            out[f, k] = np.sqrt(re * re + im * im)
    return out
