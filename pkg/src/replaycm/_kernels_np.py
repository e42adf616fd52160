"""Pure-numpy reference kernels.

Every function here has a numba twin in ``_kernels_nb`` with the same
signature; ``replaycm.kernels`` picks one of the two at import time.
"""
import numpy as np


def context_unfold(x, offsets, start, out_len):
    """Gather context frames: out[b, t, k*C + c] = x[b, t + start + offsets[k], c].

    Frames outside ``[0, T)`` read as zero.
    """
    B, T, C = x.shape
    K = len(offsets)
    out = np.zeros((B, out_len, K * C), dtype=x.dtype)
    for k in range(K):
        shift = start + int(offsets[k])
        lo = max(0, -shift)
        hi = min(out_len, T - shift)
        if hi > lo:
            out[:, lo:hi, k * C:(k + 1) * C] = x[:, lo + shift:hi + shift, :]
    return out


def context_fold(g, offsets, start, in_len):
    """Adjoint of :func:`context_unfold` (scatter-add back onto input frames)."""
    B, out_len, KC = g.shape
    K = len(offsets)
    C = KC // K
    dx = np.zeros((B, in_len, C), dtype=g.dtype)
    for k in range(K):
        shift = start + int(offsets[k])
        lo = max(0, -shift)
        hi = min(out_len, in_len - shift)
        if hi > lo:
            dx[:, lo + shift:hi + shift, :] += g[:, lo:hi, k * C:(k + 1) * C]
    return dx


def maxpool_forward(x, pool):
    B, T, C = x.shape
    n_out = T // pool
    win = x[:, :n_out * pool, :].reshape(B, n_out, pool, C)
    idx = np.argmax(win, axis=2)
    y = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]
    # absolute frame index of each winner
    idx = idx + (np.arange(n_out) * pool)[None, :, None]
    return y, idx


def maxpool_backward(dy, idx, in_len):
    B, n_out, C = dy.shape
    dx = np.zeros((B, in_len, C), dtype=dy.dtype)
    b = np.arange(B)[:, None, None]
    c = np.arange(C)[None, None, :]
    # windows do not overlap (stride == pool) so each target is hit at most once
    dx[b, idx, c] = dy
    return dx


def cqt_magnitudes(x, centers, kern_re, kern_im, kern_starts, kern_lens):
    """Direct constant-Q magnitudes, one windowed DFT per (frame, bin).

    Kernel ``k`` occupies ``kern_*[kern_starts[k]:kern_starts[k] + kern_lens[k]]``
    and is centred on each frame centre. Samples outside the signal are zero.
    """
    n = x.shape[0]
    n_frames = centers.shape[0]
    n_bins = kern_starts.shape[0]
    out = np.zeros((n_frames, n_bins))
    for k in range(n_bins):
        L = int(kern_lens[k])
        s = int(kern_starts[k])
        kr = kern_re[s:s + L]
        ki = kern_im[s:s + L]
        half = L // 2
        pad = np.zeros(n + 2 * L)
        pad[L:L + n] = x
        first = centers - half + L
        idx = first[:, None] + np.arange(L)[None, :]
        seg = pad[idx]
        re = seg @ kr
        im = seg @ ki
        out[:, k] = np.sqrt(re * re + im * im)
    return out
