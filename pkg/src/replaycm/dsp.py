"""Signal-processing kernels shared by the feature extractors.

Framing, magnitude spectra, filterbanks, the orthonormal DCT-II and a
direct constant-Q transform. Everything here is a pure function.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from . import kernels

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
FILTERBANK_KINDS = ("mel", "inverted-mel", "linear", "rectangular")


class InsufficientSamplesError(ValueError):
    """Waveform shorter than a single analysis frame."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("waveform must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: np.ndarray  # frames x bins
    bin_freqs: np.ndarray
    frame_shift: float


@dataclass(frozen=True)
class Filterbank:
    weights: np.ndarray  # bands x bins
    kind: str
    f_min: float
    f_max: float
    centers: np.ndarray = field(repr=False)

    @property
    def n_bands(self) -> int:
        return self.weights.shape[0]

    def apply(self, spectrum: np.ndarray) -> np.ndarray:
        """Band energies for a frames x bins spectrum."""
        return spectrum @ self.weights.T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def frame_count(n_samples: int, frame_len: int, shift: int) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // shift + 1


def get_window(kind: str, n: int) -> np.ndarray:
    if kind == "hamming":
        return np.hamming(n)
    if kind in ("hann", "hanning"):
        return np.hanning(n)
    if kind in ("rect", "rectangular", "boxcar"):
        return np.ones(n)
    raise ValueError(f"unknown window kind {kind!r}")


def frame_and_window(w: Waveform, frame_len: float = 0.025, frame_shift: float = 0.010,
                     window: str = "hamming") -> np.ndarray:
    """Slice ``w`` into overlapping windowed frames (frames x samples)."""
    if not frame_len >= frame_shift > 0:
        raise ValueError("need frame_len >= frame_shift > 0")
    n_len = int(round(frame_len * w.sample_rate))
    n_shift = int(round(frame_shift * w.sample_rate))
    M = frame_count(len(w), n_len, n_shift)
    if M < 1:
        raise InsufficientSamplesError(
            f"insufficient samples: {len(w)} < one frame of {n_len} samples"
        )
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, n_len)[::n_shift][:M]
    return frames * get_window(window, n_len)[None, :]


def power_spectrum(frames: np.ndarray, fft_size: int | None = None,
                   sample_rate: int = SAMPLE_RATE, frame_shift: float = 0.010) -> Spectrogram:
    """Per-frame real-FFT magnitudes; ``fft_size // 2 + 1`` bins.

    Despite the name the stored values are magnitudes |S(k)|; square them for
    power.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[0] == 0 or frames.shape[1] == 0:
        raise ValueError("no frames to transform")
    if fft_size is None:
        fft_size = next_pow2(frames.shape[1])
    mags = np.abs(np.fft.rfft(frames, n=fft_size, axis=1))
    freqs = np.fft.rfftfreq(fft_size, d=1.0 / sample_rate)
    return Spectrogram(mags, freqs, frame_shift)


def _band_edges(kind, n_bands, f_min, f_max):
    if kind in ("mel", "inverted-mel"):
        pts = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_bands + 2))
        pts[0], pts[-1] = f_min, f_max
        if kind == "inverted-mel":
            pts = f_min + f_max - pts[::-1]
        return pts
    return np.linspace(f_min, f_max, n_bands + 2)


def make_filterbank(kind: str, n_bands: int, f_min: float, f_max: float,
                    sample_rate: int = SAMPLE_RATE, fft_size: int = 512) -> Filterbank:
    """Build a bands x bins weight matrix over the rfft bins of ``fft_size``.

    ``mel``/``linear``/``inverted-mel`` are triangular (each triangle spans its
    neighbours' centres); ``rectangular`` tiles [f_min, f_max] with equal,
    non-overlapping boxes.
    """
    if kind not in FILTERBANK_KINDS:
        raise ValueError(f"unknown filterbank kind {kind!r}")
    if n_bands < 1:
        raise ValueError("n_bands must be >= 1")
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ValueError(f"need 0 <= f_min < f_max <= {sample_rate / 2}, got {f_min}, {f_max}")
    freqs = np.fft.rfftfreq(fft_size, d=1.0 / sample_rate)
    W = np.zeros((n_bands, freqs.shape[0]))

    if kind == "rectangular":
        edges = np.linspace(f_min, f_max, n_bands + 1)
        for j in range(n_bands):
            lo, hi = edges[j], edges[j + 1]
            inside = (freqs >= lo) & ((freqs < hi) | ((j == n_bands - 1) & (freqs <= hi)))
            W[j, inside] = 1.0
        centers = 0.5 * (edges[:-1] + edges[1:])
    else:
        pts = _band_edges(kind, n_bands, f_min, f_max)
        for j in range(n_bands):
            lo, c, hi = pts[j], pts[j + 1], pts[j + 2]
            if not lo < c < hi:
                raise ValueError(f"degenerate band {j}: edges {lo:.3f}, {c:.3f}, {hi:.3f} Hz")
            up = (freqs - lo) / (c - lo)
            down = (hi - freqs) / (hi - c)
            W[j] = np.maximum(0.0, np.minimum(up, down))
        centers = pts[1:-1].copy()

    empty = np.flatnonzero(W.max(axis=1) <= 0.0)
    if empty.size:
        raise ValueError(
            f"degenerate band(s) {empty.tolist()}: no FFT bin falls inside; "
            f"increase fft_size ({fft_size}) or reduce n_bands ({n_bands})"
        )
    return Filterbank(W, kind, float(f_min), float(f_max), centers)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row ``k`` is basis function ``k``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    D = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    D[0] /= np.sqrt(2.0)
    return D


def dct2(values: np.ndarray, n_coeffs: int) -> np.ndarray:
    """Orthonormal DCT-II along the last axis, keeping ``n_coeffs`` terms."""
    values = np.asarray(values, dtype=np.float64)
    n_bands = values.shape[-1]
    if n_coeffs > n_bands:
        raise ValueError(f"n_coeffs ({n_coeffs}) exceeds n_bands ({n_bands})")
    if n_coeffs < 1:
        raise ValueError("n_coeffs must be >= 1")
    return scipy.fft.dct(values, type=2, norm="ortho", axis=-1)[..., :n_coeffs]


def n_octaves(f_min: float, f_max: float) -> int:
    return int(round(np.log2(f_max / f_min)))


def cqt_bin_freqs(f_min: float, f_max: float, bins_per_octave: int) -> np.ndarray:
    n_bins = int(np.floor(bins_per_octave * np.log2(f_max / f_min) + 1e-9)) + 1
    return f_min * 2.0 ** (np.arange(n_bins) / bins_per_octave)


def cqt(w: Waveform, f_min: float, f_max: float, bins_per_octave: int = 12,
        frame_len: float = 0.025, frame_shift: float = 0.010) -> Spectrogram:
    """Constant-Q magnitude spectrum by direct per-bin windowed DFT.

    Bin ``k`` sits at ``f_min * 2**(k / bins_per_octave)`` and uses a Hann
    window of ``Q * sr / f_k`` samples. Frames are centred where the STFT
    frames of (frame_len, frame_shift) would be, so both paths yield the same
    frame count.
    """
    if f_min <= 0:
        raise ValueError("f_min must be > 0 for a constant-Q transform")
    sr = w.sample_rate
    if f_max > sr / 2:
        raise ValueError("f_max above Nyquist")
    n_len = int(round(frame_len * sr))
    n_shift = int(round(frame_shift * sr))
    M = frame_count(len(w), n_len, n_shift)
    if M < 1:
        raise InsufficientSamplesError(
            f"insufficient samples: {len(w)} < one frame of {n_len} samples"
        )
    freqs = cqt_bin_freqs(f_min, f_max, bins_per_octave)
    Q = 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)
    lens = np.maximum(2, np.ceil(Q * sr / freqs).astype(np.int64))
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
    re = np.empty(lens.sum())
    im = np.empty(lens.sum())
    for k, (f, L, s) in enumerate(zip(freqs, lens, starts)):
        win = np.hanning(L + 2)[1:-1]
        n = np.arange(L) - L // 2
        phase = 2.0 * np.pi * f * n / sr
        win = win / win.sum()
        re[s:s + L] = win * np.cos(phase)
        im[s:s + L] = -win * np.sin(phase)
    centers = n_len // 2 + n_shift * np.arange(M)
    mags = kernels.cqt_magnitudes(w.samples, centers, re, im, starts, lens)
    return Spectrogram(mags, freqs, frame_shift)
