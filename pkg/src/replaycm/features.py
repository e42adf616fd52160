"""Cepstral front-ends and the utterance-level post-processing chain.

extract -> downsample_frames (to 10 frames) -> stack_frames (frame-major)
-> Rescaler (train-split max-abs) -> concat_embedding (0.1-scaled x-vector).
"""
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import Waveform

KINDS = ("MFCC", "IMFCC", "RFCC", "LFCC", "SCMC", "CQCC")
M_PRIME = 10
EMBED_DIM = 10
XVEC_SCALE = 0.1

# (n_coeffs, f_min, f_max)
TABLE = {
    "MFCC": (70, 300.0, 8000.0),
    "IMFCC": (60, 200.0, 8000.0),
    "RFCC": (30, 200.0, 8000.0),
    "LFCC": (70, 100.0, 7800.0),
    "SCMC": (40, 100.0, 8000.0),
    "CQCC": (50, 15.62, 8000.0),
}

_BANK_KIND = {
    "MFCC": "mel",
    "IMFCC": "inverted-mel",
    "RFCC": "rectangular",
    "LFCC": "linear",
    "SCMC": "linear",
}


@dataclass(frozen=True)
class FeatureConfig:
    feature_kind: str = "SCMC"
    n_coeffs: int = 40
    f_min: float = 100.0
    f_max: float = 8000.0
    n_bands: int = 40
    frame_len: float = 0.025
    frame_shift: float = 0.010
    window: str = "hamming"
    fft_size: int = 512
    bins_per_octave: int = 12  # CQCC only

    def __post_init__(self):
        if self.feature_kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.feature_kind!r}; expected one of {KINDS}")
        if self.n_coeffs > self.n_bands:
            raise ValueError(f"n_coeffs ({self.n_coeffs}) > n_bands ({self.n_bands})")
        if not 0 <= self.f_min < self.f_max:
            raise ValueError("need 0 <= f_min < f_max")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "FeatureConfig":
        kind = kind.upper()
        if kind not in TABLE:
            raise ValueError(f"unknown feature kind {kind!r}; expected one of {KINDS}")
        n, lo, hi = TABLE[kind]
        cfg = dict(feature_kind=kind, n_coeffs=n, f_min=lo, f_max=hi, n_bands=n)
        if kind == "CQCC":
            bpo = overrides.get("bins_per_octave", 12)
            cfg["n_bands"] = 2 * dsp.n_octaves(lo, hi) * bpo
        cfg.update(overrides)
        return cls(**cfg)


@dataclass
class FeatureMatrix:
    values: np.ndarray  # n_coeffs x n_frames
    feature_kind: str
    utterance_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("feature matrix must be 2-D (coeffs x frames)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite feature values in {self.utterance_id or 'utterance'}")

    @property
    def n_coeffs(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def scmc_band_magnitudes(mags: np.ndarray, weights: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Frequency-weighted mean magnitude per band.

    m_j = sum_k w_j(k) f_k |S(k)| / sum_k w_j(k) f_k, for frames x bins ``mags``.
    """
    wf = weights * freqs[None, :]
    denom = wf.sum(axis=1)
    if np.any(denom <= 0):
        raise ValueError("SCMC band with zero frequency-weight mass (band at DC?)")
    return (mags @ wf.T) / denom[None, :]


def _filterbank(cfg: FeatureConfig, sample_rate: int) -> dsp.Filterbank:
    return dsp.make_filterbank(_BANK_KIND[cfg.feature_kind], cfg.n_bands, cfg.f_min,
                               cfg.f_max, sample_rate, cfg.fft_size)


def extract(w: Waveform, cfg: FeatureConfig, utterance_id: str = "") -> FeatureMatrix:
    """Static cepstra, n_coeffs x M. No deltas."""
    kind = cfg.feature_kind
    if kind == "CQCC":
        spec = dsp.cqt(w, cfg.f_min, cfg.f_max, cfg.bins_per_octave,
                       cfg.frame_len, cfg.frame_shift)
        logp = np.log(np.maximum(spec.magnitudes ** 2, dsp.LOG_FLOOR))
        grid = np.linspace(spec.bin_freqs[0], spec.bin_freqs[-1], cfg.n_bands)
        # geometric bins -> uniform frequency grid
        lin = np.stack([np.interp(grid, spec.bin_freqs, row) for row in logp])
        ceps = dsp.dct2(lin, cfg.n_coeffs)
        return FeatureMatrix(ceps.T, kind, utterance_id)

    frames = dsp.frame_and_window(w, cfg.frame_len, cfg.frame_shift, cfg.window)
    spec = dsp.power_spectrum(frames, cfg.fft_size, w.sample_rate, cfg.frame_shift)
    fb = _filterbank(cfg, w.sample_rate)
    if kind == "SCMC":
        bands = scmc_band_magnitudes(spec.magnitudes, fb.weights, spec.bin_freqs)
    else:
        bands = fb.apply(spec.magnitudes ** 2)
    ceps = dsp.dct2(np.log(np.maximum(bands, dsp.LOG_FLOOR)), cfg.n_coeffs)
    return FeatureMatrix(ceps.T, kind, utterance_id)


def fft_resample_rows(x: np.ndarray, num: int) -> np.ndarray:
    """Resample each row of ``x`` to ``num`` points by spectral truncation/zero-padding.

    Output sample spacing becomes ``dx * M / num``; the DC bin, hence the row
    mean, is carried over unchanged.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    M = x.shape[1]
    if num == M:
        return x.copy()
    X = np.fft.rfft(x, axis=1)
    Y = np.zeros((x.shape[0], num // 2 + 1), dtype=complex)
    N = min(num, M)
    keep = N // 2 + 1
    Y[:, :keep] = X[:, :keep]
    if N % 2 == 0:
        if num < M:
            # +/- N/2 fold onto the single new Nyquist bin
            Y[:, N // 2] *= 2.0
        elif num > M:
            Y[:, N // 2] *= 0.5
    return np.fft.irfft(Y, n=num, axis=1) * (num / M)


def downsample_frames(f: FeatureMatrix, m_prime: int = M_PRIME) -> FeatureMatrix:
    if m_prime < 1:
        raise ValueError("m_prime must be >= 1")
    if f.n_frames < 1:
        raise ValueError("feature matrix has no frames")
    return FeatureMatrix(fft_resample_rows(f.values, m_prime), f.feature_kind, f.utterance_id)


def stack_frames(f: FeatureMatrix, m_prime: int = M_PRIME) -> np.ndarray:
    """Frame-major flattening: out[m * N + n] = f[n, m]."""
    if f.n_frames != m_prime:
        raise ValueError(f"expected {m_prime} frames, got {f.n_frames}; downsample first")
    return f.values.T.reshape(-1).copy()


def unstack_frames(v: np.ndarray, n_coeffs: int, m_prime: int = M_PRIME) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != n_coeffs * m_prime:
        raise ValueError(f"vector length {v.shape[-1]} != {n_coeffs} x {m_prime}")
    return v.reshape(m_prime, n_coeffs).T.copy()


def concat_embedding(v: np.ndarray, x: np.ndarray, c: float = XVEC_SCALE) -> np.ndarray:
    """Append ``c * x`` (a 10-dim reduced x-vector) to feature vector(s) ``v``."""
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != EMBED_DIM:
        raise ValueError(f"embedding must be {EMBED_DIM}-dimensional, got {x.shape[-1]}")
    if v.ndim != x.ndim or v.shape[:-1] != x.shape[:-1]:
        raise ValueError("feature and embedding batch shapes differ")
    return np.concatenate([v, c * x], axis=-1)


@dataclass(frozen=True)
class Rescaler:
    """Per-dimension max-abs scaling learned on the training split."""

    max_abs: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.max_abs, dtype=np.float64)
        if m.ndim != 1 or np.any(m <= 0):
            raise ValueError("rescaler maxima must be a positive 1-D array")
        object.__setattr__(self, "max_abs", m)

    @property
    def dim(self) -> int:
        return self.max_abs.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: rescaler {self.dim}, vector {v.shape[-1]}")
        return v / self.max_abs

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{m!r}\n" for m in self.max_abs.tolist()))

    @classmethod
    def load(cls, path) -> "Rescaler":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        return cls(np.array([float(ln) for ln in lines]))


def fit_rescaler(train_vectors) -> Rescaler:
    X = np.atleast_2d(np.asarray(train_vectors, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("fit_rescaler needs at least one training vector")
    m = np.abs(X).max(axis=0)
    m[m == 0] = 1.0
    return Rescaler(m)


def apply_rescaler(r: Rescaler, v: np.ndarray) -> np.ndarray:
    return r.apply(v)


# ---------------------------------------------------------------------------
# archives


FEAT_MAGIC = b"RDFEAT01"
XVEC_MAGIC = b"RDXVEC01"


class ArchiveError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _read_str(buf, pos):
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    return buf[pos:pos + n].decode("utf-8"), pos + n


@dataclass
class Archive:
    """In-memory form of a feature or x-vector archive.

    ``matrices`` has shape (count, N, M'); x-vector archives use M' = 1 and
    carry a joint label per record.
    """

    kind: str
    ids: list
    matrices: np.ndarray
    labels: list | None = None
    config_hash: str = ""

    @property
    def n(self) -> int:
        return self.matrices.shape[1]

    @property
    def m(self) -> int:
        return self.matrices.shape[2]

    def vectors(self) -> np.ndarray:
        """Frame-major flattened records, (count, N * M')."""
        return np.ascontiguousarray(self.matrices.transpose(0, 2, 1)).reshape(len(self.ids), -1)

    def subset(self, ids) -> "Archive":
        pos = {u: i for i, u in enumerate(self.ids)}
        missing = [u for u in ids if u not in pos]
        if missing:
            raise ArchiveError(f"{len(missing)} ids missing from archive, e.g. {missing[0]}")
        sel = [pos[u] for u in ids]
        return replace(self, ids=list(ids), matrices=self.matrices[sel],
                       labels=None if self.labels is None else [self.labels[i] for i in sel])


def write_archive(path, ar: Archive, magic: bytes = FEAT_MAGIC) -> None:
    count, N, M = ar.matrices.shape
    if len(ar.ids) != count:
        raise ArchiveError("id count does not match record count")
    with_labels = magic == XVEC_MAGIC
    if with_labels and (ar.labels is None or len(ar.labels) != count):
        raise ArchiveError("x-vector archive needs one label per record")
    out = [magic, _pack_str(ar.kind), struct.pack("<III", N, M, count), _pack_str(ar.config_hash)]
    data = np.ascontiguousarray(ar.matrices, dtype="<f4")
    for i, uid in enumerate(ar.ids):
        out.append(_pack_str(uid))
        if with_labels:
            out.append(_pack_str(ar.labels[i]))
        out.append(data[i].tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(out))


def read_archive(path) -> Archive:
    buf = Path(path).read_bytes()
    magic = buf[:8]
    if magic not in (FEAT_MAGIC, XVEC_MAGIC):
        raise ArchiveError(f"{path}: bad magic {magic!r}")
    pos = 8
    kind, pos = _read_str(buf, pos)
    N, M, count = struct.unpack_from("<III", buf, pos)
    pos += 12
    chash, pos = _read_str(buf, pos)
    ids, labels = [], [] if magic == XVEC_MAGIC else None
    mats = np.empty((count, N, M), dtype=np.float32)
    nbytes = 4 * N * M
    for i in range(count):
        uid, pos = _read_str(buf, pos)
        ids.append(uid)
        if labels is not None:
            lab, pos = _read_str(buf, pos)
            labels.append(lab)
        mats[i] = np.frombuffer(buf, dtype="<f4", count=N * M, offset=pos).reshape(N, M)
        pos += nbytes
    if pos != len(buf):
        raise ArchiveError(f"{path}: {len(buf) - pos} trailing bytes")
    return Archive(kind, ids, mats.astype(np.float64), labels, chash)
