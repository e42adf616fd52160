"""Joint environment+attack x-vectors.

A TDNN classifier over the 270 env+attack classes is trained on 40-dim
MFCC frames; the embedding is the affine output of the first segment-level
layer (before its ReLU). LDA trained on the same classes reduces it to 10
dimensions, and the reduced vector scaled by 0.1 is what gets appended to
the signal features.
"""
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from . import features as F
from . import metrics
from .dsp import Waveform
from .nnet import Network, TrainConfig, train, ShapeError

log = logging.getLogger(__name__)

# 40 cepstra from 80 mel filters over the full band
XVEC_MFCC = F.FeatureConfig(feature_kind="MFCC", n_coeffs=40, n_bands=80, f_min=0.0, f_max=8000.0)
FRAME_CONTEXTS = ([-2, -1, 0, 1, 2], [-2, 0, 2], [-3, 0, 3], [0], [0])
LDA_MAGIC = b"RDLDA01"


class EmbedderError(ValueError):
    pass


@dataclass(frozen=True)
class TdnnConfig:
    input_dim: int = 40
    frame_dim: int = 64
    stats_dim: int = 128
    embed_dim: int = 512
    segment_dim: int = 64
    chunk_frames: int = 64
    chunks_per_utt: int = 3
    cmn: bool = True
    lr: float = 0.001
    batch_size: int = 64
    max_epochs: int = 40
    patience: int = 5

    @classmethod
    def full_size(cls, **kw) -> "TdnnConfig":
        """Layer widths of the standard x-vector recipe (512 frame / 1500 stats)."""
        return cls(frame_dim=512, stats_dim=1500, embed_dim=512, segment_dim=512, **kw)

    @property
    def context_frames(self) -> int:
        return sum(max(c) - min(c) for c in FRAME_CONTEXTS)


def tdnn_specs(cfg: TdnnConfig, n_classes: int) -> list:
    specs = []
    widths = [cfg.frame_dim] * 4 + [cfg.stats_dim]
    for ctx, width in zip(FRAME_CONTEXTS, widths):
        specs += [{"kind": "tdnn", "units": width, "context": list(ctx)},
                  {"kind": "relu"}, {"kind": "batch_norm"}]
    specs.append({"kind": "stats_pool"})
    specs += [{"kind": "dense", "units": cfg.embed_dim},
              {"kind": "relu"}, {"kind": "batch_norm"},
              {"kind": "dense", "units": cfg.segment_dim},
              {"kind": "relu"}, {"kind": "batch_norm"},
              {"kind": "dense", "units": n_classes}]
    return specs


# index of the layer whose output is the x-vector: the dense after stats_pool
EMBED_LAYER = 3 * len(FRAME_CONTEXTS) + 1


def build_tdnn(cfg: TdnnConfig, n_classes: int, seed: int = 0) -> Network:
    return Network(tdnn_specs(cfg, n_classes), (None, cfg.input_dim), seed=seed)


def mfcc_frames(w: Waveform, cmn: bool = True) -> np.ndarray:
    """(frames, 40) MFCC input for the TDNN, optionally mean-normalised per utterance."""
    x = F.extract(w, XVEC_MFCC).values.T
    if cmn:
        x = x - x.mean(axis=0, keepdims=True)
    return x


def _crop(x, length, rng):
    if x.shape[0] < length:
        raise EmbedderError(f"utterance has {x.shape[0]} frames, chunk needs {length}")
    s = int(rng.integers(0, x.shape[0] - length + 1))
    return x[s:s + length]


@dataclass
class ExtractorResult:
    net: Network
    classes: list
    val_accuracy: float
    history: object = None
    val_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def train_xvector_extractor(frames: list, labels: list, cfg: TdnnConfig = TdnnConfig(),
                            seed: int = 0, classes: list | None = None) -> ExtractorResult:
    """Train the joint-class TDNN on per-utterance MFCC frame matrices.

    10 % of utterances are held out (never the last of a class); the rest contribute ``chunks_per_utt``
    random fixed-length chunks each. Validation accuracy is measured on whole
    held-out utterances.
    """
    if len(frames) != len(labels):
        raise EmbedderError("frames and labels differ in length")
    classes = sorted(set(labels)) if classes is None else list(classes)
    if len(classes) < 2:
        raise EmbedderError("need at least 2 classes to train an extractor")
    index = {c: i for i, c in enumerate(classes)}
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise EmbedderError(f"labels outside the class list: {unknown[:5]}")
    y = np.array([index[l] for l in labels])

    rng = np.random.default_rng([int(seed), 51])
    perm = rng.permutation(len(frames))
    n_val = max(1, int(round(0.1 * len(frames))))
    # hold out without emptying any class
    left = np.bincount(y, minlength=len(classes))
    val = []
    for i in perm:
        if len(val) == n_val:
            break
        if left[y[i]] > 1:
            left[y[i]] -= 1
            val.append(i)
    val_idx = np.sort(np.array(val, dtype=np.int64))
    tr_idx = np.setdiff1d(np.arange(len(frames)), val_idx)
    counts = np.bincount(y[tr_idx], minlength=len(classes))
    missing = [classes[i] for i in np.flatnonzero(counts == 0)]
    if missing:
        raise EmbedderError(f"{len(missing)} classes have no training examples: {missing[:10]}")

    L = cfg.chunk_frames
    Xtr, ytr = [], []
    for i in tr_idx:
        for _ in range(cfg.chunks_per_utt):
            Xtr.append(_crop(frames[i], L, rng))
            ytr.append(y[i])
    Xva = np.stack([_crop(frames[i], L, rng) for i in val_idx])
    yva = y[val_idx]

    net = build_tdnn(cfg, len(classes), seed)
    tcfg = TrainConfig(loss="softmax_cross_entropy", lr=cfg.lr, batch_size=cfg.batch_size,
                       max_epochs=cfg.max_epochs, patience=cfg.patience, seed=seed)
    hist = train(net, np.stack(Xtr), np.array(ytr), tcfg, Xva, yva)

    pred = np.array([int(np.argmax(net.predict(frames[i][None]))) for i in val_idx])
    acc, _ = metrics.accuracy_and_confusion(pred, y[val_idx], len(classes))
    log.info("x-vector extractor: %d classes, best epoch %d, val acc %.3f",
             len(classes), hist.best_epoch, acc)
    return ExtractorResult(net, classes, acc, hist, val_idx)


def extract_xvector(net: Network, frames: np.ndarray) -> np.ndarray:
    """Embedding of one utterance: affine output of the first segment layer."""
    x = np.asarray(frames, dtype=np.float64)
    ctx = sum(max(c) - min(c) for c in FRAME_CONTEXTS)
    if x.ndim != 2 or x.shape[0] < ctx + 2:
        raise EmbedderError(f"need at least {ctx + 2} frames for an x-vector, got {x.shape[0]}")
    h = x[None]
    try:
        for layer in net.layers[:EMBED_LAYER + 1]:
            h, _ = layer.forward(h, False, None)
    except ShapeError as e:
        raise EmbedderError(str(e)) from None
    return h[0]


# ---------------------------------------------------------------------------
# LDA


@dataclass
class LdaModel:
    mean: np.ndarray          # in_dim
    projection: np.ndarray    # in_dim x out_dim
    classes: list
    class_means: np.ndarray   # n_classes x out_dim (projected)
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    config_hash: str = ""

    @property
    def in_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise EmbedderError(f"expected {self.in_dim}-dim x-vectors, got {x.shape[-1]}")
        return (x - self.mean) @ self.projection

    def save(self, path) -> None:
        out = [LDA_MAGIC, F._pack_str(self.config_hash),
               struct.pack("<III", self.in_dim, self.out_dim, len(self.classes)),
               self.mean.astype("<f4").tobytes(), self.projection.astype("<f4").tobytes()]
        for c, m in zip(self.classes, self.class_means):
            out += [F._pack_str(c), m.astype("<f4").tobytes()]
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(b"".join(out))

    @classmethod
    def load(cls, path) -> "LdaModel":
        buf = Path(path).read_bytes()
        if buf[:len(LDA_MAGIC)] != LDA_MAGIC:
            raise EmbedderError(f"{path}: not an LDA model file")
        pos = len(LDA_MAGIC)
        chash, pos = F._read_str(buf, pos)
        d, k, n = struct.unpack_from("<III", buf, pos)
        pos += 12
        mean = np.frombuffer(buf, "<f4", d, pos).astype(np.float64)
        pos += 4 * d
        proj = np.frombuffer(buf, "<f4", d * k, pos).reshape(d, k).astype(np.float64)
        pos += 4 * d * k
        classes, means = [], []
        for _ in range(n):
            c, pos = F._read_str(buf, pos)
            classes.append(c)
            means.append(np.frombuffer(buf, "<f4", k, pos).astype(np.float64))
            pos += 4 * k
        return cls(mean, proj, classes, np.array(means).reshape(n, k), config_hash=chash)


def fit_lda(X, labels, out_dim: int = 10, reg: float = 1e-4) -> LdaModel:
    """Multi-class LDA via the generalised eigenproblem Sb v = lambda Sw v.

    Scatter matrices are per-sample averages, and ``reg * trace(Sw) / dim`` is
    added to the diagonal of Sw. Directions are normalised so that projected
    within-class covariance is the identity; each column's largest-magnitude
    entry is made positive.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = list(labels)
    classes = sorted(set(labels))
    if len(classes) < out_dim + 1:
        raise EmbedderError(f"LDA to {out_dim} dims needs >= {out_dim + 1} classes, got {len(classes)}")
    index = {c: i for i, c in enumerate(classes)}
    lab = np.array([index[l] for l in labels])
    N, D = X.shape
    mu = X.mean(axis=0)
    Sw = np.zeros((D, D))
    Sb = np.zeros((D, D))
    for c in range(len(classes)):
        Xc = X[lab == c]
        mc = Xc.mean(axis=0)
        Z = Xc - mc
        Sw += Z.T @ Z
        d = (mc - mu)[:, None]
        Sb += Xc.shape[0] * (d @ d.T)
    Sw /= N
    Sb /= N
    Sw += reg * np.trace(Sw) / D * np.eye(D)
    evals, evecs = scipy.linalg.eigh(Sb, Sw)
    order = np.argsort(evals)[::-1][:out_dim]
    W = evecs[:, order]
    signs = np.sign(W[np.argmax(np.abs(W), axis=0), np.arange(out_dim)])
    W = W * np.where(signs == 0, 1.0, signs)
    model = LdaModel(mu, W, classes, np.zeros((len(classes), out_dim)), evals[order])
    P = model.project(X)
    model.class_means = np.stack([P[lab == c].mean(axis=0) for c in range(len(classes))])
    return model


def project(lda: LdaModel, x) -> np.ndarray:
    return lda.project(x)


def round_to_float32(lda: LdaModel) -> LdaModel:
    """The model as it will read back from disk."""
    f = lambda a: np.asarray(a).astype(np.float32).astype(np.float64)
    return replace(lda, mean=f(lda.mean), projection=f(lda.projection), class_means=f(lda.class_means))


# ---------------------------------------------------------------------------
# verification and analysis


def cosine(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return (a * b).sum(axis=-1) / np.maximum(na * nb, 1e-300)


@dataclass
class Trials:
    enroll: np.ndarray   # n x d enrolment (class-mean) vectors
    test: np.ndarray     # n x d test vectors
    is_target: np.ndarray

    def __len__(self):
        return len(self.is_target)


def build_trials(lda: LdaModel, test_vectors, test_labels, seed: int,
                 nontarget_fraction: float = 0.5) -> Trials:
    """One trial per test vector against an LDA-space class mean.

    With probability ``nontarget_fraction`` the enrolment class is drawn
    uniformly from the other classes, otherwise it is the true class. Test
    vectors are projected if they are still raw.
    """
    T = np.asarray(test_vectors, dtype=np.float64)
    if T.shape[-1] == lda.in_dim and lda.in_dim != lda.out_dim:
        T = lda.project(T)
    index = {c: i for i, c in enumerate(lda.classes)}
    rng = np.random.default_rng([int(seed), 61])
    enroll, is_t = [], []
    n_cls = len(lda.classes)
    for lab in test_labels:
        if lab not in index:
            raise EmbedderError(f"test label {lab!r} not among LDA classes")
        ci = index[lab]
        if rng.random() < nontarget_fraction:
            other = int(rng.integers(0, n_cls - 1))
            other += other >= ci
            enroll.append(lda.class_means[other])
            is_t.append(False)
        else:
            enroll.append(lda.class_means[ci])
            is_t.append(True)
    return Trials(np.array(enroll), T, np.array(is_t))


def verification_eer(lda: LdaModel | None, trials: Trials):
    """(EER, threshold) of cosine scoring; raw 512-dim vectors are projected first."""
    if len(trials) == 0:
        raise EmbedderError("empty trial list")
    E, T = trials.enroll, trials.test
    if lda is not None:
        if E.shape[-1] == lda.in_dim and lda.in_dim != lda.out_dim:
            E = lda.project(E)
        if T.shape[-1] == lda.in_dim and lda.in_dim != lda.out_dim:
            T = lda.project(T)
    s = cosine(E, T)
    return metrics.compute_eer(s[trials.is_target], s[~trials.is_target])


def group_of(joint_id: str, grouping: str) -> str:
    if grouping == "attack":
        return joint_id[3:]
    if grouping == "environment":
        return joint_id[:3]
    raise EmbedderError(f"grouping must be 'attack' or 'environment', got {grouping!r}")


def confusion_analysis(train_vecs, train_labels, dev_vecs, dev_labels, grouping: str):
    """Cosine similarity of per-group dev means (rows) against train means (columns).

    Returns (group_names, matrix). Labels are joint ids (env + attack).
    """
    tg = np.array([group_of(l, grouping) for l in train_labels])
    dg = np.array([group_of(l, grouping) for l in dev_labels])
    names = sorted(set(tg) | set(dg))
    for n in names:
        if n not in set(tg):
            raise EmbedderError(f"group {n!r} missing from the training vectors")
        if n not in set(dg):
            raise EmbedderError(f"group {n!r} missing from the development vectors")
    TV = np.asarray(train_vecs, dtype=np.float64)
    DV = np.asarray(dev_vecs, dtype=np.float64)
    tm = np.stack([TV[tg == n].mean(axis=0) for n in names])
    dm = np.stack([DV[dg == n].mean(axis=0) for n in names])
    M = cosine(dm[:, None, :], tm[None, :, :])
    return names, M


def grouping_strength(names, matrix, position: int, exclude=("00",)) -> float:
    """Mean similarity of distinct groups sharing the letter at ``position`` minus
    the mean similarity of groups differing there."""
    keep = [i for i, n in enumerate(names) if n not in exclude]
    same, diff = [], []
    for i in keep:
        for j in keep:
            if i == j:
                continue
            (same if names[i][position] == names[j][position] else diff).append(matrix[i, j])
    return float(np.mean(same) - np.mean(diff))


def format_grid(names, matrix) -> str:
    w = max(len(n) for n in names) + 1
    head = " " * w + " ".join(f"{n:>6}" for n in names)
    rows = [f"{n:<{w}}" + " ".join(f"{v:6.3f}" for v in row) for n, row in zip(names, matrix)]
    return "\n".join([head] + rows) + "\n"
