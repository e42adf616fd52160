"""Stage functions behind the CLI.

Each stage reads its inputs from a work directory, writes its artifacts
there, and is deterministic given (config, seed): re-running a stage
reproduces its outputs byte for byte.

Layout under ``workdir``::

    corpus/manifest.txt, corpus/wav/<split>/*.wav
    corpus/asv_<split>.scores, corpus/asv_<split>.keys
    features/<split>.rdf        N x 10 signal features (RDFEAT01)
    rescaler.txt
    xvec/extractor.ckpt, xvec/report.txt, xvec/<split>.rdx (RDXVEC01)
    lda.bin
    cm/cm.ckpt, cm/history.txt
    scores/<split>.scores, scores/<split>.keys
    results/<split>.txt
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import countermeasure as cmod
from . import embedder as E
from . import features as F
from . import metrics as M
from . import simcorpus as S
from .config import ExperimentConfig
from .nnet import Network, TrainConfig, load_checkpoint_bytes
from .wav import read_wav

log = logging.getLogger(__name__)


class StageInputError(FileNotFoundError):
    """A stage's required input artifact is missing."""


class ConfigMismatchError(ValueError):
    """Artifacts were produced under different configurations."""


@dataclass
class Paths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def corpus(self): return self.root / "corpus"
    @property
    def manifest(self): return self.corpus / "manifest.txt"
    def asv_scores(self, split): return self.corpus / f"asv_{split}.scores"
    def asv_keys(self, split): return self.corpus / f"asv_{split}.keys"
    def features(self, split): return self.root / "features" / f"{split}.rdf"
    @property
    def rescaler(self): return self.root / "rescaler.txt"
    @property
    def extractor(self): return self.root / "xvec" / "extractor.ckpt"
    @property
    def xvec_report(self): return self.root / "xvec" / "report.txt"
    def xvectors(self, split): return self.root / "xvec" / f"{split}.rdx"
    @property
    def lda(self): return self.root / "lda.bin"
    @property
    def cm(self): return self.root / "cm" / "cm.ckpt"
    @property
    def history(self): return self.root / "cm" / "history.txt"
    def scores(self, split): return self.root / "scores" / f"{split}.scores"
    def keys(self, split): return self.root / "scores" / f"{split}.keys"
    def results(self, split): return self.root / "results" / f"{split}.txt"


def require(*paths):
    for p in paths:
        if not Path(p).exists():
            raise StageInputError(f"missing input: {p}")


def _check_hash(path, found, expected, force):
    if found != expected and not force:
        raise ConfigMismatchError(
            f"{path} was produced under config {found or '<none>'}, current config is {expected}; "
            f"use --force to mix artifacts")


def feature_config(cfg: ExperimentConfig) -> F.FeatureConfig:
    fs = cfg.features
    kind = fs.kind.upper()
    over = dict(frame_len=fs.frame_len, frame_shift=fs.frame_shift, window=fs.window,
                fft_size=fs.fft_size, bins_per_octave=fs.bins_per_octave)
    if fs.n_coeffs > 0:
        over["n_coeffs"] = fs.n_coeffs
        if kind != "CQCC":
            over["n_bands"] = fs.n_coeffs
    if fs.n_bands > 0:
        over["n_bands"] = fs.n_bands
    if fs.f_min >= 0:
        over["f_min"] = fs.f_min
    if fs.f_max >= 0:
        over["f_max"] = fs.f_max
    return F.FeatureConfig.for_kind(kind, **over)


def tdnn_config(cfg: ExperimentConfig) -> E.TdnnConfig:
    t = cfg.tdnn
    return E.TdnnConfig(frame_dim=t.frame_dim, stats_dim=t.stats_dim, embed_dim=t.embed_dim,
                        segment_dim=t.segment_dim, chunk_frames=t.chunk_frames,
                        chunks_per_utt=t.chunks_per_utt, cmn=t.cmn, lr=t.lr,
                        batch_size=t.batch_size, max_epochs=t.max_epochs, patience=t.patience)


def cm_config(cfg: ExperimentConfig, input_len: int) -> cmod.CmModelConfig:
    c = cfg.cm
    return cmod.CmModelConfig(input_len=input_len, noise_std=c.noise_std, conv_layers=c.conv_layers,
                              filters=c.filters, kernel=c.kernel, pool=c.pool, l2=c.l2,
                              use_noise_layer=c.use_noise_layer)


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(loss="mse", lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps,
                       min_delta=t.min_delta, patience=t.patience, batch_size=t.batch_size,
                       max_epochs=t.max_epochs, validation_fraction=t.validation_fraction, seed=seed)


def tdcf_params(cfg: ExperimentConfig) -> M.TdcfParams:
    m = cfg.metrics
    return M.TdcfParams(pi_tar=m.pi_tar, pi_non=m.pi_non, pi_spoof=m.pi_spoof,
                        c_miss_asv=m.c_miss_asv, c_fa_asv=m.c_fa_asv,
                        c_miss_cm=m.c_miss_cm, c_fa_cm=m.c_fa_cm)


# ---------------------------------------------------------------------------
# stages


def simulate(cfg: ExperimentConfig, workdir, seed: int, threads: int = 1) -> S.CorpusManifest:
    p = Paths(workdir)
    c = cfg.corpus
    counts = {"train": c.n_train, "dev": c.n_dev, "eval": c.n_eval}
    counts = {k: v for k, v in counts.items() if v > 0}
    manifest = S.generate_corpus(counts, seed, p.corpus, threads, c.min_duration, c.max_duration)
    for split in counts:
        recs = manifest.split(split)
        asv = S.simulate_asv_scores(recs, seed + 1000 * (S.SPLITS.index(split) + 1))
        M.write_scores(p.asv_scores(split), asv.ids, asv.scores)
        M.write_keys(p.asv_keys(split), asv.ids, asv.keys)
    return manifest


def load_manifest(workdir) -> S.CorpusManifest:
    p = Paths(workdir)
    require(p.manifest)
    return S.CorpusManifest.load(p.manifest)


def extract(cfg: ExperimentConfig, workdir, splits=("train", "dev", "eval")) -> dict:
    """Signal features down-sampled to M' frames, one archive per split."""
    p = Paths(workdir)
    man = load_manifest(workdir)
    fcfg = feature_config(cfg)
    out = {}
    for split in splits:
        recs = man.split(split)
        if not recs:
            continue
        mats = []
        for r in recs:
            w = read_wav(p.corpus / r.path)
            fm = F.downsample_frames(F.extract(w, fcfg, r.utt_id), cfg.features.m_prime)
            mats.append(fm.values)
        ar = F.Archive(fcfg.feature_kind, [r.utt_id for r in recs],
                       np.stack(mats).astype(np.float32).astype(np.float64),
                       config_hash=cfg.hash("features"))
        F.write_archive(p.features(split), ar, F.FEAT_MAGIC)
        out[split] = ar
    return out


def _frames_for(p: Paths, recs, cmn):
    return [E.mfcc_frames(read_wav(p.corpus / r.path), cmn) for r in recs]


def train_xvec(cfg: ExperimentConfig, workdir, seed: int) -> E.ExtractorResult:
    p = Paths(workdir)
    man = load_manifest(workdir)
    recs = man.split("train")
    if not recs:
        raise StageInputError("manifest has no training utterances")
    tc = tdnn_config(cfg)
    frames = _frames_for(p, recs, tc.cmn)
    labels = [r.joint_id for r in recs]
    present = sorted(set(labels))
    res = E.train_xvector_extractor(frames, labels, tc, seed, classes=present)
    p.extractor.parent.mkdir(parents=True, exist_ok=True)
    res.net.save(p.extractor, cfg.hash("tdnn"))
    p.xvec_report.write_text(
        f"classes {len(res.classes)}\nval_accuracy {res.val_accuracy:.6f}\n"
        f"best_epoch {res.history.best_epoch}\n" + res.history.history_text())
    return res


def extract_xvec(cfg: ExperimentConfig, workdir, splits=("train", "dev", "eval"), force=False) -> dict:
    p = Paths(workdir)
    require(p.extractor)
    net, h = load_checkpoint_bytes(p.extractor.read_bytes())
    _check_hash(p.extractor, h, cfg.hash("tdnn"), force)
    man = load_manifest(workdir)
    out = {}
    for split in splits:
        recs = man.split(split)
        if not recs:
            continue
        frames = _frames_for(p, recs, cfg.tdnn.cmn)
        vecs = np.stack([E.extract_xvector(net, f) for f in frames])
        ar = F.Archive("XVEC", [r.utt_id for r in recs],
                       vecs[:, :, None].astype(np.float32).astype(np.float64),
                       [r.joint_id for r in recs], cfg.hash("tdnn"))
        F.write_archive(p.xvectors(split), ar, F.XVEC_MAGIC)
        out[split] = ar
    return out


def fit_lda(cfg: ExperimentConfig, workdir, force=False) -> E.LdaModel:
    p = Paths(workdir)
    require(p.xvectors("train"))
    ar = F.read_archive(p.xvectors("train"))
    _check_hash(p.xvectors("train"), ar.config_hash, cfg.hash("tdnn"), force)
    lda = E.fit_lda(ar.vectors(), ar.labels, cfg.lda.out_dim, cfg.lda.reg)
    lda = E.round_to_float32(lda)
    lda.config_hash = cfg.hash("tdnn", "lda")
    lda.save(p.lda)
    return E.LdaModel.load(p.lda)


def cm_inputs(cfg: ExperimentConfig, workdir, split, rescaler=None, lda=None,
              use_signal=None, use_xvector=None, force=False):
    """(ids, vectors, bonafide flags) for the countermeasure on ``split``."""
    p = Paths(workdir)
    use_signal = cfg.combine.use_signal if use_signal is None else use_signal
    use_xvector = cfg.combine.use_xvector if use_xvector is None else use_xvector
    if not (use_signal or use_xvector):
        raise ValueError("countermeasure needs signal features, x-vectors, or both")
    man = load_manifest(workdir)
    recs = man.split(split)
    ids = [r.utt_id for r in recs]
    parts = []
    if use_signal:
        require(p.features(split))
        far = F.read_archive(p.features(split))
        _check_hash(p.features(split), far.config_hash, cfg.hash("features"), force)
        v = far.subset(ids).vectors()
        if rescaler is None:
            require(p.rescaler)
            rescaler = F.Rescaler.load(p.rescaler)
        parts.append(rescaler.apply(v))
    if use_xvector:
        require(p.xvectors(split))
        xar = F.read_archive(p.xvectors(split))
        _check_hash(p.xvectors(split), xar.config_hash, cfg.hash("tdnn"), force)
        if lda is None:
            require(p.lda)
            lda = E.LdaModel.load(p.lda)
            _check_hash(p.lda, lda.config_hash, cfg.hash("tdnn", "lda"), force)
        x = lda.project(xar.subset(ids).vectors())
        if parts:
            parts = [F.concat_embedding(parts[0], x, cfg.combine.xvector_scale)]
        else:
            parts.append(cfg.combine.xvector_scale * x)
    flags = np.array([r.bonafide for r in recs])
    return ids, parts[0], flags


def fit_rescaler(cfg: ExperimentConfig, workdir, force=False) -> F.Rescaler:
    p = Paths(workdir)
    require(p.features("train"))
    ar = F.read_archive(p.features("train"))
    _check_hash(p.features("train"), ar.config_hash, cfg.hash("features"), force)
    r = F.fit_rescaler(ar.vectors())
    r.save(p.rescaler)
    return F.Rescaler.load(p.rescaler)


@dataclass
class CmRun:
    net: Network
    history: object
    seconds: float = 0.0


def train_cm(cfg: ExperimentConfig, workdir, seed: int, force=False, save=True, **input_kw) -> CmRun:
    p = Paths(workdir)
    if input_kw.get("use_signal", cfg.combine.use_signal):
        fit_rescaler(cfg, workdir, force)
    t0 = time.perf_counter()
    _, V, flags = cm_inputs(cfg, workdir, "train", force=force, **input_kw)
    net = cmod.build_cm(cm_config(cfg, V.shape[1]), seed)
    hist = cmod.train_cm(net, V, cmod.targets_from_bonafide(flags), train_config(cfg, seed))
    if save:
        p.cm.parent.mkdir(parents=True, exist_ok=True)
        net.save(p.cm, cfg.hash())
        p.history.write_text(hist.history_text())
    return CmRun(net, hist, time.perf_counter() - t0)


def score(cfg: ExperimentConfig, workdir, split="dev", net=None, force=False, save=True, **input_kw):
    p = Paths(workdir)
    if net is None:
        require(p.cm)
        net, h = load_checkpoint_bytes(p.cm.read_bytes())
        _check_hash(p.cm, h, cfg.hash(), force)
    ids, V, flags = cm_inputs(cfg, workdir, split, force=force, **input_kw)
    s = cmod.score(net, V)
    if save:
        M.write_scores(p.scores(split), ids, s)
        M.write_keys(p.keys(split), ids, ["bonafide" if f else "spoof" for f in flags])
    return ids, s, flags


@dataclass
class EvalResult:
    eer: float
    eer_threshold: float
    min_tdcf: float
    tdcf_threshold: float
    params: M.TdcfParams
    n_bonafide: int
    n_spoof: int
    text: str = field(default="", repr=False)


def evaluate(cfg: ExperimentConfig, score_set: M.ScoreSet, asv: M.ScoreSet) -> EvalResult:
    pm, pfa, pms = M.asv_operating_point(asv)
    params = tdcf_params(cfg).with_asv(pm, pfa, pms)
    e, et = M.eer(score_set)
    t, tt = M.min_tdcf(score_set, params)
    return EvalResult(e, et, t, tt, params, score_set.of("bonafide").size,
                      score_set.of("spoof").size, M.summary(score_set, params))


def evaluate_files(cfg: ExperimentConfig, scores_path, keys_path, asv_scores_path, asv_keys_path):
    require(scores_path, keys_path, asv_scores_path, asv_keys_path)
    cm = M.join_scores_keys(M.read_scores(scores_path), M.read_keys(keys_path))
    asv = M.join_scores_keys(M.read_scores(asv_scores_path), M.read_keys(asv_keys_path))
    return evaluate(cfg, cm, asv)


def eval_split(cfg: ExperimentConfig, workdir, split="dev") -> EvalResult:
    p = Paths(workdir)
    res = evaluate_files(cfg, p.scores(split), p.keys(split), p.asv_scores(split), p.asv_keys(split))
    p.results(split).parent.mkdir(parents=True, exist_ok=True)
    p.results(split).write_text(res.text)
    return res


def analyze(cfg: ExperimentConfig, workdir, split="dev", force=False) -> dict:
    """Mean x-vector confusion grids (attack and environment) in LDA space."""
    p = Paths(workdir)
    require(p.xvectors("train"), p.xvectors(split), p.lda)
    lda = E.LdaModel.load(p.lda)
    tr = F.read_archive(p.xvectors("train"))
    dv = F.read_archive(p.xvectors(split))
    for path, ar in ((p.xvectors("train"), tr), (p.xvectors(split), dv)):
        _check_hash(path, ar.config_hash, cfg.hash("tdnn"), force)
    out = {}
    for grouping in ("attack", "environment"):
        names, mat = E.confusion_analysis(lda.project(tr.vectors()), tr.labels,
                                          lda.project(dv.vectors()), dv.labels, grouping)
        out[grouping] = (names, mat)
    return out


def xvec_sanity(cfg: ExperimentConfig, workdir, split="dev", seed=0):
    """(extractor validation accuracy, env+attack verification EER on ``split``)."""
    p = Paths(workdir)
    require(p.xvec_report, p.lda, p.xvectors(split))
    acc = float(p.xvec_report.read_text().split("\n")[1].split()[1])
    lda = E.LdaModel.load(p.lda)
    ar = F.read_archive(p.xvectors(split))
    keep = [i for i, l in enumerate(ar.labels) if l in set(lda.classes)]
    trials = E.build_trials(lda, ar.vectors()[keep], [ar.labels[i] for i in keep], seed)
    e, _ = E.verification_eer(lda, trials)
    return acc, e


def run_all(cfg: ExperimentConfig, workdir, seed: int, threads: int = 1, eval_split_name="dev"):
    """Every stage in CLI order; returns the dev evaluation."""
    simulate(cfg, workdir, seed, threads)
    extract(cfg, workdir)
    train_xvec(cfg, workdir, seed)
    extract_xvec(cfg, workdir)
    fit_lda(cfg, workdir)
    fit_rescaler(cfg, workdir)
    train_cm(cfg, workdir, seed)
    score(cfg, workdir, eval_split_name)
    return eval_split(cfg, workdir, eval_split_name)
