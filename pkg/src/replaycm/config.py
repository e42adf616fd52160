"""Experiment configuration: an INI-style ``key = value`` file with sections.

Every field of every section can be overridden on the command line as
``--<section>-<key> VALUE``. Defaults describe the submitted system:
SCMC features + 0.1-scaled LDA x-vectors, noise std 0.001, Adam lr 0.001,
early-stopping patience 5.
"""
import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass
class CorpusSection:
    n_train: int = 2700
    n_dev: int = 900
    n_eval: int = 900
    min_duration: float = 0.8
    max_duration: float = 1.5
    seed: int | None = None


@dataclass
class FeatureSection:
    kind: str = "SCMC"
    n_coeffs: int = 0       # 0 = table default for the kind
    n_bands: int = 0        # 0 = n_coeffs
    f_min: float = -1.0     # < 0 = table default
    f_max: float = -1.0
    frame_len: float = 0.025
    frame_shift: float = 0.010
    window: str = "hamming"
    fft_size: int = 512
    bins_per_octave: int = 12
    m_prime: int = 10


@dataclass
class TdnnSection:
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


@dataclass
class LdaSection:
    out_dim: int = 10
    reg: float = 1e-4


@dataclass
class CombineSection:
    use_signal: bool = True
    use_xvector: bool = True
    xvector_scale: float = 0.1


@dataclass
class CmSection:
    noise_std: float = 0.001
    use_noise_layer: bool = True
    conv_layers: int = 3
    filters: int = 32
    kernel: int = 3
    pool: int = 2
    l2: float = 1e-4


@dataclass
class TrainSection:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    min_delta: float = 0.0
    validation_fraction: float = 0.1


@dataclass
class MetricsSection:
    # ASVspoof 2019 convention; not values from the system description
    pi_tar: float = 0.9405
    pi_non: float = 0.0095
    pi_spoof: float = 0.05
    c_miss_asv: float = 1.0
    c_fa_asv: float = 10.0
    c_miss_cm: float = 1.0
    c_fa_cm: float = 10.0


@dataclass
class ExperimentConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    tdnn: TdnnSection = field(default_factory=TdnnSection)
    lda: LdaSection = field(default_factory=LdaSection)
    combine: CombineSection = field(default_factory=CombineSection)
    cm: CmSection = field(default_factory=CmSection)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def sections(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_ini(self) -> str:
        out = []
        for name, sec in self.sections():
            out.append(f"[{name}]")
            for f in fields(sec):
                v = getattr(sec, f.name)
                out.append(f"{f.name} = {'' if v is None else v}")
            out.append("")
        return "\n".join(out)

    def hash(self, *sections) -> str:
        """Short digest of the named sections (all when none are given).

        The corpus seed is excluded: artifacts are keyed by configuration, and
        the seed is recorded separately by the stage that uses it.
        """
        d = self.to_dict()
        d["corpus"] = {k: v for k, v in d["corpus"].items() if k != "seed"}
        if sections:
            d = {k: d[k] for k in sections}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def set(self, section: str, key: str, raw) -> None:
        sec = getattr(self, section, None)
        if sec is None or not dataclasses.is_dataclass(sec):
            raise KeyError(f"unknown config section [{section}]")
        ftypes = {f.name: f.type for f in fields(sec)}
        if key not in ftypes:
            raise KeyError(f"unknown key {key!r} in section [{section}]")
        setattr(sec, key, _coerce(raw, ftypes[key], getattr(sec, key)))


def _coerce(raw, ftype, current):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    t = str(ftype)
    if s == "" and "None" in t:
        return None
    if "bool" in t:
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in t:
        return int(s)
    if "float" in t:
        return float(s)
    return s


def load_config(path=None, overrides=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        parser = configparser.ConfigParser()
        parser.read_string(p.read_text())
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
    for (section, key), value in (overrides or {}).items():
        cfg.set(section, key, value)
    return cfg


def override_flags():
    """(section, key, flag, default) for every configurable field."""
    out = []
    for name, sec in ExperimentConfig().sections():
        for f in fields(sec):
            out.append((name, f.name, f"--{name}-{f.name.replace('_', '-')}", getattr(sec, f.name)))
    return out
