"""Parametric replay-attack corpus simulator.

Reproduces the label structure of a physical-access spoofing corpus: 27
acoustic environments (room size x T60 x talker distance, each a/b/c) and
10 attack settings (bona fide "00" plus attacker distance x replay device
quality, each A/B/C), 270 joint classes in total. The physical values are
design choices that keep the ordinal categories acoustically distinct at
desk scale; they are not taken from any real corpus.
"""
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from .dsp import Waveform, SAMPLE_RATE
from .metrics import ScoreSet
from .wav import write_wav

log = logging.getLogger(__name__)

LETTERS_ENV = "abc"
LETTERS_ATTACK = "ABC"
BONAFIDE = "00"
SPLITS = ("train", "dev", "eval")

ROOM_SPACING_MS = {"a": 2.0, "b": 5.0, "c": 10.0}
T60_S = {"a": 0.1, "b": 0.4, "c": 0.8}
DRR_DB = {"a": 12.0, "b": 6.0, "c": 0.0}
ATTACKER_SNR_DB = {"A": 30.0, "B": 20.0, "C": 10.0}
DEVICE_PASSBAND = {"A": (50.0, 7800.0), "B": (100.0, 4000.0), "C": (300.0, 3000.0)}
DEVICE_NONLIN = {"A": 0.01, "B": 0.1, "C": 0.3}
ASV_SPOOF_MEAN = {"A": 1.5, "B": 0.5, "C": -1.0}

ENV_IDS = ["".join(p) for p in itertools.product(LETTERS_ENV, repeat=3)]
ATTACK_IDS = [BONAFIDE] + ["".join(p) for p in itertools.product(LETTERS_ATTACK, repeat=2)]
JOINT_IDS = [e + a for e in ENV_IDS for a in ATTACK_IDS]
assert len(ENV_IDS) == 27 and len(ATTACK_IDS) == 10 and len(JOINT_IDS) == 270


@dataclass(frozen=True)
class EnvConfig:
    room_size: str = "a"
    t60: str = "a"
    talker_dist: str = "a"

    def __post_init__(self):
        for v in (self.room_size, self.t60, self.talker_dist):
            if v not in LETTERS_ENV:
                raise ValueError(f"environment letters must be in {LETTERS_ENV!r}, got {v!r}")

    @classmethod
    def from_id(cls, env_id: str) -> "EnvConfig":
        if len(env_id) != 3:
            raise ValueError(f"environment id must be 3 letters, got {env_id!r}")
        return cls(*env_id)

    @property
    def env_id(self) -> str:
        return self.room_size + self.t60 + self.talker_dist

    @property
    def reflection_spacing(self) -> float:
        return ROOM_SPACING_MS[self.room_size] / 1000.0

    @property
    def t60_seconds(self) -> float:
        return T60_S[self.t60]

    @property
    def drr_db(self) -> float:
        return DRR_DB[self.talker_dist]


@dataclass(frozen=True)
class AttackConfig:
    """Replay chain parameters. ``passband=None`` / ``snr_db=inf`` switch a stage off."""

    attacker_dist: str = "A"
    device_quality: str = "A"
    snr_db: float | None = None
    passband: tuple | None = ()
    nonlinearity: float | None = None

    def __post_init__(self):
        for v in (self.attacker_dist, self.device_quality):
            if v not in LETTERS_ATTACK:
                raise ValueError(f"attack letters must be in {LETTERS_ATTACK!r}, got {v!r}")
        if self.snr_db is None:
            object.__setattr__(self, "snr_db", ATTACKER_SNR_DB[self.attacker_dist])
        if self.passband == ():
            object.__setattr__(self, "passband", DEVICE_PASSBAND[self.device_quality])
        if self.nonlinearity is None:
            object.__setattr__(self, "nonlinearity", DEVICE_NONLIN[self.device_quality])

    @classmethod
    def from_id(cls, attack_id: str) -> "AttackConfig":
        if attack_id == BONAFIDE or len(attack_id) != 2:
            raise ValueError(f"not a spoof attack id: {attack_id!r}")
        return cls(attack_id[0], attack_id[1])

    @property
    def attack_id(self) -> str:
        return self.attacker_dist + self.device_quality


@dataclass(frozen=True)
class EnvAttackLabel:
    env_id: str
    attack_id: str

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ValueError(f"bad environment id {self.env_id!r}")
        if self.attack_id not in ATTACK_IDS:
            raise ValueError(f"bad attack id {self.attack_id!r}")

    @property
    def joint_id(self) -> str:
        return self.env_id + self.attack_id

    @property
    def bonafide(self) -> bool:
        return self.attack_id == BONAFIDE

    @classmethod
    def from_joint(cls, joint: str) -> "EnvAttackLabel":
        return cls(joint[:3], joint[3:])


def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


# ---------------------------------------------------------------------------
# signal generation


def synth_source(seed: int, duration: float = 1.0, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Speech-like test signal: drifting-pitch harmonics through three formant resonators.

    Pitch mean is drawn from 80-300 Hz with a slow +/-3 % drift; a 3-6 Hz
    syllabic envelope and low-level broadband noise are added. Peak is
    normalised to 0.5.
    """
    if not 0.5 <= duration <= 5.0:
        raise ValueError("duration must lie in [0.5, 5] s")
    rng = _rng(seed, 11)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0_mean = rng.uniform(80.0, 300.0)
    drift = np.cumsum(rng.normal(0.0, 1.0, n // 160 + 2))
    drift = np.interp(np.arange(n), np.arange(drift.size) * 160, drift)
    drift = drift - drift.mean()
    drift = 0.03 * drift / max(np.abs(drift).max(), 1e-9)
    f0 = f0_mean * (1.0 + drift)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int((sample_rate / 2 - 200.0) // (f0_mean * 1.03))
    h = np.arange(1, n_harm + 1)
    amps = 1.0 / h
    src = (amps[:, None] * np.cos(h[:, None] * phase[None, :] + rng.uniform(0, 2 * np.pi, n_harm)[:, None])).sum(0)

    y = src
    for lo, hi in ((300.0, 900.0), (900.0, 2500.0), (2000.0, 3500.0)):
        fc = rng.uniform(lo, hi)
        bw = rng.uniform(80.0, 200.0)
        r = np.exp(-np.pi * bw / sample_rate)
        a = [1.0, -2.0 * r * np.cos(2 * np.pi * fc / sample_rate), r * r]
        y = y + 0.5 * scipy.signal.lfilter([1.0 - r], a, src)

    env_rate = rng.uniform(3.0, 6.0)
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * env_rate * t + rng.uniform(0, 2 * np.pi))
    y = y * envelope
    y = y / np.abs(y).max()
    y = y + 0.01 * rng.normal(0.0, 1.0, n)
    y = 0.5 * y / np.abs(y).max()
    return Waveform(y, sample_rate)


def room_impulse_response(env: EnvConfig, seed: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Direct path + 6 early reflections + exponentially decaying noise tail.

    The tail amplitude decays as exp(-6.91 t / T60) (60 dB energy drop at T60)
    and is scaled so that direct-to-reverberant energy equals the env's DRR.
    """
    rng = _rng(seed, 21)
    T60 = env.t60_seconds
    n = int(np.ceil(T60 * sample_rate)) + 1
    h = np.zeros(n)
    h[0] = 1.0
    spacing = env.reflection_spacing
    refl = np.zeros(n)
    for k in range(1, 7):
        idx = int(round(k * spacing * sample_rate))
        if idx < n:
            refl[idx] += 0.8 ** k * rng.choice([-1.0, 1.0])
    t = np.arange(n) / sample_rate
    tail = rng.normal(0.0, 1.0, n) * np.exp(-6.91 * t / T60)
    tail[0] = 0.0
    reverb = refl + tail * np.sqrt(np.sum(refl ** 2) + 1.0) / np.sqrt(np.sum(tail ** 2))
    target = 10.0 ** (-env.drr_db / 10.0)  # reverberant energy relative to direct (=1)
    reverb *= np.sqrt(target / np.sum(reverb ** 2))
    return h + reverb


def apply_environment(w: Waveform, env: EnvConfig, seed: int) -> Waveform:
    """Full linear convolution with the environment's synthetic RIR."""
    rir = room_impulse_response(env, seed, w.sample_rate)
    y = scipy.signal.fftconvolve(w.samples, rir)
    if not np.any(w.samples):
        y = np.zeros_like(y)
    return Waveform(y, w.sample_rate)


def _device(y, attack: AttackConfig, sample_rate):
    if attack.passband is not None:
        lo, hi = attack.passband
        sos = scipy.signal.butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
        y = scipy.signal.sosfilt(sos, y)
    s = attack.nonlinearity
    if s:
        peak = np.abs(y).max()
        if peak > 0:
            g = 3.0 / peak
            y = (1.0 - s) * y + s * np.tanh(g * y) / g
    return y


def apply_attack(w: Waveform, attack: AttackConfig, env: EnvConfig, seed: int) -> Waveform:
    """Interception noise -> replay device -> re-presentation in ``env``."""
    y = w.samples.copy()
    if attack.snr_db is not None and np.isfinite(attack.snr_db):
        p = np.mean(y ** 2)
        noise = _rng(seed, 31).normal(0.0, 1.0, y.size)
        y = y + noise * np.sqrt(p / 10.0 ** (attack.snr_db / 10.0))
    y = _device(y, attack, w.sample_rate)
    return apply_environment(Waveform(y, w.sample_rate), env, seed)


def render_utterance(label: EnvAttackLabel, seed: int, duration: float,
                     sample_rate: int = SAMPLE_RATE) -> Waveform:
    src = synth_source(seed, duration, sample_rate)
    env = EnvConfig.from_id(label.env_id)
    live = apply_environment(src, env, seed)
    if label.bonafide:
        out = live
    else:
        out = apply_attack(live, AttackConfig.from_id(label.attack_id), env, seed + 1)
    y = out.samples
    return Waveform(0.5 * y / max(np.abs(y).max(), 1e-12), sample_rate)


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    path: str
    split: str
    env_id: str
    attack_id: str
    seed: int

    @property
    def label(self) -> EnvAttackLabel:
        return EnvAttackLabel(self.env_id, self.attack_id)

    @property
    def joint_id(self) -> str:
        return self.env_id + self.attack_id

    @property
    def bonafide(self) -> bool:
        return self.attack_id == BONAFIDE


@dataclass
class CorpusManifest:
    records: list

    def __post_init__(self):
        ids = [r.utt_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utterance ids in manifest")

    def split(self, name) -> list:
        return [r for r in self.records if r.split == name]

    def __len__(self):
        return len(self.records)

    def to_text(self) -> str:
        return "".join(f"{r.utt_id} {r.path} {r.split} {r.env_id} {r.attack_id} {r.seed}\n"
                       for r in self.records)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        recs = []
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{n}: expected 6 fields, got {len(parts)}")
            uid, p, split, env, att, seed = parts
            if split not in SPLITS:
                raise ValueError(f"{path}:{n}: unknown split {split!r}")
            EnvAttackLabel(env, att)
            recs.append(UtteranceRecord(uid, p, split, env, att, int(seed)))
        return cls(recs)


def assign_classes(n: int, rng) -> list:
    """Balanced joint-class assignment for ``n`` utterances.

    Full passes over all 270 classes, then a remainder drawn so that bona fide
    stays at 10 % of the remainder (rounded). Order is shuffled.
    """
    full, rem = divmod(n, len(JOINT_IDS))
    classes = JOINT_IDS * full
    if rem:
        bona = [j for j in JOINT_IDS if j.endswith(BONAFIDE)]
        spoof = [j for j in JOINT_IDS if not j.endswith(BONAFIDE)]
        n_bona = int(round(0.1 * rem))
        classes += [str(c) for c in rng.choice(bona, n_bona, replace=False)]
        classes += [str(c) for c in rng.choice(spoof, rem - n_bona, replace=False)]
    return [classes[i] for i in rng.permutation(len(classes))]


def plan_corpus(counts: dict, seed: int, root=".", min_dur=0.8, max_dur=1.5):
    """Manifest plus per-utterance durations, without rendering audio."""
    recs, durs = [], []
    for si, split in enumerate(SPLITS):
        n = int(counts.get(split, 0))
        if n == 0:
            continue
        rng = _rng(seed, 100 + si)
        classes = assign_classes(n, rng)
        seeds = rng.integers(0, 2 ** 31 - 2, size=n)
        d = rng.uniform(min_dur, max_dur, size=n)
        for i, joint in enumerate(classes):
            uid = f"{split[0].upper()}_{i:06d}"
            path = str(Path("wav") / split / f"{uid}.wav")
            recs.append(UtteranceRecord(uid, path, split, joint[:3], joint[3:], int(seeds[i])))
            durs.append(round(float(d[i]), 3))
    return CorpusManifest(recs), durs


def _render_job(args):
    rec, dur, root = args
    w = render_utterance(rec.label, rec.seed, dur)
    write_wav(Path(root) / rec.path, w)
    return rec.utt_id


def generate_corpus(counts: dict, seed: int, root, threads: int = 1,
                    min_dur: float = 0.8, max_dur: float = 1.5) -> CorpusManifest:
    """Render every utterance to ``root/wav/<split>/`` and write ``root/manifest.txt``.

    Each utterance's audio depends only on its own manifest seed, so output is
    identical for any ``threads``.
    """
    for split in SPLITS:
        if split in counts and int(counts[split]) < 1:
            raise ValueError(f"split {split!r} needs at least one utterance")
    root = Path(root)
    manifest, durs = plan_corpus(counts, seed, root, min_dur, max_dur)
    jobs = [(r, d, str(root)) for r, d in zip(manifest.records, durs)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            list(ex.map(_render_job, jobs, chunksize=16))
    else:
        for j in jobs:
            _render_job(j)
    manifest.save(root / "manifest.txt")
    log.info("wrote %d utterances under %s", len(manifest), root)
    return manifest


def simulate_asv_scores(manifest: CorpusManifest | list, seed: int) -> ScoreSet:
    """Gaussian stand-in for an ASV system.

    Each bona fide utterance yields a target trial N(2, 1) and a non-target
    trial N(-2, 1); each spoofed one a spoof trial N(mu_q, 1), with mu_q set by
    the replay device quality (better device, higher score).
    """
    records = manifest.records if isinstance(manifest, CorpusManifest) else list(manifest)
    if not records:
        raise ValueError("empty manifest")
    rng = _rng(seed, 41)
    ids, scores, keys = [], [], []
    for r in records:
        if r.bonafide:
            ids += [r.utt_id, r.utt_id + "-non"]
            scores += [rng.normal(2.0, 1.0), rng.normal(-2.0, 1.0)]
            keys += ["target", "nontarget"]
        else:
            ids.append(r.utt_id)
            scores.append(rng.normal(ASV_SPOOF_MEAN[r.attack_id[1]], 1.0))
            keys.append("spoof")
    return ScoreSet(ids, np.array(scores), keys)
