import numpy as np
import pytest
from scipy.stats import norm

from replaycm import metrics
from replaycm import simcorpus as S
from replaycm.dsp import Waveform
from replaycm.wav import quantize, read_wav

SR = 16000


def test_label_algebra():
    assert len(S.ENV_IDS) == 27 and len(set(S.ENV_IDS)) == 27
    assert len(S.ATTACK_IDS) == 10 and S.ATTACK_IDS[0] == "00"
    assert len(set(S.JOINT_IDS)) == 270
    for bad in ("ad", "abcd"):
        with pytest.raises(ValueError):
            S.EnvConfig.from_id(bad)
    with pytest.raises(ValueError):
        S.AttackConfig.from_id("00")
    assert S.EnvAttackLabel.from_joint("abcBC").joint_id == "abcBC"


def test_environment_parameters_ordered():
    cfgs = [S.EnvConfig(x, x, x) for x in "abc"]
    assert [c.reflection_spacing for c in cfgs] == sorted(c.reflection_spacing for c in cfgs)
    assert [c.t60_seconds for c in cfgs] == [0.1, 0.4, 0.8]
    assert [c.drr_db for c in cfgs] == [12.0, 6.0, 0.0]


def test_synth_source_deterministic_and_normalised():
    a, b = S.synth_source(5, 1.0), S.synth_source(5, 1.0)
    assert np.array_equal(a.samples, b.samples)
    assert abs(np.abs(a.samples).max() - 0.5) < 1e-6
    assert not np.array_equal(a.samples, S.synth_source(6, 1.0).samples)
    with pytest.raises(ValueError):
        S.synth_source(0, 0.2)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_synth_source_harmonic_peaks(seed):
    # the pitch mean is the first draw of the source generator
    f0 = np.random.default_rng([seed, 11]).uniform(80.0, 300.0)
    w = S.synth_source(seed, 2.0)
    spec = np.abs(np.fft.rfft(w.samples))
    freqs = np.fft.rfftfreq(w.samples.size, 1 / SR)
    for k in (1, 2, 3):
        band = (freqs > (k - 0.5) * f0) & (freqs < (k + 0.5) * f0)
        peak = freqs[band][np.argmax(spec[band])]
        assert abs(peak - k * f0) < 10.0, (k, peak, k * f0)


def schroeder_rt60(y, start):
    """RT60 from a T20 fit on the backward-integrated energy decay after ``start``."""
    e = np.cumsum((y[start:] ** 2)[::-1])[::-1]
    edc = 10 * np.log10(e / e[0] + 1e-300)
    t = np.arange(edc.size) / SR
    sel = (edc <= -5) & (edc >= -25)
    slope = np.polyfit(t[sel], edc[sel], 1)[0]
    return -60.0 / slope


def test_rt60_short_vs_long_room():
    burst = np.zeros(int(1.5 * SR))
    burst[:320] = S.synth_source(3, 0.5).samples[:320]
    w = Waveform(burst, SR)
    short = schroeder_rt60(S.apply_environment(w, S.EnvConfig("b", "a", "b"), 9).samples, 320)
    long = schroeder_rt60(S.apply_environment(w, S.EnvConfig("b", "c", "b"), 9).samples, 320)
    assert long - short > 0.3, (short, long)


@pytest.mark.parametrize("t60", ["a", "b", "c"])
def test_impulse_response_envelope(t60):
    env = S.EnvConfig("a", t60, "c")
    imp = np.zeros(SR)
    imp[0] = 1.0
    out = S.apply_environment(Waveform(imp, SR), env, 4).samples
    rir = S.room_impulse_response(env, 4)
    np.testing.assert_allclose(out[:rir.size], rir, atol=1e-12)
    # block energies of the tail after the early reflections against exp(-6.91 t / T60)
    T60 = env.t60_seconds
    block = 80
    start = int(0.03 * SR)
    tail = rir[start:(rir.size // block) * block]
    tail = tail[:(tail.size // block) * block].reshape(-1, block)
    log_env = 0.5 * np.log(np.mean(tail ** 2, axis=1))
    t = (start + block * (np.arange(log_env.size) + 0.5)) / SR
    model = -6.91 * t / T60
    resid = log_env - model
    resid = resid - resid.mean()
    r2 = 1 - np.sum(resid ** 2) / np.sum((log_env - log_env.mean()) ** 2)
    assert r2 > 0.9, r2


def test_zero_input_zero_output():
    out = S.apply_environment(Waveform(np.zeros(4000), SR), S.EnvConfig("c", "c", "c"), 1)
    assert not np.any(out.samples)


def high_band_fraction(y):
    p = np.abs(np.fft.rfft(y)) ** 2
    f = np.fft.rfftfreq(y.size, 1 / SR)
    return p[f > 4000].sum() / p.sum()


def test_device_quality_a_vs_c_high_band_energy():
    w = Waveform(0.1 * np.random.default_rng(0).normal(size=SR), SR)
    env = S.EnvConfig("a", "a", "a")
    a = S.apply_attack(w, S.AttackConfig("A", "A"), env, 5).samples
    c = S.apply_attack(w, S.AttackConfig("A", "C"), env, 5).samples
    drop = 10 * np.log10(high_band_fraction(a) / high_band_fraction(c))
    assert drop > 10, drop


def test_transparent_attack_is_double_environment():
    env = S.EnvConfig("b", "b", "a")
    live = S.apply_environment(S.synth_source(1, 0.6), env, 2)
    clear = S.AttackConfig("A", "A", snr_db=np.inf, passband=None, nonlinearity=0.0)
    got = S.apply_attack(live, clear, env, 2).samples
    np.testing.assert_allclose(got, S.apply_environment(live, env, 2).samples, atol=1e-12)


def test_attack_deterministic():
    env = S.EnvConfig("c", "a", "b")
    w = S.synth_source(2, 0.6)
    a = S.apply_attack(w, S.AttackConfig("C", "B"), env, 8).samples
    b = S.apply_attack(w, S.AttackConfig("C", "B"), env, 8).samples
    assert np.array_equal(a, b)


def test_plan_coverage_and_bonafide_fraction():
    manifest, durs = S.plan_corpus({"train": 2700, "dev": 900, "eval": 900}, seed=3)
    train = manifest.split("train")
    assert len(train) == 2700
    assert {r.joint_id for r in train} == set(S.JOINT_IDS)
    for split in S.SPLITS:
        recs = manifest.split(split)
        frac = np.mean([r.bonafide for r in recs])
        assert abs(frac - 0.10) <= 0.01, (split, frac)
    assert all(0.8 <= d <= 1.5 for d in durs)
    ids = [r.utt_id for r in manifest.records]
    assert len(set(ids)) == len(ids)


def test_small_split_bonafide_fraction():
    manifest, _ = S.plan_corpus({"dev": 137}, seed=0)
    assert sum(r.bonafide for r in manifest.records) == round(0.1 * 137)


def test_generate_corpus_roundtrip_and_determinism(tmp_path):
    counts = {"train": 6, "dev": 3, "eval": 2}
    m1 = S.generate_corpus(counts, 11, tmp_path / "a", min_dur=0.5, max_dur=0.6)
    m2 = S.generate_corpus(counts, 11, tmp_path / "b", min_dur=0.5, max_dur=0.6)
    assert (tmp_path / "a" / "manifest.txt").read_text() == (tmp_path / "b" / "manifest.txt").read_text()
    assert S.CorpusManifest.load(tmp_path / "a" / "manifest.txt").records == m1.records
    _, durs = S.plan_corpus(counts, 11, min_dur=0.5, max_dur=0.6)
    for rec, dur in zip(m1.records, durs):
        raw_a = (tmp_path / "a" / rec.path).read_bytes()
        assert raw_a == (tmp_path / "b" / rec.path).read_bytes()
        w = read_wav(tmp_path / "a" / rec.path)
        expect = quantize(S.render_utterance(rec.label, rec.seed, dur).samples) / 32768.0
        assert np.array_equal(w.samples, expect)
    assert len(m2) == 11


def test_generate_corpus_rejects_empty_split(tmp_path):
    with pytest.raises(ValueError):
        S.generate_corpus({"train": 0}, 1, tmp_path)


def test_manifest_load_reports_line(tmp_path):
    (tmp_path / "m.txt").write_text("T_000000 wav/x.wav train aaa 00 5\nT_1 p nope aaa 00 1\n")
    with pytest.raises(ValueError, match="m.txt:2"):
        S.CorpusManifest.load(tmp_path / "m.txt")


def test_asv_scores():
    manifest, _ = S.plan_corpus({"train": 27000}, seed=1)
    ss = S.simulate_asv_scores(manifest, 7)
    again = S.simulate_asv_scores(manifest, 7)
    assert np.array_equal(ss.scores, again.scores)
    tar, non = ss.of("target"), ss.of("nontarget")
    assert tar.size >= 1000
    eer, _ = metrics.compute_eer(tar, non)
    assert abs(eer - norm.cdf(-2.0)) < 0.01, eer
    by_q = {q: [] for q in "ABC"}
    for rec, s in zip((r for r in manifest.records if not r.bonafide), ss.of("spoof")):
        by_q[rec.attack_id[1]].append(s)
    assert min(len(v) for v in by_q.values()) >= 1000
    assert np.mean(by_q["A"]) - np.mean(by_q["C"]) > 2
