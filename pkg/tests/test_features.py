import numpy as np
import pytest
import scipy.signal
from hypothesis import given, settings, strategies as st

from replaycm import features as F
from replaycm.dsp import Waveform

SR = 16000


def noise(seconds=1.0, seed=0):
    return Waveform(0.3 * np.random.default_rng(seed).normal(size=int(seconds * SR)), SR)


def smooth_rows(rng, n, M):
    """Band-limited random rows: a few low-frequency cosines plus an offset."""
    t = np.arange(M) / M
    rows = rng.normal(size=(n, 1)) * 3
    for k in range(1, 4):
        rows = rows + rng.normal(size=(n, 1)) * np.cos(2 * np.pi * k * t + rng.uniform(0, 6.3, (n, 1)))
    return rows


def test_table_defaults():
    expect = {"MFCC": (70, 300, 8000), "IMFCC": (60, 200, 8000), "RFCC": (30, 200, 8000),
              "LFCC": (70, 100, 7800), "SCMC": (40, 100, 8000), "CQCC": (50, 15.62, 8000)}
    for kind, (n, lo, hi) in expect.items():
        cfg = F.FeatureConfig.for_kind(kind)
        assert (cfg.n_coeffs, cfg.f_min, cfg.f_max) == (n, lo, hi)
        assert cfg.n_coeffs <= cfg.n_bands


def test_config_validation():
    with pytest.raises(ValueError):
        F.FeatureConfig.for_kind("PLP")
    with pytest.raises(ValueError):
        F.FeatureConfig(feature_kind="MFCC", n_coeffs=50, n_bands=40)


@pytest.mark.parametrize("kind", F.KINDS)
def test_every_extractor_emits_table_rows(kind):
    fm = F.extract(noise(1.0), F.FeatureConfig.for_kind(kind))
    assert fm.values.shape == (F.TABLE[kind][0], 98)
    assert np.all(np.isfinite(fm.values))


def test_scmc_lowpass_changes_features():
    w = noise(1.0, 1)
    sos = scipy.signal.butter(8, 4000, fs=SR, output="sos")
    lp = Waveform(scipy.signal.sosfilt(sos, w.samples), SR)
    cfg = F.FeatureConfig.for_kind("SCMC")
    a, b = F.extract(w, cfg).values, F.extract(lp, cfg).values
    assert np.mean(np.abs(a - b)) > 0


def test_scmc_band_formula_flat_spectrum_and_scaling():
    from replaycm import dsp
    fb = dsp.make_filterbank("linear", 40, 100, 8000)
    freqs = np.fft.rfftfreq(512, 1 / SR)
    flat = np.full((2, 257), 0.7)
    np.testing.assert_allclose(F.scmc_band_magnitudes(flat, fb.weights, freqs), 0.7, rtol=1e-12)
    mags = np.abs(np.random.default_rng(0).normal(size=(3, 257)))
    m = F.scmc_band_magnitudes(mags, fb.weights, freqs)
    np.testing.assert_allclose(F.scmc_band_magnitudes(5.0 * mags, fb.weights, freqs), 5.0 * m, rtol=1e-12)


def test_downsample_identity_at_ten():
    x = np.random.default_rng(0).normal(size=(40, 10))
    out = F.downsample_frames(F.FeatureMatrix(x, "SCMC")).values
    assert np.array_equal(out, x)


@pytest.mark.parametrize("M", [11, 37, 98, 500])
def test_downsample_constant_row(M):
    out = F.downsample_frames(F.FeatureMatrix(np.full((2, M), 3.25), "SCMC")).values
    np.testing.assert_allclose(out, 3.25, atol=1e-12)


def test_downsample_matches_scipy_resample():
    rng = np.random.default_rng(4)
    for M in (11, 12, 98, 99, 257):
        x = rng.normal(size=(5, M))
        np.testing.assert_allclose(F.fft_resample_rows(x, 10), scipy.signal.resample(x, 10, axis=1),
                                   atol=1e-12)


def test_downsample_98_frames_mean_and_std():
    rng = np.random.default_rng(5)
    x = smooth_rows(rng, 200, 98)
    out = F.fft_resample_rows(x, 10)
    np.testing.assert_allclose(out.mean(axis=1), x.mean(axis=1), atol=1e-9)
    ratio = out.std(axis=1) / x.std(axis=1)
    assert np.all(np.abs(ratio - 1) < 0.2)


@settings(max_examples=100, deadline=None)
@given(st.integers(11, 500), st.integers(0, 2 ** 31))
def test_downsample_preserves_mean_property(M, seed):
    x = np.random.default_rng(seed).normal(size=(1, M)) * 10
    out = F.fft_resample_rows(x, 10)
    assert out.shape == (1, 10)
    assert abs(out.mean() - x.mean()) < 1e-9


def test_stack_definition_and_roundtrip():
    f = F.FeatureMatrix(np.array([[1.0, 2.0], [3.0, 4.0]]), "SCMC")
    assert F.stack_frames(f, 2).tolist() == [1.0, 3.0, 2.0, 4.0]
    x = np.random.default_rng(0).normal(size=(40, 10))
    v = F.stack_frames(F.FeatureMatrix(x, "SCMC"))
    assert v.shape == (400,)
    assert np.array_equal(F.unstack_frames(v, 40), x)


def test_stack_requires_downsampled():
    with pytest.raises(ValueError, match="downsample"):
        F.stack_frames(F.FeatureMatrix(np.zeros((40, 12)), "SCMC"))


def test_concat_embedding():
    v = np.zeros(400)
    assert F.concat_embedding(v, np.ones(10)).shape == (410,)
    np.testing.assert_allclose(F.concat_embedding(v, np.ones(10), 0.1)[400:], 0.1)
    assert np.all(F.concat_embedding(v, np.ones(10), 0.0)[400:] == 0)
    with pytest.raises(ValueError):
        F.concat_embedding(v, np.ones(9))


def test_rescaler_examples(tmp_path):
    r = F.fit_rescaler([[2.0, -4.0]])
    np.testing.assert_allclose(r.apply([2.0, -4.0]), [1.0, -1.0])
    np.testing.assert_allclose(r.apply([1.0, 2.0]), [0.5, 0.5])
    z = F.fit_rescaler([[0.0, 3.0], [0.0, -1.0]])
    assert z.max_abs[0] == 1.0
    np.testing.assert_allclose(z.apply([5.0, 3.0]), [5.0, 1.0])
    r.save(tmp_path / "r.txt")
    assert np.array_equal(F.Rescaler.load(tmp_path / "r.txt").max_abs, r.max_abs)


def test_rescaler_no_clamping_and_refit_idempotent():
    X = np.random.default_rng(0).normal(size=(50, 6))
    r = F.fit_rescaler(X)
    Y = r.apply(X)
    assert np.allclose(np.abs(Y).max(axis=0), 1.0)
    assert np.abs(r.apply(3 * X)).max() > 1.0
    np.testing.assert_allclose(np.abs(F.fit_rescaler(Y).apply(Y)).max(axis=0), 1.0)


def test_archive_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    mats = rng.normal(size=(3, 40, 10)).astype(np.float32).astype(np.float64)
    ar = F.Archive("SCMC", ["u1", "u2", "u3"], mats, config_hash="abc")
    F.write_archive(tmp_path / "f.rdf", ar)
    back = F.read_archive(tmp_path / "f.rdf")
    assert back.ids == ar.ids and back.kind == "SCMC" and back.config_hash == "abc"
    assert np.array_equal(back.matrices, mats)
    assert (tmp_path / "f.rdf").read_bytes()[:8] == b"RDFEAT01"
    v = back.vectors()
    assert np.array_equal(v[1], F.stack_frames(F.FeatureMatrix(mats[1], "SCMC")))
    sub = back.subset(["u3", "u1"])
    assert sub.ids == ["u3", "u1"] and np.array_equal(sub.matrices[0], mats[2])


def test_archive_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTMAGIC" + b"\0" * 20)
    with pytest.raises(F.ArchiveError):
        F.read_archive(tmp_path / "bad")
