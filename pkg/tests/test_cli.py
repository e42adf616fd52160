import numpy as np
import pytest

from replaycm import cli
from replaycm import features as F
from replaycm import metrics as M
from replaycm.config import load_config, override_flags

TINY = ["--corpus-n-train", "540", "--corpus-n-dev", "270", "--corpus-n-eval", "0",
        "--corpus-min-duration", "0.8", "--corpus-max-duration", "0.9"]
SMALL_NETS = ["--tdnn-frame-dim", "16", "--tdnn-stats-dim", "32", "--tdnn-embed-dim", "32",
              "--tdnn-segment-dim", "16", "--tdnn-max-epochs", "3",
              "--cm-filters", "4", "--train-max-epochs", "5"]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("sub", sorted(cli.SUBCOMMANDS))
def test_help_lists_every_override(sub, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([sub, "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for _, _, flag, _ in override_flags():
        assert flag in out, flag


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run([], capsys)[0] == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["extract", "--workdir", str(tmp_path), "--bogus"])
    assert e.value.code == 1
    code, _, err = run(["simulate", "--workdir", str(tmp_path)], capsys)
    assert code == 1 and "--seed" in err
    code, _, err = run(["extract", "--workdir", str(tmp_path), "--cm-filters", "many"], capsys)
    assert code == 1
    code, _, err = run(["eval", "--scores", "x"], capsys)
    assert code == 1 and "go together" in err


def test_missing_inputs_exit_2_with_one_line(tmp_path, capsys):
    for sub in ("extract", "train-xvec", "extract-xvec", "fit-lda", "train-cm", "score", "analyze"):
        extra = ["--seed", "1"] if sub in cli.SEEDED else []
        code, _, err = run([sub, "--workdir", str(tmp_path)] + extra, capsys)
        assert code == 2, sub
        assert len(err.strip().splitlines()) == 1 and "missing input" in err, (sub, err)


def test_eval_perfect_separation(tmp_path, capsys):
    M.write_scores(tmp_path / "cm.scores", ["a", "b", "c", "d"], [0.9, 0.8, -0.7, -0.9])
    M.write_keys(tmp_path / "cm.keys", ["a", "b", "c", "d"], ["bonafide", "bonafide", "spoof", "spoof"])
    rng = np.random.default_rng(0)
    n = 200
    ids = [str(i) for i in range(3 * n)]
    M.write_scores(tmp_path / "asv.scores", ids,
                   np.concatenate([rng.normal(2, 1, n), rng.normal(-2, 1, n), rng.normal(0, 1, n)]))
    M.write_keys(tmp_path / "asv.keys", ids, ["target"] * n + ["nontarget"] * n + ["spoof"] * n)
    code, out, _ = run(["eval", "--scores", str(tmp_path / "cm.scores"), "--keys", str(tmp_path / "cm.keys"),
                        "--asv-scores", str(tmp_path / "asv.scores"),
                        "--asv-keys", str(tmp_path / "asv.keys")], capsys)
    assert code == 0
    assert out.splitlines()[0] == "EER 0.00%"


def test_numeric_failure_exit_3(tmp_path, capsys, monkeypatch):
    from replaycm import pipeline
    from replaycm.nnet import NumericError

    def boom(*a, **k):
        raise NumericError("non-finite loss at epoch 1")
    monkeypatch.setattr(pipeline, "train_cm", boom)
    assert run(["train-cm", "--workdir", str(tmp_path), "--seed", "1"], capsys)[0] == 3


def test_config_file_and_flag_precedence(tmp_path):
    (tmp_path / "exp.ini").write_text("[cm]\nnoise_std = 0.01\nfilters = 8\n[corpus]\nseed = 4\n")
    cfg = load_config(tmp_path / "exp.ini", {("cm", "filters"): "16"})
    assert cfg.cm.noise_std == 0.01 and cfg.cm.filters == 16 and cfg.corpus.seed == 4
    default = load_config()
    assert (default.features.kind, default.combine.xvector_scale, default.cm.noise_std,
            default.train.lr, default.train.patience) == ("SCMC", 0.1, 0.001, 0.001, 5)
    assert default.combine.use_signal and default.combine.use_xvector
    (tmp_path / "bad.ini").write_text("[cm]\nwidth = 3\n")
    with pytest.raises(KeyError):
        load_config(tmp_path / "bad.ini")
    assert load_config(tmp_path / "exp.ini").hash() == load_config(None, {("cm", "noise_std"): "0.01",
                                                                          ("cm", "filters"): "8"}).hash()


def test_small_pipeline_end_to_end(tmp_path, capsys):
    wd = ["--workdir", str(tmp_path)]
    code, out, _ = run(["simulate", *wd, "--seed", "3", *TINY], capsys)
    assert code == 0 and "810 utterances" in out
    manifest = (tmp_path / "corpus" / "manifest.txt").read_bytes()
    wav = (tmp_path / "corpus" / "wav" / "dev" / "D_000007.wav").read_bytes()

    code, out, _ = run(["extract", *wd, "--feature", "scmc", *TINY], capsys)
    assert code == 0 and "N=40" in out
    ar = F.read_archive(tmp_path / "features" / "train.rdf")
    assert ar.kind == "SCMC" and ar.matrices.shape == (540, 40, 10)
    feats = (tmp_path / "features" / "train.rdf").read_bytes()

    for argv in (["train-xvec", *wd, "--seed", "3"], ["extract-xvec", *wd], ["fit-lda", *wd],
                 ["train-cm", *wd, "--seed", "3"], ["score", *wd], ["eval", *wd]):
        code, out, err = run(argv + TINY + SMALL_NETS, capsys)
        assert code == 0, (argv, err)
    assert out.startswith("EER ")
    assert (tmp_path / "results" / "dev.txt").read_text() == out

    code, out, _ = run(["analyze", *wd, *TINY, *SMALL_NETS], capsys)
    assert code == 0 and "# attack" in out and "# environment" in out and "quality letter" in out

    # eval refuses a checkpoint trained under another configuration
    code, _, err = run(["eval", *wd, *TINY, *SMALL_NETS, "--cm-noise-std", "0.5"], capsys)
    assert code == 2 and "--force" in err

    # rerunning stages reproduces their artifacts byte for byte
    assert run(["simulate", *wd, "--seed", "3", *TINY], capsys)[0] == 0
    assert run(["extract", *wd, "--feature", "scmc", *TINY], capsys)[0] == 0
    assert (tmp_path / "corpus" / "manifest.txt").read_bytes() == manifest
    assert (tmp_path / "corpus" / "wav" / "dev" / "D_000007.wav").read_bytes() == wav
    assert (tmp_path / "features" / "train.rdf").read_bytes() == feats
