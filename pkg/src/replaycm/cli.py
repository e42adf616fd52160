"""Command-line entry point: ``replaycm <subcommand> --workdir DIR [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import logging
import sys

from . import embedder as E
from . import metrics as M
from . import pipeline as P
from .config import load_config, override_flags
from .features import ArchiveError
from .nnet import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("replaycm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


SUBCOMMANDS = {
    "simulate": "render the synthetic replay corpus, manifest and simulated ASV scores",
    "extract": "signal feature archives (down-sampled to M' frames)",
    "train-xvec": "train the env+attack x-vector extractor",
    "extract-xvec": "x-vector archives for every split",
    "fit-lda": "fit the LDA projection on training x-vectors",
    "train-cm": "train the countermeasure CNN",
    "score": "score a split with the trained countermeasure",
    "eval": "EER and min-tDCF of a score file",
    "analyze": "mean x-vector confusion grids (attack and environment)",
}
SEEDED = ("simulate", "train-xvec", "train-cm")


def _flag_help(default):
    return f"(default: {'<unset>' if default is None else default})"


def build_parser():
    parser = _Parser(prog="replaycm", description="Replay-attack countermeasure pipeline.")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    subs = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    for name, help_text in SUBCOMMANDS.items():
        sp = subs.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--workdir", required=name != "eval",
                        help="artifact directory")
        sp.add_argument("--config", help="experiment file (INI sections, key = value)")
        sp.add_argument("--threads", type=int, default=1, help="worker cap")
        sp.add_argument("--force", action="store_true",
                        help="accept artifacts produced under a different config")
        if name in SEEDED:
            sp.add_argument("--seed", type=int, help="RNG seed (or [corpus] seed in the config)")
        if name == "extract":
            sp.add_argument("--feature", help="feature kind, e.g. scmc, mfcc, cqcc")
        if name in ("extract", "extract-xvec"):
            sp.add_argument("--splits", default="train,dev,eval")
        if name in ("score", "eval", "analyze"):
            sp.add_argument("--split", default="dev")
        if name == "eval":
            sp.add_argument("--scores", help="score file ('id score' lines)")
            sp.add_argument("--keys", help="CM key file ('id bonafide|spoof')")
            sp.add_argument("--asv-scores", help="ASV score file")
            sp.add_argument("--asv-keys", help="ASV key file ('id target|nontarget|spoof')")
        grp = sp.add_argument_group("config overrides")
        for section, key, flag, default in override_flags():
            grp.add_argument(flag, dest=f"ov__{section}__{key}", metavar="V",
                             help=_flag_help(default))
    return parser


def _config(args):
    overrides = {}
    for k, v in vars(args).items():
        if k.startswith("ov__") and v is not None:
            _, section, key = k.split("__")
            overrides[(section, key)] = v
    if getattr(args, "feature", None):
        overrides[("features", "kind")] = args.feature.upper()
    try:
        return load_config(args.config, overrides)
    except (KeyError, ValueError) as e:
        raise UsageError(str(e)) from None


def _seed(args, cfg):
    seed = args.seed if args.seed is not None else cfg.corpus.seed
    if seed is None:
        raise UsageError(f"{args.command} needs an explicit --seed (or [corpus] seed in the config)")
    return int(seed)


def _splits(args):
    return tuple(s for s in args.splits.split(",") if s)


def run(args) -> int:
    cfg = _config(args)
    wd = args.workdir
    cmd = args.command
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if cmd == "simulate":
        man = P.simulate(cfg, wd, _seed(args, cfg), args.threads)
        print(f"wrote {len(man)} utterances to {P.Paths(wd).manifest}")
    elif cmd == "extract":
        out = P.extract(cfg, wd, _splits(args))
        for split, ar in out.items():
            print(f"{split}: {len(ar.ids)} x {ar.kind} (N={ar.n}, M'={ar.m}) -> {P.Paths(wd).features(split)}")
    elif cmd == "train-xvec":
        res = P.train_xvec(cfg, wd, _seed(args, cfg))
        print(f"classes {len(res.classes)} val_accuracy {res.val_accuracy:.4f} "
              f"best_epoch {res.history.best_epoch}")
    elif cmd == "extract-xvec":
        out = P.extract_xvec(cfg, wd, _splits(args), args.force)
        for split, ar in out.items():
            print(f"{split}: {len(ar.ids)} x-vectors (dim {ar.n}) -> {P.Paths(wd).xvectors(split)}")
    elif cmd == "fit-lda":
        lda = P.fit_lda(cfg, wd, args.force)
        print(f"LDA {lda.in_dim} -> {lda.out_dim} over {len(lda.classes)} classes")
    elif cmd == "train-cm":
        r = P.train_cm(cfg, wd, _seed(args, cfg), args.force)
        print(f"best_epoch {r.history.best_epoch} of {len(r.history.history)} "
              f"-> {P.Paths(wd).cm}")
    elif cmd == "score":
        ids, _, _ = P.score(cfg, wd, args.split, force=args.force)
        print(f"scored {len(ids)} utterances -> {P.Paths(wd).scores(args.split)}")
    elif cmd == "eval":
        return _eval(args, cfg)
    elif cmd == "analyze":
        grids = P.analyze(cfg, wd, args.split, args.force)
        for grouping, (names, mat) in grids.items():
            print(f"# {grouping}")
            print(E.format_grid(names, mat), end="")
        names, mat = grids["attack"]
        print(f"attack grouping: distance letter {E.grouping_strength(names, mat, 0):.4f} "
              f"quality letter {E.grouping_strength(names, mat, 1):.4f}")
    else:
        raise UsageError("a subcommand is required")
    return EXIT_OK


def _eval(args, cfg) -> int:
    explicit = [args.scores, args.keys, args.asv_scores, args.asv_keys]
    if any(explicit):
        if not all(explicit):
            raise UsageError("--scores, --keys, --asv-scores and --asv-keys go together")
        res = P.evaluate_files(cfg, *explicit)
        print(res.text, end="")
        return EXIT_OK
    if args.workdir is None:
        raise UsageError("eval needs --workdir or explicit score/key files")
    p = P.Paths(args.workdir)
    if p.cm.exists():
        from .nnet import read_checkpoint_hash
        P._check_hash(p.cm, read_checkpoint_hash(p.cm), cfg.hash(), args.force)
    res = P.eval_split(cfg, args.workdir, args.split)
    print(res.text, end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return run(args)
    except UsageError as e:
        print(f"replaycm {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"replaycm {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (P.StageInputError, P.ConfigMismatchError, ArchiveError, M.MetricError,
            E.EmbedderError, OSError, ValueError) as e:
        print(f"replaycm {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
