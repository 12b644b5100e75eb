"""Command-line entry point: ``avsekd <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from .config import ConfigError, RunConfig, describe_keys

log = logging.getLogger("avsekd")


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    return cfg.apply_overrides(args.set)


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="UTF-8 file of 'key = value' lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def cmd_synth_corpus(args) -> int:
    from .corpus import generate_corpus

    cfg = _load_config(args)
    for flag, key in (("n_train", "corpus.n_train"), ("n_valid", "corpus.n_valid"),
                      ("n_test", "corpus.n_test"), ("seed", "corpus.seed")):
        value = getattr(args, flag)
        if value is not None:
            cfg.set(key, str(value))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    manifest = generate_corpus(
        out,
        n_train=cfg["corpus.n_train"],
        n_valid=cfg["corpus.n_valid"],
        n_test=cfg["corpus.n_test"],
        seed=cfg["corpus.seed"],
        min_duration=cfg["corpus.min_duration"],
        max_duration=cfg["corpus.max_duration"],
        sample_rate=cfg["spectral.sample_rate"],
    )
    print(f"wrote {len(manifest.records)} utterances to {out}")
    return 0


def _read_manifest(path):
    from .corpus import CorpusManifest

    if not (Path(path) / "manifest.tsv").is_file():
        raise UsageError(f"no manifest.tsv in {path}")
    return CorpusManifest.read(path)


def cmd_train(args) -> int:
    from .training import log_series, train_student, train_teacher

    if args.role == "student" and not args.teacher:
        raise UsageError("--role student requires --teacher CKPT")
    if args.role == "teacher" and args.teacher:
        raise UsageError("--teacher is only accepted with --role student")
    if args.teacher and not Path(args.teacher).is_file():
        raise UsageError(f"teacher checkpoint {args.teacher} does not exist")
    cfg = _load_config(args)
    manifest = _read_manifest(args.corpus)
    try:
        model_config, train_config = cfg.model(), cfg.train()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        if args.role == "teacher":
            path = train_teacher(manifest, model_config, train_config, args.out)
        else:
            path = train_student(manifest, model_config, train_config, args.out, args.teacher)
    best = min(log_series(path.with_name(f"{args.role}_log.tsv"), "valid", "loss")[1:])
    print(f"checkpoint\t{path}")
    print(f"best_valid_loss\t{best!r}")
    return 0


def cmd_enhance(args) -> int:
    from .checkpoint import load_checkpoint
    from .training import enhance

    for p in (args.ckpt, args.in_wav, args.lip) + ((args.tongue,) if args.tongue else ()):
        if not Path(p).is_file():
            raise UsageError(f"input {p} does not exist")
    net, _ = load_checkpoint(args.ckpt)
    if net.kind == "teacher" and not args.tongue:
        raise UsageError("teacher checkpoint needs --tongue")
    if net.kind == "student" and args.tongue:
        print("warning: student checkpoint ignores --tongue", file=sys.stderr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        enhance(args.ckpt, args.in_wav, args.lip, args.tongue, args.out_wav)
    print(f"wrote {args.out_wav}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_corpus

    cfg = _load_config(args)
    if args.ckpt and not Path(args.ckpt).is_file():
        raise UsageError(f"checkpoint {args.ckpt} does not exist")
    manifest = _read_manifest(args.corpus)
    report = evaluate_corpus(
        manifest,
        args.ckpt,
        cfg["metrics.conditions"],
        split=cfg["metrics.split"],
        include_oracle=cfg["metrics.include_oracle"],
        pesq=cfg.pesq(),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.tsv").write_text(report.rows_tsv(), encoding="utf-8")
    (out / "summary.tsv").write_text(report.summary_tsv(), encoding="utf-8")
    print(report.table())
    if report.failures:
        print(f"{len(report.failures)} utterance/condition pairs failed", file=sys.stderr)
        return 1
    return 0


def cmd_per_report(args) -> int:
    from .peranalysis import per_report

    for p in (args.ref, args.hyp) + ((args.map,) if args.map else ()):
        if not Path(p).is_file():
            raise UsageError(f"input {p} does not exist")
    text = per_report(args.ref, args.hyp, args.map)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    epilog = describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="avsekd", description="Audio-visual speech enhancement with tongue-to-lip distillation.",
        epilog=epilog, formatter_class=fmt,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="write the synthetic corpus", epilog=epilog, formatter_class=fmt)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-valid", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int)
    _add_config_args(p)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("train", help="train a teacher or student network", epilog=epilog, formatter_class=fmt)
    p.add_argument("--role", choices=("teacher", "student"), required=True)
    p.add_argument("--corpus", required=True, help="directory holding manifest.tsv")
    p.add_argument("--out", required=True, help="directory for the checkpoint and training log")
    p.add_argument("--teacher", help="teacher checkpoint (required for --role student)")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one noisy recording", epilog=epilog, formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in-wav", required=True)
    p.add_argument("--lip", required=True, help="lip video (.uvf)")
    p.add_argument("--tongue", help="tongue video (.uvf); teacher checkpoints only")
    p.add_argument("--out-wav", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus split", epilog=epilog, formatter_class=fmt)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", help="checkpoint to score; omit to score only the noisy mixtures")
    p.add_argument("--out", required=True, help="directory for metrics.tsv and summary.tsv")
    _add_config_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("per-report", help="per-category phone error rates", epilog=epilog, formatter_class=fmt)
    p.add_argument("--ref", required=True, help="reference phone file")
    p.add_argument("--hyp", required=True, help="hypothesis phone file")
    p.add_argument("--map", help="phone<TAB>category file (default: built-in ARPAbet map)")
    p.add_argument("--out", help="write the TSV report here as well")
    _add_config_args(p)
    p.set_defaults(func=cmd_per_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command != "synth-corpus" or args.config or args.set:
            _load_config(args)  # reject unknown keys before any work
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"avsekd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"avsekd {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
