"""Command-line entry point: ``phonovis {synth,train,eval,gradcheck,sweep,report}``.

Exit codes: 0 ok, 1 verification failure, 2 config or parse error, 3 I/O
error, 4 numerical abort. Default paths live under ``$PHONOVIS_OUTPUT_ROOT``
(``runs`` when unset).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import gradcheck, synthcorpus
from .config import ConfigError, ExperimentConfig
from .metrics import LandmarkError, LandmarkSequence, evaluate_pair, write_metrics_csv
from .prototypes import soft_assign
from .router import write_routing_trace
from .synthcorpus import MouthFitter
from .training import NumericalAbort, RunReport, make_corpus, save_checkpoint, split_corpus, train

log = logging.getLogger("phonovis")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

SWEEP_FIELDS = ["S", "M", "K", "status", "L_align", "L_router", "L_gen", "total", "align_acc",
                "zero_shot_acc", "routing_nmi", "tokens_per_second", "parameter_count", "seconds"]


class CommandError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------- config plumbing


def load_config(args) -> ExperimentConfig:
    """Config file (if any), then ``--set key=value`` overrides, then path flags."""
    try:
        text = Path(args.config).read_text() if args.config else ""
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read config {args.config}: {exc.strerror}") from None
    try:
        cfg = ExperimentConfig.parse(text, args.config or "<config>")
        overrides = {}
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = value.strip()  # the last --set for a key wins
        if overrides:
            cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    except ConfigError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    changes = {}
    if getattr(args, "corpus", None):
        changes["corpus"] = args.corpus
    if getattr(args, "out", None):
        changes["output"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _with_corpus_shape(cfg: ExperimentConfig, universe, languages, unseen) -> ExperimentConfig:
    """Adopt the corpus dimensions so a config written for another corpus still fits."""
    return cfg.replace(d_p=universe.phoneme_archetypes.shape[1], d_v=universe.viseme_archetypes.shape[1],
                       K_true=universe.K, T=languages[0].utterances[0].T, unseen=list(unseen))


def _read_corpus(path):
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise CommandError(EXIT_IO, f"no corpus at {root} (run 'phonovis synth' first)")
    try:
        return synthcorpus.load_corpus(root)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read corpus {root}: {exc}") from None
    except (ValueError, KeyError, LandmarkError) as exc:
        raise CommandError(EXIT_CONFIG, f"corrupt corpus {root}: {exc}") from None


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write {path}: {exc.strerror}") from None


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = load_config(args)
    try:
        universe, languages = make_corpus(cfg)
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    try:
        manifest = synthcorpus.save_corpus(cfg.corpus, universe, languages, cfg.unseen)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write corpus to {cfg.corpus}: {exc.strerror}") from None
    problems = synthcorpus.validate_corpus(universe, languages)
    if problems:
        raise CommandError(EXIT_VERIFY, "corpus failed validation:\n  " + "\n  ".join(problems))
    print(f"corpus: {cfg.corpus}")
    print(f"languages: {', '.join(manifest['languages'])} (unseen: {', '.join(manifest['unseen']) or '-'})")
    print(f"files: {manifest['n_files']}  content hash: {manifest['content_hash']}")
    return EXIT_OK


def _epoch_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    keys = ["epoch", "align", "router", "gen", "total", "align_acc"]
    w.writerow(["epoch", "L_align", "L_router", "L_gen", "total", "align_acc"])
    for e in report.epochs:
        w.writerow([repr(e[k]) if isinstance(e[k], float) else e[k] for k in keys])
    return buf.getvalue()


def run_training(cfg: ExperimentConfig, out: Path, exports: bool = True) -> RunReport:
    """Train from the corpus at ``cfg.corpus`` and write every artifact under ``out``."""
    universe, languages, unseen = _read_corpus(cfg.corpus)
    cfg = _with_corpus_shape(cfg, universe, languages, unseen)
    _write(out / "config.txt", cfg.to_text())
    try:
        report, model = train(cfg, universe, languages, unseen, checkpoint_dir=out / "checkpoint")
    except NumericalAbort as exc:
        if exc.report is not None:
            _write(out / "report.json", exc.report.to_json())
        raise CommandError(EXIT_NUMERIC, f"numerical abort: {exc}; last good checkpoint in "
                                         f"{out / 'checkpoint'}") from None
    try:
        save_checkpoint(model, out / "checkpoint")
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write checkpoint: {exc.strerror}") from None
    _write(out / "report.json", report.to_json())
    _write(out / "report.txt", report.table() + "\n")
    _write(out / "epochs.csv", _epoch_csv(report))
    if exports:
        _, held, _ = split_corpus(languages, unseen, cfg.holdout, cfg.seed)
        outcome, frames = model.infer(held)
        labels = soft_assign(model.embed_p(held.flat("z_p")), model.bank_p)
        write_routing_trace(out / "routing_trace.csv", labels, outcome)
        # first held-out utterance as a landmark pair for 'phonovis eval'
        held.landmarks[0].save(out / "landmarks_real.json")
        MouthFitter().landmarks(frames[0]).save(out / "landmarks_generated.json")
    return report


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.output)
    report = run_training(cfg, out)
    print(report.table())
    print(f"artifacts: {out}")
    return EXIT_OK


def _landmark_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix == ".json")
    if path.is_file():
        return [path]
    raise CommandError(EXIT_IO, f"no such file or directory: {path}")


def cmd_eval(args) -> int:
    real_files = _landmark_files(Path(args.real))
    gen_files = _landmark_files(Path(args.generated))
    if len(real_files) != len(gen_files):
        raise CommandError(EXIT_CONFIG, f"{len(real_files)} real files but {len(gen_files)} generated files")
    if Path(args.real).is_dir() and [p.name for p in real_files] != [p.name for p in gen_files]:
        raise CommandError(EXIT_CONFIG, "real and generated directories must hold the same file names")
    rows = []
    for rp, gp in zip(real_files, gen_files):
        try:
            real = LandmarkSequence.load(rp, "real")
            gen = LandmarkSequence.load(gp, "generated")
            rows.append((rp.stem, evaluate_pair(real, gen, normalize=args.normalize)))
        except LandmarkError as exc:
            raise CommandError(EXIT_CONFIG, f"parse error: {exc}") from None
        except ValueError as exc:
            raise CommandError(EXIT_CONFIG, f"{rp.name} vs {gp.name}: {exc}") from None
        except OSError as exc:
            raise CommandError(EXIT_IO, f"cannot read landmarks: {exc}") from None
    if args.out:
        try:
            write_metrics_csv(args.out, rows)
        except OSError as exc:
            raise CommandError(EXIT_IO, f"cannot write {args.out}: {exc.strerror}") from None
    else:
        write_metrics_csv(sys.stdout, rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = tuple(int(s) for s in args.seeds.split(","))
    try:
        rows = gradcheck.run_suite(seeds, corrupt=args.corrupt)
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    print(gradcheck.format_table(rows))
    failed = sorted({r.family for r in rows if not r.passed}, key=gradcheck.FAMILIES.index)
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(rows)} checks below {gradcheck.TOLERANCE:g}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def sweep_rows(base: ExperimentConfig, S_values, M_values, K_values, out: Path):
    """Train every (S, M, K) combination; S > M rows are reported as skipped."""
    rows = []
    for K in K_values:
        for S in S_values:
            for M in M_values:
                row = dict.fromkeys(SWEEP_FIELDS, "")
                row.update(S=S, M=M, K=K)
                try:
                    cfg = base.replace(S=S, M=M, K=K, output=str(out / f"S{S}_M{M}_K{K}"))
                except ConfigError as exc:
                    row["status"] = f"skipped: {exc}"
                    rows.append(row)
                    log.info("sweep S=%d M=%d K=%d skipped", S, M, K)
                    continue
                try:
                    report = run_training(cfg, Path(cfg.output), exports=False)
                except CommandError as exc:
                    if exc.code != EXIT_NUMERIC:
                        raise
                    row["status"] = "aborted"
                    rows.append(row)
                    continue
                last = report.epochs[-1] if report.epochs else {}
                row.update(status="ok", L_align=last.get("align", ""), L_router=last.get("router", ""),
                           L_gen=last.get("gen", ""), total=last.get("total", ""),
                           align_acc=report.alignment_accuracy, zero_shot_acc=report.zero_shot_accuracy,
                           routing_nmi=report.routing_nmi, tokens_per_second=report.tokens_per_second,
                           parameter_count=report.parameter_count, seconds=report.wall_clock)
                rows.append(row)
                log.info("sweep S=%d M=%d K=%d: acc %.4f, %.0f tokens/s", S, M, K,
                         report.alignment_accuracy, report.tokens_per_second)
    return rows


def cmd_sweep(args) -> int:
    base = load_config(args)
    out = Path(base.output)
    rows = sweep_rows(base, args.S, args.M, args.K or [base.K], out)
    buf = io.StringIO()
    w = csv.DictWriter(buf, SWEEP_FIELDS)
    w.writeheader()
    w.writerows(rows)
    _write(out / "sweep.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    print(f"sweep table: {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.run)
    if path.is_dir():
        path = path / "report.json"
    try:
        report = RunReport.from_json(path.read_text())
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read {path}: {exc.strerror}") from None
    except (json.JSONDecodeError, TypeError) as exc:
        raise CommandError(EXIT_CONFIG, f"{path} is not a run report: {exc}") from None
    if args.json:
        print(report.to_json())
    elif args.csv:
        print(_epoch_csv(report), end="")
    else:
        print(report.table())
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phonovis", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("synth", help="generate the synthetic corpus")
    config_args(sp)
    sp.add_argument("--corpus", help="corpus directory (default: $PHONOVIS_OUTPUT_ROOT/corpus)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train on a corpus and write a run report")
    config_args(sp)
    sp.add_argument("--corpus", help="corpus directory")
    sp.add_argument("--out", help="run directory (default: $PHONOVIS_OUTPUT_ROOT/run)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="LSE-D / TMDC for real vs generated landmark files")
    sp.add_argument("real", help="landmark JSON file or directory")
    sp.add_argument("generated", help="landmark JSON file or directory (same file names)")
    sp.add_argument("--normalize", action="store_true", help="normalize landmarks before scoring")
    sp.add_argument("--out", help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    sp.add_argument("--seeds", default=",".join(map(str, gradcheck.SEEDS)))
    sp.add_argument("--corrupt", choices=gradcheck.FAMILIES, help="perturb one analytic gradient")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sweep", help="train over S / M / K grids")
    config_args(sp)
    sp.add_argument("--corpus", help="corpus directory")
    sp.add_argument("--out", help="sweep directory (default: $PHONOVIS_OUTPUT_ROOT/run)")
    sp.add_argument("--S", type=_int_list, default=[1, 2, 3])
    sp.add_argument("--M", type=_int_list, default=[2, 3, 4, 5, 6])
    sp.add_argument("--K", type=_int_list, default=None, help="default: the config's K")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="print a saved run report")
    sp.add_argument("run", help="run directory or report.json")
    group = sp.add_mutually_exclusive_group()
    group.add_argument("--json", action="store_true")
    group.add_argument("--csv", action="store_true", help="per-epoch losses as CSV")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"phonovis: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
