"""Command-line entry point: ``gxlstm <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness as H
from .corpus import CorpusError, EMOTIONS, write_corpus
from .ded import PosteriorRecord, ShiftModel, decode_records, read_posteriors, write_posteriors
from .numerics import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--seed", type=int, help="run seed (gen-data: generator seed)")
    p.add_argument("--out-dir", default=".", help="directory for output files (default: .)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set epochs=3 --set synthetic.n_dialogues=20")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gxlstm", description="Gated xLSTM emotion recognition in conversation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="write a synthetic corpus as a GXEB file")
    _common(p)
    p.add_argument("--output", help="corpus file (default: <out-dir>/corpus.gxeb)")

    p = sub.add_parser("train", help="train one seed; write checkpoint and test-split results")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split of its config")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--decoder", choices=("none", "ded"), help="override the configured decoder")

    p = sub.add_parser("decode", help="DED over a posterior JSONL file; writes labels as JSONL")
    _common(p)
    p.add_argument("--posteriors", required=True, help="posterior JSONL input")
    p.add_argument("--output", help="label JSONL output (default: stdout)")
    p.add_argument("--p0", type=float, help="speaker-shift probability (default: config or checkpoint)")
    p.add_argument("--checkpoint", help="take p0 from this checkpoint's training split")

    p = sub.add_parser("ablate", help="{base, gated} x {none, ded} grid over the run seeds")
    _common(p)

    p = sub.add_parser("protocol", help="train/test every run seed; write summary.csv (mean ± std)")
    _common(p)

    p = sub.add_parser("report-gates", help="mean |gate| per stream as CSV and SVG")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of the full model's gradients")
    _common(p)
    p.add_argument("--coords-per-param", type=int, default=14)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


# ---------------------------------------------------------------------------


def _load_config(args) -> H.RunConfig:
    """Config file plus ``--set`` overrides; any problem with them is a usage error."""
    try:
        raw = H.parse_config_text(Path(args.config).read_text()) if args.config else {}
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"{args.config}: {exc}") from exc
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        raw = _merge_nested(raw, H.parse_config_text(item))
    try:
        return H.RunConfig.from_dict(raw).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _merge_nested(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = {**out[k], **v} if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _run_seed(args, cfg: H.RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    syn = cfg.synthetic if args.seed is None else replace(cfg.synthetic, seed=args.seed)
    from .corpus import generate_synthetic

    corpus = generate_synthetic(syn)
    path = Path(args.output) if args.output else _out_dir(args) / "corpus.gxeb"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, path)
    print(f"wrote {path}: {len(corpus.dialogues)} dialogues, {corpus.n_utterances} utterances, "
          f"dim {corpus.embedding_dim}")
    return EXIT_OK


def _write_posteriors(path, ev) -> None:
    enc = ev.encoded
    records = [PosteriorRecord(d, int(i), s, list(p), EMOTIONS[int(g)])
               for d, i, s, p, g in zip(enc.dialogue_ids, enc.indices, enc.speakers, ev.posteriors,
                                        enc.batch.labels)]
    write_posteriors(records, path)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    seed = _run_seed(args, cfg)
    splits = H.make_splits(cfg)
    ck = H.train(cfg, seed, splits)
    ev = H.evaluate_full(ck, splits.test, cfg.decoder)
    out = _out_dir(args)
    H.write_run_outputs(out, ck, ev)
    _write_posteriors(out / "posteriors.jsonl", ev)
    print(f"seed {seed}: best epoch {ck.epoch}; test split ({cfg.decoder} decoder)")
    print(ev.report.table())
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = H.load_checkpoint(args.checkpoint)
    cfg = ck.config
    if args.config or args.set:
        cfg = _load_config(args)
        ck = replace(ck, config=cfg)
    decoder = args.decoder or cfg.decoder
    splits = H.make_splits(cfg)
    ev = H.evaluate_full(ck, splits.test, decoder)
    out = _out_dir(args)
    (out / "metrics.csv").write_text(ev.report.metrics_csv())
    (out / "confusion.csv").write_text(ev.report.confusion_csv())
    _write_posteriors(out / "posteriors.jsonl", ev)
    print(ev.report.table())
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = _load_config(args)
    records = read_posteriors(args.posteriors)
    p0 = args.p0
    if p0 is None and args.checkpoint:
        p0 = H.load_checkpoint(args.checkpoint).p0
    if p0 is None:
        p0 = cfg.p0
    if p0 is None:
        raise UsageError("decode needs p0: pass --p0, --checkpoint, or set p0 in the config")
    decoded = decode_records(records, cfg.decode_config(), ShiftModel(p0))
    lines = [json.dumps({"dialogue_id": did, "index": i, "label": lab}, sort_keys=True)
             for did, rows in decoded.items() for i, lab in rows]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    result = H.ablate(cfg)
    (_out_dir(args) / "ablation.csv").write_text(result.to_csv())
    print(result.table())
    return EXIT_OK


def cmd_protocol(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    result = H.run_protocol(cfg, _out_dir(args))
    for k in ("weighted_accuracy", "weighted_f1", "balanced_accuracy"):
        m, s = result.summary[k]
        print(f"{k:<18} {H.fmt_pm(m, s)}")
    return EXIT_OK


def cmd_report_gates(args) -> int:
    from .gated import export_gate_report

    ck = H.load_checkpoint(args.checkpoint)
    cfg = _load_config(args) if (args.config or args.set) else ck.config
    splits = H.make_splits(cfg)
    out = _out_dir(args)
    report = export_gate_report(ck.model(), splits.test, out / "gates.csv", out / "gates.svg")
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    seed = 0 if args.seed is None else args.seed
    report = H.model_grad_check(seed=seed, coords_per_param=args.coords_per_param, tolerance=args.tolerance)
    print(f"max relative error {report.max_rel_error:.3e} over {report.n_coords} coordinates "
          f"(tolerance {report.tolerance:g}): {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "decode": cmd_decode,
    "ablate": cmd_ablate, "protocol": cmd_protocol, "report-gates": cmd_report_gates,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0; every parse error exits EXIT_USAGE
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"gxlstm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"gxlstm {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, OSError, ValueError, KeyError) as exc:
        print(f"gxlstm {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
