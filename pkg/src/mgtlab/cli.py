"""Command-line interface.

Subcommands map one-to-one onto the library's pipeline stages: ingest,
moderate, split, score, calibrate, eval, transfer, fewshot, cil, report,
prompts. Exit codes: 0 success, 1 usage error, 2 data/contract error.
The `report` subcommand renders figures next to the delimited output.
"""

import argparse
import csv
import json
import os
import sys

from .bench import (BenchConfig, emit_report, load_report,
                    run_cil, run_few_shot, run_in_distribution, run_transfer)
from .continual import CILConfig, LwFConfig, TECHNIQUES
from .corpus import (build_polish_prompt, load_policy, moderate_corpus,
                     read_jsonl, split_train_test, write_jsonl,
                     write_rejections_csv)
from .decision import calibrate_threshold
from .detectors import FeatureVector, get_detector, score_text
from .neural import TrainConfig
from .scorer import TransportError, external_backend, fit_reference_unigram
from .util import ContractError, DataError, UsageError, derive_seed

_ROLES = ("scoring", "sampling", "observer", "performer")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; we reserve 2 for data errors
    def error(self, message):
        raise UsageError(message)


def _read_docs(path: str):
    result = read_jsonl(path)
    if result.errors:
        for lineno, msg in result.errors[:10]:
            print(f"warning: {path}:{lineno}: {msg}", file=sys.stderr)
        if len(result.errors) > 10:
            print(f"warning: ... {len(result.errors) - 10} more", file=sys.stderr)
    return result.documents


def _make_backend(spec: str, cache_dir):
    if spec.startswith(("http://", "https://")):
        return external_backend(spec, cache_dir=cache_dir)
    if spec.startswith("unigram:"):
        path = spec[len("unigram:"):]
        if path.endswith(".jsonl"):
            text = "\n".join(d.text for d in _read_docs(path))
        else:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        return fit_reference_unigram(text)
    raise UsageError(
        f"unrecognized backend spec {spec!r}; expected 'unigram:PATH' or an http(s) URL")


def _build_backends(args) -> dict:
    backends = {}
    for raw in getattr(args, "backend", None) or []:
        role, sep, rest = raw.partition("=")
        if sep and role in _ROLES:
            spec = rest
        else:
            role, spec = "scoring", raw
        if role in backends:
            raise UsageError(f"duplicate backend role {role!r}")
        backends[role] = _make_backend(spec, getattr(args, "cache_dir", None))
    return backends


def _require_scoring(backends: dict, detector: str) -> dict:
    if detector != "supervised" and "scoring" not in backends:
        raise UsageError(
            f"detector {detector!r} needs a scoring backend (--backend)")
    return backends


def _bench_config(args) -> BenchConfig:
    cfg = BenchConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise DataError("config file must hold a JSON object")
        train = data.pop("train", None)
        cil = data.pop("cil", None)
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise ContractError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
        if train is not None:
            cfg.train = TrainConfig(**train)
        if cil is not None:
            lwf = cil.pop("lwf", None)
            cfg.cil = CILConfig(**cil)
            if lwf is not None:
                cfg.cil.lwf = LwFConfig(**lwf)
    for key in ("seed", "task", "decision", "classifier", "ratio"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "skip_first", False):
        cfg.skip_first = True
    return cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    result = read_jsonl(args.input)
    write_jsonl(result.documents, args.out)
    if args.errors:
        with open(args.errors, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["line", "message"])
            for lineno, msg in result.errors:
                writer.writerow([lineno, msg])
    print(f"ingested {len(result.documents)} documents "
          f"({len(result.errors)} bad lines) -> {args.out}")
    return 0


def cmd_moderate(args) -> int:
    docs = _read_docs(args.input)
    policy = load_policy(args.policy)
    max_tokens = None
    if args.split == "machine" and not args.no_truncate:
        max_tokens = args.max_tokens
    kept, rejections = moderate_corpus(docs, policy, args.split, max_tokens)
    write_jsonl(kept, args.out)
    if args.rejects:
        write_rejections_csv(rejections, args.rejects)
    print(f"kept {len(kept)}/{len(docs)} ({len(rejections)} rejected) -> {args.out}")
    return 0


def cmd_split(args) -> int:
    docs = _read_docs(args.input)
    split = split_train_test(docs, args.ratio, derive_seed(args.seed, "split"))
    write_jsonl(split.train, args.out_train)
    write_jsonl(split.test, args.out_test)
    print(f"train {len(split.train)} -> {args.out_train}; "
          f"test {len(split.test)} -> {args.out_test}")
    return 0


def cmd_score(args) -> int:
    docs = _read_docs(args.input)
    spec = get_detector(args.detector)
    backends = _require_scoring(_build_backends(args), args.detector)
    header = ["id", "label"]
    if spec.vector_valued:
        first = score_text(args.detector, backends, docs[0].text,
                           args.skip_first) if docs else None
        header += list(first.names) if first else []
    else:
        header += ["score"]
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for doc in docs:
            value = score_text(args.detector, backends, doc.text, args.skip_first)
            if isinstance(value, FeatureVector):
                writer.writerow([doc.id, doc.label] + [repr(v) for v in value.values])
            else:
                writer.writerow([doc.id, doc.label, repr(float(value))])
    finally:
        if args.out:
            out.close()
    if args.out:
        print(f"scored {len(docs)} documents -> {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    docs = _read_docs(args.input)
    spec = get_detector(args.detector)
    if spec.vector_valued:
        raise ContractError(
            f"{args.detector} is vector-valued; thresholds need a scalar score")
    backends = _require_scoring(_build_backends(args), args.detector)
    scores = [float(score_text(args.detector, backends, d.text, args.skip_first))
              for d in docs]
    labels = ["human" if d.is_human() else "machine" for d in docs]
    rule = calibrate_threshold(scores, labels, direction=spec.direction,
                               detector=args.detector)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(rule.to_dict(), f, indent=2)
        f.write("\n")
    print(f"threshold {rule.threshold!r} ({rule.direction}), "
          f"train F1 {rule.train_f1:.4f} -> {args.out}")
    return 0


def _emit(obj, args) -> int:
    if args.out:
        emit_report(obj, "json", args.out)
        print(f"wrote {args.out}")
    else:
        from .bench import _to_payload
        json.dump(_to_payload(obj), sys.stdout, indent=2)
        print()
    return 0


def cmd_eval(args) -> int:
    docs = _read_docs(args.input)
    config = _bench_config(args)
    backends = _require_scoring(_build_backends(args), args.detector)
    report = run_in_distribution(docs, args.detector, backends, config)
    print(f"macro F1 {report.macro_f1:.4f} on {report.metadata['n_test']} test docs",
          file=sys.stderr)
    return _emit(report, args)


def cmd_transfer(args) -> int:
    corpora = {}
    for pair in args.corpus:
        key, sep, path = pair.partition("=")
        if not sep or not key or not path:
            raise UsageError(f"--corpus expects KEY=PATH, got {pair!r}")
        if key in corpora:
            raise UsageError(f"duplicate corpus key {key!r}")
        corpora[key] = _read_docs(path)
    config = _bench_config(args)
    backends = _require_scoring(_build_backends(args), args.detector)
    matrix = run_transfer(corpora, args.axis, args.detector, backends, config)
    return _emit(matrix, args)


def cmd_fewshot(args) -> int:
    source = _read_docs(args.source)
    target = _read_docs(args.target)
    config = _bench_config(args)
    backends = _require_scoring(_build_backends(args), args.detector)
    report = run_few_shot(source, target, args.k, args.detector, backends, config)
    return _emit(report, args)


def cmd_cil(args) -> int:
    docs = _read_docs(args.input)
    config = _bench_config(args)
    techniques = ([t.strip() for t in args.techniques.split(",") if t.strip()]
                  if args.techniques else list(TECHNIQUES))
    result = run_cil(docs, techniques, args.new_class, config)
    return _emit(result, args)


def cmd_report(args) -> int:
    obj = load_report(args.input)
    stem = os.path.splitext(args.out)[0] if args.out else \
        os.path.splitext(args.input)[0]
    out_csv = args.out or stem + ".csv"
    emit_report(obj, "csv", out_csv)
    written = [out_csv]
    if not args.no_figures:
        from .figures import render_for
        written += render_for(obj, stem)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_prompts(args) -> int:
    if args.text:
        with open(args.text, "r", encoding="utf-8") as f:
            text = f.read().strip()
    else:
        text = "<text>"   # leave the slot visible
    sys.stdout.write(build_polish_prompt(args.source_kind, text))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgtlab",
                     description="machine-generated-text detection benchmark")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, backend=False, bench=False):
        p.add_argument("--seed", type=int, default=None)
        if backend:
            p.add_argument("--backend", action="append", metavar="[ROLE=]SPEC",
                           help="unigram:PATH or http(s) URL; roles: "
                                + ", ".join(_ROLES))
            p.add_argument("--cache-dir", default=None)
            p.add_argument("--skip-first", action="store_true",
                           help="drop the context-free first token score")
        if bench:
            p.add_argument("--config", default=None,
                           help="JSON file of benchmark settings")
            p.add_argument("--task", choices=["binary", "attribution"],
                           default=None)
            p.add_argument("--decision", choices=["threshold", "classifier"],
                           default=None)
            p.add_argument("--classifier", choices=["logistic", "linear_svm"],
                           default=None)
            p.add_argument("--ratio", type=float, default=None)
            p.add_argument("--out", default=None)

    p = sub.add_parser("ingest", help="normalize a JSONL corpus")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--errors", default=None, help="CSV of bad input lines")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("moderate", help="quality-filter one corpus split")
    p.add_argument("input")
    p.add_argument("--split", choices=["human", "machine"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rejects", default=None, help="CSV rejection log")
    p.add_argument("--policy", default=None, help="JSON policy override")
    p.add_argument("--max-tokens", type=int, default=2048,
                   help="machine split: truncate to this many words")
    p.add_argument("--no-truncate", action="store_true")
    p.set_defaults(func=cmd_moderate)

    p = sub.add_parser("split", help="seeded stratified train/test split")
    p.add_argument("input")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    common(p)
    p.set_defaults(func=cmd_split, seed=0)

    p = sub.add_parser("score", help="per-document detector scores as CSV")
    p.add_argument("input")
    p.add_argument("--detector", required=True)
    p.add_argument("--out", default=None)
    common(p, backend=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate", help="fit a decision threshold")
    p.add_argument("input")
    p.add_argument("--detector", required=True)
    p.add_argument("--out", required=True)
    common(p, backend=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="in-distribution evaluation")
    p.add_argument("input")
    p.add_argument("--detector", required=True)
    common(p, backend=True, bench=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="cross-corpus transfer matrix")
    p.add_argument("--corpus", action="append", required=True,
                   metavar="KEY=PATH")
    p.add_argument("--axis", choices=["domain", "llm"], required=True)
    p.add_argument("--detector", required=True)
    common(p, backend=True, bench=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("fewshot", help="transfer with k target shots per class")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("-k", type=int, required=True)
    p.add_argument("--detector", required=True)
    common(p, backend=True, bench=True)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("cil", help="class-incremental update benchmark")
    p.add_argument("input")
    p.add_argument("--new-class", action="append", required=True)
    p.add_argument("--techniques", default=None,
                   help="comma list; default all of "
                        + ",".join(TECHNIQUES))
    common(p, bench=True)
    p.set_defaults(func=cmd_cil)

    p = sub.add_parser("report",
                       help="render a JSON report to CSV plus figures")
    p.add_argument("input")
    p.add_argument("--out", default=None, help="CSV path (default: beside input)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("prompts", help="print a text-polishing prompt")
    p.add_argument("source_kind", choices=["wiki", "arxiv", "gutenberg"])
    p.add_argument("--text", default=None, help="file whose content fills the slot")
    p.set_defaults(func=cmd_prompts)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:   # --help
        return int(e.code or 0)
    if not getattr(args, "command", None):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, ContractError, TransportError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
