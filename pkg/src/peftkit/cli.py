"""Command-line entry point.

Exit status: 0 success, 1 failed audit, 2 malformed data file, 64 usage or
invalid config, 65 bad data content, 66 missing input file. Standard output
carries JSON; diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import save_checkpoint
from .errors import ConfigError, FormatError, UndefinedMetricError
from .linalg import load_tensor, save_tensor
from .quantize import ASYMMETRIC, SYMMETRIC, dequantize, load_qtensor, quantize, save_qtensor, storage_report
from .trainer import RunConfig, compression_report, finite_difference_audit, format_compression_table, train

EXIT_OK = 0
EXIT_AUDIT_FAILED = 1
EXIT_FORMAT = 2
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_NOINPUT = 66

ROUGE_METRICS = ("rouge1", "rouge2", "rougeL", "rougeS")
METRICS = ROUGE_METRICS + ("wer",)


class CliError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, f"usage: {message}")


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_NOINPUT, f"cannot open {path}: {exc.strerror}") from None


def _load_config(path: str) -> RunConfig:
    if not Path(path).is_file():
        raise CliError(EXIT_NOINPUT, f"cannot open {path}")
    try:
        return RunConfig.from_json(path)
    except ConfigError as exc:
        raise CliError(EXIT_USAGE, f"invalid config: {exc}") from None


# ------------------------------------------------------------- commands


def cmd_quantize(args) -> int:
    _read_bytes(args.input)
    x = load_tensor(args.input)
    if args.codec == "nf4":
        if args.mode is not None:
            raise CliError(EXIT_USAGE, "usage: --mode does not apply to --codec nf4")
        mode = SYMMETRIC
    else:
        mode = ASYMMETRIC if args.mode == "asym" else SYMMETRIC
    qt = quantize(x, args.codec, args.block, mode, args.double_quant, args.super_block)
    save_qtensor(args.output, qt)
    _emit(storage_report(qt))
    return EXIT_OK


def cmd_dequantize(args) -> int:
    _read_bytes(args.input)
    qt = load_qtensor(args.input)
    save_tensor(args.output, dequantize(qt))
    _emit({"rows": qt.rows, "cols": qt.cols, "codec": qt.codec.name.lower(), "output": args.output})
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config)
    report = train(config)
    Path(args.output).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files = []
    if args.checkpoint:
        files = [str(p) for p in save_checkpoint(report.model, args.checkpoint)]
    print(report.summary(), file=sys.stderr)
    _emit({
        "report": args.output,
        "checkpoints": files,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "trainable_params": report.trainable_params,
    })
    return EXIT_OK


def cmd_audit(args) -> int:
    config = _load_config(args.config)
    try:
        worst = finite_difference_audit(config, args.epsilon)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"invalid config: {exc}") from None
    passed = bool(worst < args.tolerance)
    _emit({"epsilon": args.epsilon, "max_rel_error": worst, "tolerance": args.tolerance, "passed": passed})
    return EXIT_OK if passed else EXIT_AUDIT_FAILED


def cmd_report(args) -> int:
    config = _load_config(args.config)
    report = compression_report(config)
    if args.format == "text":
        print(format_compression_table(report))
    else:
        _emit(report)
    return EXIT_OK


def _read_jsonl(path: str) -> list[tuple[str, str]]:
    raw = _read_bytes(path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise CliError(EXIT_FORMAT, f"format error: {path} is not UTF-8") from None
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_FORMAT, f"format error: {path}:{lineno}: {exc.msg}") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("id"), str) or not isinstance(obj.get("text"), str):
            raise CliError(EXIT_FORMAT, f'format error: {path}:{lineno}: expected {{"id": str, "text": str}}')
        records.append((obj["id"], obj["text"]))
    return records


def _score(metric: str, candidate: str, references: list[str]) -> dict:
    if metric == "wer":
        b = metrics.wer(references[0], candidate)
        return {
            "score": b.wer,
            "substitutions": b.substitutions,
            "deletions": b.deletions,
            "insertions": b.insertions,
            "reference_length": b.reference_length,
        }
    if metric in ("rouge1", "rouge2"):
        return {"score": metrics.rouge_n(candidate, references, int(metric[-1])).value}
    fn = metrics.rouge_l if metric == "rougeL" else metrics.rouge_s
    # several references: score each and average
    values = [fn(candidate, ref).value for ref in references]
    return {"score": sum(values) / len(values)}


def evaluate_files(candidates_path: str, references_path: str, metric: str) -> dict:
    candidates = _read_jsonl(candidates_path)
    references = _read_jsonl(references_path)
    cand = {}
    for id_, text in candidates:
        if id_ in cand:
            raise CliError(EXIT_DATA, f"duplicate candidate id {id_!r}")
        cand[id_] = text
    refs: dict[str, list[str]] = {}
    for id_, text in references:
        refs.setdefault(id_, []).append(text)
    missing_refs = sorted(set(cand) - set(refs))
    missing_cands = sorted(set(refs) - set(cand))
    if missing_refs or missing_cands:
        parts = []
        if missing_refs:
            parts.append(f"no reference for ids {missing_refs}")
        if missing_cands:
            parts.append(f"no candidate for ids {missing_cands}")
        raise CliError(EXIT_DATA, "; ".join(parts))
    scores = []
    for id_ in refs:
        if metric == "wer" and len(refs[id_]) > 1:
            raise CliError(EXIT_DATA, f"WER takes one reference, id {id_!r} has {len(refs[id_])}")
        try:
            entry = _score(metric, cand[id_], refs[id_])
        except UndefinedMetricError as exc:
            raise CliError(EXIT_DATA, f"undefined metric for id {id_!r}: {exc}") from None
        scores.append({"id": id_, **entry})
    out = {
        "metric": metric,
        "count": len(scores),
        "mean": sum(s["score"] for s in scores) / len(scores) if scores else None,
        "scores": scores,
    }
    if metric == "wer":
        edits = sum(s["substitutions"] + s["deletions"] + s["insertions"] for s in scores)
        words = sum(s["reference_length"] for s in scores)
        out["corpus_wer"] = edits / words if words else None
    return out


def cmd_eval(args) -> int:
    result = evaluate_files(args.candidates, args.references, args.metric)
    if args.format == "text":
        width = max([len(s["id"]) for s in result["scores"]] + [4])
        print(f"{'id':<{width}}  {args.metric:>10}")
        for s in result["scores"]:
            print(f"{s['id']:<{width}}  {s['score']:>10.4f}")
        if result["mean"] is not None:
            print(f"{'mean':<{width}}  {result['mean']:>10.4f}")
    else:
        _emit(result)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="peftkit", description="Adapters, quantization and metrics toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", help="quantize a PFT1 tensor to a PFTQ file")
    q.add_argument("--in", dest="input", required=True)
    q.add_argument("--out", dest="output", required=True)
    q.add_argument("--codec", choices=("int8", "int4", "nf4"), required=True)
    q.add_argument("--mode", choices=("sym", "asym"), default=None, help="affine codecs only (default sym)")
    q.add_argument("--block", type=int, default=64)
    q.add_argument("--double-quant", action="store_true")
    q.add_argument("--super-block", type=int, default=256)
    q.set_defaults(fn=cmd_quantize)

    d = sub.add_parser("dequantize", help="decode a PFTQ file to a PFT1 tensor")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", dest="output", required=True)
    d.set_defaults(fn=cmd_dequantize)

    t = sub.add_parser("train", help="run a training config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", dest="output", required=True)
    t.add_argument("--checkpoint", default=None, help="directory for adapter/base checkpoints")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("audit-grads", help="finite-difference gradient audit of a config")
    a.add_argument("--config", required=True)
    a.add_argument("--epsilon", type=float, default=1e-4)
    a.add_argument("--tolerance", type=float, default=1e-3)
    a.set_defaults(fn=cmd_audit)

    for name, choices, default in (
        ("eval", METRICS, None),
        ("eval-rouge", ROUGE_METRICS, "rouge1"),
        ("eval-wer", ("wer",), "wer"),
    ):
        e = sub.add_parser(name, help=f"score candidates against references ({', '.join(choices)})")
        e.add_argument("--candidates", required=True)
        e.add_argument("--references", required=True)
        e.add_argument("--metric", choices=choices, default=default, required=default is None)
        e.add_argument("--format", choices=("json", "text"), default="json")
        e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="compression table for a config")
    r.add_argument("--config", required=True)
    r.add_argument("--format", choices=("json", "text"), default="json")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "block", 1) < 1 or getattr(args, "super_block", 1) < 1:
            raise CliError(EXIT_USAGE, "usage: block sizes must be >= 1")
        return args.fn(args)
    except CliError as exc:
        print(f"peftkit: {exc}", file=sys.stderr)
        return exc.status
    except FormatError as exc:
        print(f"peftkit: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ConfigError as exc:
        print(f"peftkit: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"peftkit: cannot open {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_NOINPUT


if __name__ == "__main__":
    sys.exit(main())
