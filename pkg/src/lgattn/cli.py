"""Command-line entry point: train, eval, generate, flops, data pack, check.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

from lgattn import kvtext
from lgattn.attention import ATTN_KINDS
from lgattn.config import RunConfig, defaults, parse_config
from lgattn.errors import ConfigError, LgattnError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def config_keys_help() -> str:
    lines = ["config keys (file key=value or --key VALUE; flags override the file):"]
    for key, value in defaults().items():
        lines.append(f"  {key} = {kvtext.format_value(value)}")
    return "\n".join(lines)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for f in dataclasses.fields(RunConfig):
        p.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="VALUE",
                       help=f"(default: {kvtext.format_value(f.default)})")


def _config_from_args(args) -> RunConfig:
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return parse_config(args.config, flags)


def _load_rows(path, seq_len: int, mask_cross_doc: bool):
    from lgattn.checkpoint import MAGIC
    from lgattn.data import load_packed, pack_rows, read_documents

    path = Path(path)
    if path.is_file() and path.read_bytes()[: len(MAGIC)] == MAGIC:
        return load_packed(path)
    # one extra token per row: inputs are row[:-1], targets row[1:]
    return pack_rows(read_documents(path), seq_len + 1, mask_cross_doc)


# -- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    from lgattn.data import bucket_by_length, read_documents
    from lgattn.trainer import eval_ppl, train, write_ppl_csv

    cfg = _config_from_args(args)
    sys.stdout.write(cfg.to_text())
    if cfg.train_data is None:
        raise ConfigError("training needs a data path", key="train_data")
    tokens, mask = _load_rows(cfg.train_data, cfg.seq_len, cfg.mask_cross_doc)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    result = train(cfg.model_config(), tokens, mask, cfg.steps, cfg.schedule(), batch_size=cfg.batch_size,
                   seed=cfg.seed, log_every=cfg.log_every, checkpoint_path=out / "checkpoint.zbra",
                   log_path=out / "metrics.csv", **cfg.optim_kwargs())
    if result.log:
        step, lr, loss = result.log[-1]
        print(f"# final step={step} lr={lr:.3g} loss={loss:.4f}", file=sys.stderr)
    if cfg.eval_data is not None:
        docs = read_documents(cfg.eval_data)
        write_ppl_csv(out / "eval.csv", eval_ppl(result.weights, docs, bucket_by_length(docs), cfg.seq_len))
    return EXIT_OK


def cmd_eval(args) -> int:
    from lgattn.checkpoint import load_checkpoint
    from lgattn.data import bucket_by_length, read_documents
    from lgattn.trainer import eval_ppl, write_ppl_csv

    weights, _ = load_checkpoint(args.checkpoint)
    docs = read_documents(args.data)
    rows = eval_ppl(weights, docs, bucket_by_length(docs, args.max_exponent), args.seq_len)
    write_ppl_csv(args.out if args.out else sys.stdout, rows)
    return EXIT_OK


def _override_attention(weights, spec: str | None):
    if not spec:
        return weights
    types = kvtext.field_types(type(weights.config))
    changes = {}
    for item in spec.split(","):
        if "=" not in item:
            changes["attn"] = item.strip()
            continue
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in ("attn", "window", "chunk", "group_size", "logit_side_compensation"):
            raise ConfigError("only attention keys can be overridden at generation time", key=key)
        changes[key] = kvtext.coerce(key, raw, types[key])
    weights.config = weights.config.replace(**changes)
    return weights


def cmd_generate(args) -> int:
    from lgattn.checkpoint import load_checkpoint
    from lgattn.data import detokenize, tokenize
    from lgattn.inference import DecodeSession, generate
    from lgattn.model import BOS

    weights, _ = load_checkpoint(args.checkpoint)
    weights = _override_attention(weights, args.attn_override)
    prompt = [BOS] + tokenize(args.prompt)
    out = generate(DecodeSession(weights), prompt, args.max_new)
    sys.stdout.write(detokenize(out) + "\n")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_flops(args) -> int:
    from lgattn.complexity import CostModel, rows_to_csv, sweep

    kinds = list(ATTN_KINDS) if args.attn == "all" else [k.strip() for k in args.attn.split(",")]
    for k in kinds:
        if k not in ATTN_KINDS:
            raise ConfigError(f"unknown attention kind {k!r}", key="attn")
    ns = _int_list(args.grid) if args.grid else [args.N]
    grid = [CostModel(args.D, n, args.W, args.C, args.L) for n in ns]
    sys.stdout.write(rows_to_csv(sweep(grid, kinds)))
    return EXIT_OK


def cmd_data_pack(args) -> int:
    from lgattn.data import pack_rows, read_documents, save_packed

    docs = read_documents(args.input)
    tokens, mask = pack_rows(docs, args.seq_len + 1, args.mask_cross_doc)
    save_packed(args.out, tokens, mask, args.seq_len)
    print(f"# {len(docs)} documents -> {len(tokens)} rows of {args.seq_len + 1} tokens", file=sys.stderr)
    return EXIT_OK


def cmd_check(args) -> int:
    from lgattn.attention import inject_fault
    from lgattn.checks import run_checks

    if args.fault:
        with inject_fault(args.fault):
            results = run_checks(args.suites)
    else:
        results = run_checks(args.suites)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["suite", "check", "max_diff", "tolerance", "passed"])
    for r in results:
        w.writerow([r.suite, r.name, f"{r.max_diff:.3e}", f"{r.tolerance:.0e}", "pass" if r.passed else "FAIL"])
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="lgattn", description="Grouped local-global attention transformer.",
                                     epilog=config_keys_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model", epilog=config_keys_help(), formatter_class=fmt)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-length-bucket perplexity as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="text file (one document per line) or directory of .txt")
    p.add_argument("--seq-len", type=int, default=None, help="scoring window (default: model max_seq_len)")
    p.add_argument("--max-exponent", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="greedy continuation of a prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--attn-override", default=None,
                   help="attention kind or comma list of attn/window/chunk/group_size=VALUE")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("flops", help="attention cost table as CSV")
    p.add_argument("--attn", default="all", help="comma list of kinds or 'all'")
    p.add_argument("--D", type=int, default=768)
    p.add_argument("--N", type=int, default=16384)
    p.add_argument("--W", type=int, default=512)
    p.add_argument("--C", type=int, default=1)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--grid", default=None, help="comma list of sequence lengths (overrides --N)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("data", help="data utilities")
    data_sub = p.add_subparsers(dest="data_command", required=True)
    pk = data_sub.add_parser("pack", help="pack documents into rows")
    pk.add_argument("--input", required=True)
    pk.add_argument("--seq-len", type=int, required=True)
    pk.add_argument("--out", required=True)
    pk.add_argument("--mask-cross-doc", action="store_true")
    pk.set_defaults(func=cmd_data_pack)

    p = sub.add_parser("check", help="run equivalence self-checks")
    p.add_argument("suites", nargs="*", help="subset of: blockwise approx group rope alibi cache grad")
    p.add_argument("--fault", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (LgattnError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

