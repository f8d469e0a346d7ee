"""Command-line entry point: ``mosalab <command> ...``.

Exit codes: 0 success, 1 verification mismatch, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from .config import PRESETS, ConfigError, load_model_config
from .data import Corpus
from .flops import G, InfeasibleBudget, flop_model, param_count, solve_iso_heads
from . import golden
from .gradcheck import TOLERANCE, run_suite

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG = 0, 1, 2


def _emit(data, fmt: str, text: str, csv_text: str | None = None) -> None:
    if fmt == "json":
        print(json.dumps(data, indent=2, sort_keys=True))
    elif fmt == "csv" and csv_text is not None:
        print(csv_text, end="")
    else:
        print(text)


def cmd_flops(args) -> int:
    if args.table5:
        rows = []
        for name in ("tiny", "small", "medium", "large"):
            r = flop_model(PRESETS[name])
            rows.append({"model": name, "flops": r.total, "flops_g": round(r.total / G, 2)})
        text = "\n".join(f"{r['model']:<8} {r['flops_g']:>10.2f} G" for r in rows)
        csv_text = "model,flops,flops_g\n" + "".join(f"{r['model']},{r['flops']},{r['flops_g']}\n" for r in rows)
        _emit(rows, args.format, text, csv_text)
        return EXIT_OK
    if args.config is None:
        raise ConfigError("config", "give a config file or preset, or --table5")
    report = flop_model(load_model_config(args.config))
    lines = [f"{g['kind']} x{g['count']} (k={g['k']}): per head {g['per_head']} "
             f"[projection {g['projection']}, attention {g['attention']}, overhead {g['overhead']}]"
             for g in report.heads]
    lines += [f"feedforward: {report.feedforward}", f"total: {report.total} ({report.total_g:.2f} G)"]
    _emit(report.to_dict(), args.format, "\n".join(lines), report.to_csv())
    return EXIT_OK


def cmd_solve(args) -> int:
    base = load_model_config(args.config)
    try:
        sol = solve_iso_heads(base, args.rho, args.dense_heads, args.kind)
    except InfeasibleBudget as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    d = sol.to_dict()
    d["params"] = param_count(sol.config)
    text = (f"rho={sol.rho} dense_heads={sol.dense_heads} {sol.kind}_heads={sol.sparse_heads} "
            f"flops={sol.achieved_flops} (baseline {sol.baseline_flops}) params={d['params']}")
    _emit(d, args.format, text)
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiment import load_spec, run_experiment

    spec = load_spec(args.spec)
    if args.steps is not None:
        spec = replace(spec, train=replace(spec.train, steps=args.steps).validate())
    run_dir = Path(args.resume) if args.resume else None
    _, summary = run_experiment(spec, run_dir, resume=bool(args.resume))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_loss, load_model

    model, header, _, _ = load_model(args.checkpoint)
    corpus = Corpus.load(args.corpus, model.config.seq_len)
    train_cfg = header["train"]
    loss = evaluate_loss(model, corpus.heldout, train_cfg["batch_size"], train_cfg["eval_batches"])
    out = {**header.get("provenance", {}), "step": header["step"], "heldout_loss": loss,
           "heldout_ppl": math.exp(loss)}
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import load_spec, run_sweep

    spec = load_spec(args.spec)
    try:
        rhos = [int(x) for x in args.rho_list.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError("--rho-list", f"expected comma-separated integers: {exc}") from exc
    if not rhos:
        raise ConfigError("--rho-list", "empty")
    sweep_dir, rows = run_sweep(spec, rhos)
    print((sweep_dir / "sweep.csv").read_text(), end="")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    checks = golden.reproduce(args.target)
    if args.format == "json":
        print(json.dumps([c.to_dict() for c in checks], indent=2))
    else:
        for c in checks:
            print(c.line())
    bad = golden.failures(checks)
    print(f"{len(checks) - len(bad)}/{len(checks)} checks passed", file=sys.stderr)
    return EXIT_MISMATCH if bad else EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    for r in results:
        print(f"[{'ok' if r.ok else 'FAIL':>4}] {r.name:<36} {r.error:.3e}")
    bad = [r for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} within {TOLERANCE:g}", file=sys.stderr)
    return EXIT_MISMATCH if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mosalab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    fmt = argparse.ArgumentParser(add_help=False)
    fmt.add_argument("--format", choices=["text", "json", "csv"], default="text")

    s = sub.add_parser("flops", parents=[fmt], help="forward-pass FLOP report")
    s.add_argument("config", nargs="?", help="model config JSON or preset name")
    s.add_argument("--table5", action="store_true", help="the four reference model classes")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("solve", parents=[fmt], help="IsoFLOP sparse head count")
    s.add_argument("config")
    s.add_argument("--rho", type=int, required=True)
    s.add_argument("--dense-heads", type=int, default=4)
    s.add_argument("--kind", choices=["mosa", "fixed", "routing"], default="mosa")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("train", help="train one experiment spec")
    s.add_argument("spec")
    s.add_argument("--resume", metavar="RUN_DIR", help="continue the run in RUN_DIR from its checkpoint")
    s.add_argument("--steps", type=int, help="override train.steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("corpus")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="IsoFLOP sparsity sweep")
    s.add_argument("spec")
    s.add_argument("--rho-list", required=True, help="e.g. 1,2,4")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("reproduce", help="recompute published reference values")
    s.add_argument("--target", choices=[*golden.TARGETS, "all"], required=True)
    s.add_argument("--format", choices=["text", "json"], default="text")
    s.set_defaults(func=cmd_reproduce)

    s = sub.add_parser("gradcheck", help="finite-difference suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
