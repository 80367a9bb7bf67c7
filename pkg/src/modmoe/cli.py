"""Command-line entry point.

    modmoe run    [--config PATH] [--seed N] [--out DIR] [--strategy NAME] [--k N]
    modmoe ablate [--config PATH] [--seed N[,N...]] [--out DIR] [--strategy A,B,...]
    modmoe sweep  [--config PATH] [--seed N] [--out DIR] [--k N[,N...]]
    modmoe loads  [--config PATH] [--seed N] [--out DIR]
    modmoe dpo    [--config PATH] [--seed N] [--out DIR] [--strategy NAME]

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    PipelineError,
    ablation,
    check_partition_schema,
    expert_sweep,
    export_loads,
    load_config,
    parse_int_list,
    run_pipeline,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

DEFAULT_ABLATION = "adaptive,random,pure_moe"
DEFAULT_DPO_STEPS = 50


class ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; route it to the validation exit code instead
    def error(self, message):
        raise ArgError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="modmoe", description="Modality-partitioned MoE speech-text experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (
        ("run", "full pipeline for one strategy and seed"),
        ("ablate", "compare partition strategies over seeds"),
        ("sweep", "vary the number of audio experts"),
        ("loads", "export per-layer modality load profiles"),
        ("dpo", "full pipeline followed by the preference stage"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=str, default=None, help="flat key=value config file")
        s.add_argument("--seed", type=str, default=None, help="integer seed; comma list for ablate")
        s.add_argument("--out", type=str, default=None, help="output directory")
        s.add_argument("--strategy", type=str, default=None, help="adaptive, random[:SEED], pure_moe or extend; comma list for ablate")
        s.add_argument("--k", type=str, default=None, help="audio experts per layer; comma list for sweep")
    return p


def _single_int(text: str | None, flag: str) -> int | None:
    if text is None:
        return None
    vals = parse_int_list(text)
    if len(vals) != 1:
        raise ConfigError(f"{flag} takes one integer here, got {text!r}")
    return vals[0]


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ArgError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "ablate":
        cfg = load_config(args.config, out=args.out, k=_single_int(args.k, "--k"))
        seeds = list(parse_int_list(args.seed)) if args.seed else [0, 1, 2]
        strategies = (args.strategy or DEFAULT_ABLATION).split(",")
        out = Path(args.out or cfg.out)
        rows = ablation(cfg, strategies, seeds, out)
        for r in rows:
            if r["seed"] == "mean":
                print(f"{r['strategy']:10s} text {r['text_task_acc']:.4f} audio {r['audio_task_acc']:.4f} joint {r['joint_task_acc']:.4f} text_drop {r['text_drop_pct']:+.2f}%")
        print(f"wrote {out / 'ablation.csv'}")
        return EXIT_RUNTIME if any(r["error"] for r in rows) else EXIT_OK
    if cmd == "sweep":
        cfg = load_config(args.config, seed=_single_int(args.seed, "--seed"), out=args.out)
        ks = list(parse_int_list(args.k)) if args.k else list(cfg.k_list)
        out = Path(args.out or cfg.out)
        res = expert_sweep(cfg, ks, out)
        for r in res["rows"]:
            print(f"k={r['k']} " + (r["note"] or f"text {r['text_task_acc']:.4f} audio {r['audio_task_acc']:.4f} text_drop {r['text_drop_pct']:+.2f}%"))
        print(f"wrote {out / 'sweep.csv'}")
        return EXIT_OK
    seed = _single_int(args.seed, "--seed")
    k = _single_int(args.k, "--k")
    if cmd == "loads":
        cfg = load_config(args.config, seed=seed, out=args.out, k=k)
        out = Path(args.out or cfg.out)
        res = export_loads(cfg, out)
        for s in res["summary"]:
            print(f"layer {s['layer']}: max audio-score expert {s['max_audio_score_expert']} ({s['audio_score']:.4f})")
        return EXIT_OK
    overrides = dict(seed=seed, out=args.out, k=k, strategy=args.strategy)
    if cmd == "dpo":
        base = load_config(args.config)
        if base.dpo_steps == 0:
            overrides["dpo_steps"] = DEFAULT_DPO_STEPS
    cfg = load_config(args.config, **overrides)
    out = Path(args.out or cfg.out)
    res = run_pipeline(cfg, out)
    if res.partition is not None and cfg.strategy_name() in ("adaptive", "random"):
        check_partition_schema(json.loads(res.partition.to_json()), cfg.k, cfg.num_routed_experts)
    print(json.dumps({"final": res.metrics["final"], "drop_pct": res.metrics["drop_pct"]}, sort_keys=True))
    print(f"wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
