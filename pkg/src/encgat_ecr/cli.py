"""Command-line entry point (``encgat-ecr``).

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ContractError, load_checkpoint, save_checkpoint
from .baselines import (
    POLICIES,
    LearnedPolicy,
    evaluate,
    export_embeddings,
    transfer_evaluate,
    write_projection,
    write_report,
)
from .config import ConfigError, RunConfig, load_config, parse_seeds
from .topology import BUNDLED_NAME, TopologyError, generate_topology, load_topology, merge_ports, reshuffle_orders, topology_violations, loads_topology
from .trainer import pretrain, train, write_metrics

log = logging.getLogger("encgat_ecr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
ABLATIONS = ("normal_gc", "separate_actors", "decoder_only")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError([message])


def _common(p: argparse.ArgumentParser, seeds: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    if seeds:
        p.add_argument("--seed", "--seeds", dest="seeds", help="seed list: 3, 0..4 or 1,5,7")
        p.add_argument("--episodes", type=int, help="training: episodes per iteration; evaluation: seeds 0..N-1")
    p.add_argument("--mode", choices=("normal", "hard"), help="order mode (overrides config)")
    p.add_argument("--topology", help="topology file or 'bundled' (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="encgat-ecr", description="Empty-container repositioning with graph attention actor-critic.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, hlp in (("pretrain", "local actor-critic pre-training only"), ("train", "pre-train then fine-tune")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("--ablation", action="append", default=[], choices=ABLATIONS)
        if name == "train":
            p.add_argument("--skip-pretrain", action="store_true", help="Normal-GC ablation")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint or a baseline policy")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--policy", choices=sorted(POLICIES) + ["learned"])
    p.add_argument("--ablation", action="append", default=[], choices=ABLATIONS)

    p = sub.add_parser("baseline", help="evaluate the non-learning baselines")
    _common(p)
    p.add_argument("--policy", choices=sorted(POLICIES))
    p.add_argument("--threshold", type=float, default=0.3)

    p = sub.add_parser("transfer", help="evaluate a checkpoint on a merged, reshuffled topology")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--merge", type=int, nargs=2, default=(1, 2), metavar=("A", "B"))
    p.add_argument("--shuffle-seed", type=int, default=0)
    p.add_argument("--ablation", action="append", default=[], choices=ABLATIONS)

    p = sub.add_parser("export-embeddings", help="PCA projection of port embeddings over one episode")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ablation", action="append", default=[], choices=ABLATIONS)

    p = sub.add_parser("sweep", help="learning-rate grid; reports the best by mean fulfilment")
    _common(p)
    p.add_argument("--ablation", action="append", default=[], choices=ABLATIONS)
    p.add_argument("--skip-pretrain", action="store_true")

    p = sub.add_parser("validate-topology", help="check a topology file")
    p.add_argument("path")

    p = sub.add_parser("generate-topology", help="write a random valid topology")
    p.add_argument("--ports", type=int, default=6)
    p.add_argument("--routes", type=int, default=3)
    p.add_argument("--vessels", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("normal", "hard"), default="normal")
    p.add_argument("--out", required=True)
    return ap


# ---------------------------------------------------------------------------
# helpers


def _resolve(args) -> tuple[RunConfig, list[int]]:
    cfg = load_config(args.config)
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if getattr(args, "topology", None):
        cfg.topology = args.topology
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    for a in getattr(args, "ablation", []) or []:
        setattr(cfg.ablations, a, True)
    if getattr(args, "skip_pretrain", False):
        cfg.ablations.normal_gc = True
    seeds = cfg.seeds
    if getattr(args, "seeds", None):
        seeds = parse_seeds(args.seeds)
    return cfg, seeds


def _topology(cfg: RunConfig):
    return load_topology(cfg.topology).with_mode(cfg.mode)


def _write_echo(cfg: RunConfig, out: Path, seeds: list[int], command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    info = {
        "command": command, "seeds": seeds, "package_version": __version__,
        "numpy_version": np.__version__, "python_version": platform.python_version(),
    }
    (out / "run.json").write_text(json.dumps(info, indent=2) + "\n")


def _eval_seeds(args, cfg: RunConfig) -> list[int]:
    if getattr(args, "seeds", None):
        return parse_seeds(args.seeds)
    if getattr(args, "episodes", None):
        return list(range(args.episodes))
    return list(cfg.eval_seeds)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, pretrain_only: bool = False) -> int:
    cfg, seeds = _resolve(args)
    if getattr(args, "episodes", None):
        cfg.episodes_per_iteration = args.episodes
    top = _topology(cfg)
    tc = cfg.train_config(top.n_ports)
    out = Path(cfg.output_dir)
    _write_echo(cfg, out, seeds, args.command)
    for seed in seeds:
        run_dir = out / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        if pretrain_only:
            res = pretrain(top, tc, seed, run_dir)
            save_checkpoint(run_dir / "pretrain_final.npz", res.params)
            write_metrics(res.metrics, run_dir / "metrics.csv")
            ratio = res.metrics[-1]["fulfillment_ratio"] if res.metrics else float("nan")
        else:
            res = train(top, tc, seed, run_dir, skip_pretrain=cfg.ablations.normal_gc)
            ratio = res.metrics[-1]["fulfillment_ratio"] if res.metrics else float("nan")
        print(f"seed {seed}: last-iteration fulfilment {100 * ratio:.2f}% -> {run_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, _ = _resolve(args)
    top = _topology(cfg)
    seeds = _eval_seeds(args, cfg)
    policy_name = getattr(args, "policy", None) or ("learned" if getattr(args, "checkpoint", None) else "none")
    if policy_name == "learned":
        if not args.checkpoint:
            raise ConfigError(["--policy learned needs --checkpoint"])
        policy = LearnedPolicy(load_checkpoint(args.checkpoint), cfg.net_config(top.n_ports))
    elif policy_name == "heuristic":
        policy = POLICIES["heuristic"](getattr(args, "threshold", 0.3))
    else:
        policy = POLICIES[policy_name]()
    report = evaluate(policy, top, seeds)
    path = write_report(report, cfg.output_dir)
    print(report.summary())
    print(f"report: {path}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    if args.policy:
        return cmd_evaluate(args)
    cfg, _ = _resolve(args)
    top = _topology(cfg)
    seeds = _eval_seeds(args, cfg)
    for name in ("none", "random", "heuristic"):
        policy = POLICIES[name](args.threshold) if name == "heuristic" else POLICIES[name]()
        report = evaluate(policy, top, seeds)
        write_report(report, cfg.output_dir)
        print(report.summary())
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg, _ = _resolve(args)
    seeds = _eval_seeds(args, cfg)
    base = load_topology(cfg.topology)
    derived = reshuffle_orders(merge_ports(base, *args.merge), args.shuffle_seed).with_mode(cfg.mode)
    params = load_checkpoint(args.checkpoint)
    trained = transfer_evaluate(params, cfg.net_config(derived.n_ports), derived, seeds)
    none = evaluate(POLICIES["none"](), derived, seeds)
    out = Path(cfg.output_dir)
    write_report(trained, out)
    write_report(none, out)
    derived.save(out / f"{derived.name}.topo.json")
    print(trained.summary())
    print(none.summary())
    print(f"checkpoint digest unchanged: {trained.extra['digest']}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg, seeds = _resolve(args)
    top = _topology(cfg)
    params = load_checkpoint(args.checkpoint)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        rows = export_embeddings(params, cfg.net_config(top.n_ports), top, seed)
        path = out / f"embeddings_{top.name}_seed{seed}.csv"
        write_projection(rows, path)
        print(f"{len(rows)} projected embeddings -> {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, seeds = _resolve(args)
    top = _topology(cfg)
    out = Path(cfg.output_dir)
    _write_echo(cfg, out, seeds, "sweep")
    results = []
    for lr in cfg.sweep_learning_rates:
        run_cfg = replace(cfg, optimizer=replace(cfg.optimizer, learning_rate=lr))
        tc = run_cfg.train_config(top.n_ports)
        ratios = []
        for seed in seeds:
            res = train(top, tc, seed, out / f"lr{lr:g}" / f"seed{seed}", skip_pretrain=cfg.ablations.normal_gc)
            rep = evaluate(LearnedPolicy(res.params, tc.net), top, list(cfg.eval_seeds))
            ratios.append(rep.mean)
        results.append((lr, float(np.mean(ratios))))
        print(f"lr={lr:g}: mean fulfilment {100 * results[-1][1]:.2f}%")
    best = max(results, key=lambda r: r[1])
    with open(out / "sweep.csv", "w") as fh:
        fh.write("learning_rate,mean_fulfillment_ratio\n")
        for lr, m in results:
            fh.write(f"{lr!r},{m!r}\n")
    print(f"best learning rate: {best[0]:g}")
    return EXIT_OK


def cmd_validate(args) -> int:
    path = args.path
    if path != BUNDLED_NAME and not Path(path).exists() and Path(path).name in ("bundled.topo", "bundled.topo.json"):
        path = BUNDLED_NAME
    if path != BUNDLED_NAME and not Path(path).exists():
        raise ConfigError([f"{path}: no such topology file"])
    top = load_topology(path, validate=False) if path == BUNDLED_NAME else loads_topology(Path(path).read_text())
    problems = topology_violations(top)
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{top.name}: valid ({top.n_ports} ports, {len(top.routes)} routes, {top.n_vessels} vessels)")
    return EXIT_OK


def cmd_generate(args) -> int:
    top = generate_topology(args.ports, args.routes, args.vessels, args.seed, mode=args.mode)
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    top.save(out)
    print(f"wrote {top.name} -> {out}")
    return EXIT_OK


COMMANDS = {
    "pretrain": lambda a: cmd_train(a, pretrain_only=True),
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "transfer": cmd_transfer,
    "export-embeddings": cmd_export,
    "sweep": cmd_sweep,
    "validate-topology": cmd_validate,
    "generate-topology": cmd_generate,
}


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("REPO_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (ConfigError, TopologyError) as e:
        msgs = getattr(e, "messages", None) or getattr(e, "violations", None) or [str(e)]
        for m in msgs:
            print(f"error: {m}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, RuntimeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
