"""Command-line entry point: ``peftlab {pretrain,adapt,merge,report,params,ablate}``.

Exit codes: 0 ok, 1 partial ablation failure, 2 invalid input, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, ablate, artifacts
from .allocator import MASK_THRESHOLD, rank_report
from .checkpoint import CheckpointError, atomic_write
from .config import ConfigError, load_config
from .peft import BITFIT_ASSUMPTIONS, METHODS, AdapterSpec, AdapterSpecError, count_trainable, merge
from .peft.spec import FFM_SHARING
from .report import report_csv, report_svg
from .trainer import DATA_SIZES, DivergenceError, make_task, pretrain, run_training
from .transformer import PRESETS, ArchError, forward, get_preset

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _dump(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8")


def _out_path(path: str) -> Path:
    p = Path(path)
    if not p.parent.is_dir():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


def metrics_path(ckpt: str | Path) -> Path:
    return Path(f"{ckpt}.metrics.json")


def _spec_from_args(base: AdapterSpec, args) -> AdapterSpec:
    changes = {}
    for flag, name in (("method", "method"), ("rank", "rank"), ("alpha1", "alpha1"), ("alpha2", "alpha2"),
                       ("initial_rank", "initial_rank"), ("target_rank", "target_rank"),
                       ("ffm_sharing", "ffm_sharing"), ("glora_factors", "glora_factors")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[name] = value
    roles = getattr(args, "target_roles", None)
    if roles:
        changes["target_roles"] = tuple(r.strip() for r in roles.split(",") if r.strip())
    return base.with_(**changes)


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    out = _out_path(args.out)
    tcfg = replace(cfg.pretrain.train, seed=args.seed)
    data = make_task(cfg.task, args.seed)

    def snapshot(epoch, adapted):
        artifacts.save_base(out, adapted.model, {"seed": args.seed, "epoch": epoch + 1})

    model, run = pretrain(cfg.arch, cfg.task, tcfg, args.seed, data=data, init_std=cfg.pretrain.init_std,
                          on_epoch_end=snapshot)
    artifacts.save_base(out, model, {"seed": args.seed, "epoch": tcfg.epochs})
    atomic_write(metrics_path(out), _dump(run.to_json_dict()))
    print(f"copy_ter={run.metrics['copy_ter']:.4f} steps={len(run.losses)} -> {out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    out = _out_path(args.out)
    model, _ = artifacts.load_base(args.base)
    spec = _spec_from_args(cfg.adapter, args).validate(model.arch)
    task = replace(cfg.task, n_train=DATA_SIZES[args.data_size]) if args.data_size else cfg.task
    tcfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.lr is not None:
        tcfg = replace(tcfg, learning_rate=args.lr)
    tcfg.validate()
    adapted, run = run_training(model, spec, tcfg, task, eval_before=True)
    artifacts.save_adapter(out, adapted, tcfg.seed)
    doc = run.to_json_dict()
    doc["data_size"] = args.data_size or "custom"
    atomic_write(metrics_path(out), _dump(doc))
    m = run.metrics
    print(f"{spec.method}: in_domain_ter {m['in_domain_ter_before']:.4f} -> {m['in_domain_ter']:.4f}, "
          f"ood_ter {m['ood_ter_before']:.4f} -> {m['ood_ter']:.4f}")
    return EXIT_OK


def probe_batch(arch, n: int = 16, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    S = min(16, arch.max_src_len)
    Tn = min(16, arch.max_tgt_len)
    return rng.integers(3, arch.vocab_size, size=(n, S)), rng.integers(3, arch.vocab_size, size=(n, Tn))


def cmd_merge(args) -> int:
    out = _out_path(args.out)
    model, meta = artifacts.load_base(args.base)
    arrays, ameta = artifacts.read_adapter(args.adapter)
    adapted = artifacts.attach_saved(model, arrays, ameta)
    merged = merge(adapted)
    src, tgt = probe_batch(model.arch)
    dev = float(np.max(np.abs(forward(merged, src, tgt).data - adapted.forward(src, tgt).data)))
    artifacts.save_base(out, merged, {"merged_from": ameta["spec"]["method"]})
    print(f"max |merged - adapted| logit deviation: {dev:.3e}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.threshold < 0:
        raise UsageError("--threshold must be >= 0")
    out = _out_path(args.out)
    svg = _out_path(args.svg) if args.svg else None
    adapted = artifacts.load_adapter_standalone(args.adapter)
    try:
        rep = rank_report(adapted.adapter, args.threshold)
    except TypeError as exc:
        raise UsageError(f"{exc}; reports need an adalora or s2lora adapter") from None
    atomic_write(out, report_csv(rep).encode("utf-8"))
    if svg is not None:
        atomic_write(svg, report_svg(rep).encode("utf-8"))
    print(f"total allocated rank {rep.total()} (threshold {args.threshold:g}) -> {out}")
    return EXIT_OK


def cmd_params(args) -> int:
    arch = get_preset(args.arch)
    spec = _spec_from_args(AdapterSpec(), args).validate(arch)
    count = count_trainable(spec, arch)
    print(count)
    if args.verbose:
        print(f"base parameters: {count.total}")
        if spec.method == "bitfit":
            for line in BITFIT_ASSUMPTIONS:
                print(f"assumes: {line}")
        if spec.method == "glora":
            print(f"assumes: factors {spec.glora_factors} on roles {','.join(r.value for r in spec.roles)}, "
                  "C/D/E only where the projection has a bias")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.max_steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, max_steps=args.max_steps).validate())
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    out = Path(args.out)
    if not out.parent.is_dir():
        raise UsageError(f"output directory does not exist: {out.parent}")
    artifacts.load_base(args.base)  # fail fast before creating anything
    cells, results = ablate.run_grid(args.base, args.grid, str(out), cfg, args.workers)
    failed = [c.name for c in cells if results[c.name] is None]
    print(f"{len(cells) - len(failed)}/{len(cells)} cells done -> {out / 'summary.csv'}")
    return EXIT_PARTIAL if failed else EXIT_OK


def _add_method_flags(p: argparse.ArgumentParser, method_required: bool) -> None:
    p.add_argument("--method", choices=METHODS, required=method_required)
    p.add_argument("--rank", type=int)
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--initial-rank", type=int, dest="initial_rank")
    p.add_argument("--target-rank", type=int, dest="target_rank")
    p.add_argument("--target-roles", dest="target_roles", help="comma-separated, e.g. q,v")
    p.add_argument("--ffm-sharing", choices=FFM_SHARING, dest="ffm_sharing")
    p.add_argument("--glora-factors", dest="glora_factors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peftlab", description="Parameter-efficient fine-tuning lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a base model on the copy task")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="attach a method to a base model and train it on the remap task")
    p.add_argument("--base", required=True)
    p.add_argument("--config")
    _add_method_flags(p, method_required=False)
    p.add_argument("--data-size", choices=tuple(DATA_SIZES), dest="data_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("merge", help="fold an adapter into its base model")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("report", help="export the per-site rank distribution")
    p.add_argument("--adapter", required=True)
    p.add_argument("--threshold", type=float, default=MASK_THRESHOLD)
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("params", help="trainable-parameter count for a method on a preset")
    p.add_argument("--arch", choices=tuple(PRESETS), default="toy-small")
    _add_method_flags(p, method_required=True)
    p.add_argument("--verbose", "-v", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ablate", help="run an ablation grid from a base model")
    p.add_argument("--base", required=True)
    p.add_argument("--grid", choices=ablate.GRIDS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged at step {exc.step}: {exc.snapshot}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, CheckpointError, AdapterSpecError, ArchError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
