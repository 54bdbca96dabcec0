"""Command line: ``graphreason {gradcheck,gen-data,train,eval,sweep,report}``."""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

from .checks import gradient_suite
from .config import ConfigError, ExperimentConfig, load_config
from .metrics import parse_lines
from .synthetic import generate_dataset, load_dataset, save_dataset
from .train import (CheckpointError, TrainingError, evaluate, format_log, format_sweep, load_checkpoint,
                    restore, save_checkpoint, sweep, train_network)


def _threads():
    n = os.environ.get("GRAPHREASON_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: ExperimentConfig):
    if not cfg.data_dir or not Path(cfg.data_dir, "manifest.json").exists():
        raise ConfigError(f"no dataset at data_dir={cfg.data_dir!r}; run gen-data first")
    return load_dataset(cfg.data_dir)


def _restore(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config, seed=args.seed) if args.config else ckpt.config
    ds = _dataset(cfg)
    return cfg, ds, restore(ckpt, cfg, ds.graph)


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    reports = gradient_suite(range(cfg.gradcheck_seeds), corrupt=cfg.gradcheck_corrupt)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(reports)} checks failed: {', '.join(failed)}")
        return 1
    print(f"all {len(reports)} checks passed")
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, data_seed=args.seed)
    ds = generate_dataset(cfg.scene_spec(), cfg.n_scenes, cfg.data_seed, cfg.val_fraction, cfg.test_fraction)
    out = save_dataset(ds, _out_dir(args, cfg.data_dir or "data"), cfg.data_seed)
    print(f"wrote {', '.join(f'{k}={len(v)}' for k, v in ds.splits.items())} to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    ds = _dataset(cfg)
    out = _out_dir(args, "run")
    (out / "config.txt").write_text(cfg.to_text())

    def at_decay(result):
        save_checkpoint(out / "checkpoint_decay.npz", result.net, result.optimizer, result.step, cfg)

    result = train_network(cfg.model_config(), cfg.loss_config(), ds["train"], ds.graph, cfg.steps,
                           cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.decay_step, cfg.seed,
                           cfg.log_every, at_decay)
    (out / "train_log.tsv").write_text(format_log(result.log))
    path = save_checkpoint(out / "checkpoint.npz", result.net, result.optimizer, result.step, cfg)
    print(f"trained {cfg.variant} for {result.step} steps; final loss "
          f"{result.log[-1]['loss'] if result.log else float('nan'):.4f}; checkpoint {path}")
    return 0


def cmd_eval(args) -> int:
    cfg, ds, net = _restore(args)
    report = evaluate(net, ds[cfg.eval_split], cfg.drop_protocol(), cfg.seed)
    out = _out_dir(args, "eval")
    (out / "metrics.txt").write_text(report.lines())
    (out / "variant.txt").write_text(cfg.variant + "\n")
    print(report.text(ds.spec.class_names()), end="")
    return 0


def cmd_sweep(args) -> int:
    cfg, ds, net = _restore(args)
    rows = sweep(net, ds[cfg.eval_split], cfg.deltas(), ("pre", "post"), cfg.drop_jitter,
                 cfg.drop_proposals, cfg.seed)
    out = _out_dir(args, "sweep")
    text = format_sweep(rows)
    (out / "sweep.csv").write_text(text)
    print(text, end="")
    return 0


def cmd_report(args) -> int:
    root = Path(args.out or ".")
    files = sorted(root.rglob("metrics.txt"))
    if not files:
        print(f"no metrics.txt under {root}")
        return 1
    names = ["per_instance_ap", "per_instance_ac", "per_class_ap", "per_class_ac"]
    print("run\tvariant\t" + "\t".join(names))
    for f in files:
        values = parse_lines(f.read_text())
        variant_file = f.parent / "variant.txt"
        variant = variant_file.read_text().strip() if variant_file.exists() else "?"
        run = f.parent.relative_to(root).as_posix() or "."
        print(f"{run}\t{variant}\t" + "\t".join(f"{100 * values.get(n, float('nan')):.1f}" for n in names))
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphreason", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--checkpoint", help="checkpoint .npz for eval and sweep")
        p.add_argument("--out", help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _threads():
            return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
