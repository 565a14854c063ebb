"""Command-line interface.

Subcommands: gen-data, train-source, adapt, eval, ablate. Every run is fully
determined by (config, seed); flags override config-file keys and the
SFMAMBA_SEED environment variable overrides the seed. Exit codes: 0 ok,
2 usage, 3 I/O, 4 validation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import data as datamod
from .model import load_checkpoint
from .pipeline import (
    adapt_target,
    build_run_config,
    evaluate,
    parse_config_file,
    train_source,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4


def _add_run_flags(sub):
    sub.add_argument("--config", help="key = value config file")
    sub.add_argument("--out", dest="out_dir", help="output directory")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--lr-adapt", dest="lr_adapt", type=float)
    sub.add_argument("--weight-decay", dest="weight_decay", type=float)
    sub.add_argument("--gamma", type=float)
    sub.add_argument("--beta", type=float)
    sub.add_argument("--k-neighbors", dest="k_neighbors", type=int)
    sub.add_argument("--refine-iters", dest="refine_iters", type=int)
    sub.add_argument("--no-scs", action="store_true")
    sub.add_argument("--no-upa", action="store_true")
    sub.add_argument("--n-chvss", dest="n_chvss", type=int)
    sub.add_argument("--chgroup-width", dest="chgroup_width", type=int)


def _build_parser():
    parser = argparse.ArgumentParser(prog="sfmamba")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen-data", help="generate the synthetic benchmark pair")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n-source", type=int, default=128)
    gen.add_argument("--n-target", type=int, default=128)
    gen.add_argument("--n-val", type=int, default=64)
    gen.add_argument("--rho-source", type=float, default=0.9)
    gen.add_argument("--sigma-source", type=float, default=0.3)
    gen.add_argument("--sigma-target", type=float, default=0.5)

    train = subs.add_parser("train-source", help="fit the source model")
    train.add_argument("--data", help="source dataset directory")
    train.add_argument("--val-data", dest="val_data")
    _add_run_flags(train)

    adapt = subs.add_parser("adapt", help="adapt a source checkpoint to a target dataset")
    adapt.add_argument("--checkpoint", help="source checkpoint path")
    adapt.add_argument("--data", help="target dataset directory")
    _add_run_flags(adapt)

    evalp = subs.add_parser("eval", help="evaluate a checkpoint on a dataset")
    evalp.add_argument("--checkpoint", required=True)
    evalp.add_argument("--data", required=True)

    abl = subs.add_parser("ablate", help="run the component grid (chvss x scs x upa)")
    abl.add_argument("--source-data", required=True)
    abl.add_argument("--target-data", required=True)
    abl.add_argument("--seeds", default="0", help="comma-separated seeds")
    _add_run_flags(abl)
    return parser


def _config_values(args):
    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    flag_keys = (
        "out_dir", "seed", "epochs", "batch_size", "lr", "lr_adapt",
        "weight_decay", "gamma", "beta", "k_neighbors", "refine_iters",
        "n_chvss", "chgroup_width",
    )
    for key in flag_keys:
        val = getattr(args, key, None)
        if val is not None:
            values[key] = val
    if getattr(args, "no_scs", False):
        values["use_scs"] = False
    if getattr(args, "no_upa", False):
        values["use_upa"] = False
    return values


def _load_data(path):
    if not path:
        raise FileNotFoundError("dataset path not provided")
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    return datamod.load_dataset(path)


def _cmd_gen_data(args):
    source, target = datamod.make_benchmark_pair(
        args.seed,
        n_source=args.n_source,
        n_target=args.n_target,
        rho_source=args.rho_source,
        sigma_source=args.sigma_source,
        sigma_target=args.sigma_target,
    )
    val_spec = datamod.DomainSpec(**{**source.spec.__dict__, "seed": source.spec.seed + 1})
    val = datamod.generate_domain(val_spec, args.n_val)
    for name, ds in (("source", source), ("target", target), ("source_val", val)):
        datamod.save_dataset(ds, os.path.join(args.out, name))
    print(f"wrote source/target/source_val under {args.out}")
    return EXIT_OK


def _cmd_train_source(args):
    values = _config_values(args)
    values.setdefault("epochs", 50)
    cfg = build_run_config(values)
    cfg.phase = "source"
    dataset = _load_data(args.data or cfg.source_data)
    val = None
    val_path = args.val_data or cfg.val_data
    if val_path:
        val = _load_data(val_path)
    _, records = train_source(cfg, dataset, val_dataset=val, out_dir=cfg.out_dir or None)
    last = [r for r in records if "train_accuracy" in r][-1]
    print(f"source training done: train accuracy {last['train_accuracy']:.4f}")
    return EXIT_OK


def _cmd_adapt(args):
    cfg = build_run_config(_config_values(args))
    cfg.phase = "adapt"
    ckpt_path = args.checkpoint
    if not ckpt_path or not os.path.exists(ckpt_path):
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    cfg.model = ckpt.config
    dataset = _load_data(args.data or cfg.target_data)
    _, records = adapt_target(cfg, ckpt, dataset, out_dir=cfg.out_dir or None)
    last = [r for r in records if "target_accuracy" in r][-1]
    print(f"adaptation done: target accuracy {last['target_accuracy']:.4f}")
    return EXIT_OK


def _cmd_eval(args):
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    from .model import model_from_checkpoint

    model = model_from_checkpoint(ckpt)
    dataset = _load_data(args.data)
    result = evaluate(model, dataset)
    print(json.dumps({"accuracy": result["accuracy"], "per_class": result["per_class"]}))
    return EXIT_OK


def _cmd_ablate(args):
    base = build_run_config(_config_values(args))
    source = _load_data(args.source_data)
    target = _load_data(args.target_data)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out_dir = base.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    summary_path = os.path.join(out_dir, "ablation.jsonl")
    with open(summary_path, "w") as fh:
        for use_chvss in (True, False):
            for seed in seeds:
                cfg = build_run_config(_config_values(args))
                cfg.seed = seed
                cfg.model.n_chvss = base.model.n_chvss if use_chvss else 0
                src_model, _ = train_source(cfg, source)
                from .model import save_checkpoint

                ckpt_path = os.path.join(out_dir, f"src_chvss{int(use_chvss)}_s{seed}.sfmb")
                save_checkpoint(ckpt_path, src_model, seed, "source")
                baseline = evaluate(src_model, target)["accuracy"]
                for use_scs in (True, False):
                    for use_upa in (True, False):
                        run_cfg = build_run_config(_config_values(args))
                        run_cfg.seed = seed
                        run_cfg.model = src_model.config
                        run_cfg.use_scs = use_scs
                        run_cfg.use_upa = use_upa
                        model, _ = adapt_target(run_cfg, load_checkpoint(ckpt_path), target)
                        acc = evaluate(model, target)["accuracy"]
                        rec = {
                            "seed": seed, "chvss": use_chvss, "scs": use_scs,
                            "upa_filter": use_upa, "source_only_accuracy": baseline,
                            "adapted_accuracy": acc,
                        }
                        fh.write(json.dumps(rec) + "\n")
                        fh.flush()
                        print(json.dumps(rec))
    print(f"ablation summary written to {summary_path}")
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (2)
        return int(exc.code or 0)
    handlers = {
        "gen-data": _cmd_gen_data,
        "train-source": _cmd_train_source,
        "adapt": _cmd_adapt,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
