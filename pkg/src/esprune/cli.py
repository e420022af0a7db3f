"""Command line entry point.

Subcommands:
  flops    print the per-layer and total FLOPs of a preset or arch file
  prune    run the evolutionary pruning search and write its artifacts
  inspect  report on one serialized pruned model directory
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .arch import ArchError, PRESETS, build_preset, count_flops, load_arch
from .data import DataError, load_cifar_binary, synthetic
from .engine import EngineError, ModelInstance, TrainConfig, init_model, load_model, \
    save_model, train
from .evolve import ESConfig, EvolveError, run
from .genome import GenomeError, load_genome, save_genome

OUT_ROOT_ENV = "ESPRUNE_OUT_ROOT"


def _resolve_arch(name_or_path: str, num_classes: int):
    if name_or_path in PRESETS:
        return build_preset(name_or_path, num_classes=num_classes)
    return load_arch(name_or_path)


def _out_dir(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# flops
# ---------------------------------------------------------------------------

def cmd_flops(args) -> int:
    arch = _resolve_arch(args.arch, args.classes)
    report = count_flops(arch)
    if args.json:
        print(json.dumps({"arch": args.arch, "total": report.total,
                          "per_layer": [[lid, n] for lid, n in report.per_layer]}))
        return 0
    width = max(len(lid) for lid, _ in report.per_layer)
    for lid, n in report.per_layer:
        print(f"{lid:<{width}}  {n:>14,}")
    print(f"{'total':<{width}}  {report.total:>14,}  ({report.total:.3e})")
    return 0


# ---------------------------------------------------------------------------
# prune
# ---------------------------------------------------------------------------

def _load_run_data(args):
    if args.synthetic:
        try:
            classes, per_class, size = (int(v) for v in args.synthetic.split(","))
        except ValueError:
            raise DataError(
                f"--synthetic expects 'classes,per_class,image_size', got {args.synthetic!r}"
            ) from None
        descriptor = {"kind": "synthetic", "classes": classes, "per_class": per_class,
                      "image_size": size, "seed": args.seed}
        return synthetic(classes, per_class, size, seed=args.seed), descriptor
    data = load_cifar_binary(args.data, num_classes=args.classes)
    return data, {"kind": "cifar-binary", "path": str(args.data),
                  "num_classes": args.classes}


def cmd_prune(args) -> int:
    dtype = np.float32 if args.dtype == "float32" else np.float64
    data, data_descriptor = _load_run_data(args)
    if args.arch in PRESETS:
        # presets adopt the data's image geometry and class count
        arch = build_preset(args.arch, num_classes=data.num_classes,
                            input_shape=data.images.shape[1:])
    else:
        arch = load_arch(args.arch)
        if arch.num_classes != data.num_classes:
            raise ArchError(
                f"architecture expects {arch.num_classes} classes, data has "
                f"{data.num_classes}"
            )
        if arch.input_shape != data.images.shape[1:]:
            raise ArchError(
                f"architecture input {arch.input_shape} does not match data "
                f"{data.images.shape[1:]}"
            )

    cfg = ESConfig(
        lambda_size=args.lambda_size, generations=args.generations, p_m=args.pm,
        e_eval=args.e_eval, alpha_eval=args.alpha_eval, e_fine=args.e_fine,
        alpha_fine=args.alpha_fine, variant=args.variant, seed=args.seed,
        batch_size=args.batch_size, subset_per_class=args.subset_per_class,
        workers=args.workers)

    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "config": {k: getattr(cfg, k) for k in (
            "lambda_size", "generations", "p_m", "e_eval", "alpha_eval", "e_fine",
            "alpha_fine", "variant", "seed", "batch_size", "subset_per_class",
            "workers")},
        "arch": args.arch,
        "num_classes": data.num_classes,
        "dataset": data_descriptor,
        "dtype": args.dtype,
        "base_model": args.base_model or {
            "pretrain_epochs": args.pretrain_epochs, "pretrain_lr": args.alpha_eval},
        "out": str(out),
        "started": _now(),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    if args.base_model:
        base = load_model(args.base_model)
    else:
        base = init_model(arch, seed=args.seed, dtype=dtype)
        if args.pretrain_epochs > 0:
            print(f"pretraining base model for {args.pretrain_epochs} epochs ...")
            base = train(base, data, TrainConfig(
                epochs=args.pretrain_epochs, learning_rate=args.alpha_eval,
                batch_size=args.batch_size, seed=args.seed))

    def report(gen, pool, parents):
        f1s = [ind.f1 for ind in pool]
        f2s = [ind.f2 for ind in pool]
        print(f"generation {gen:>3}: pool {len(pool):>3}, "
              f"min f1 {min(f1s):.4f}, min f2 {min(f2s):,}, "
              f"knee ({parents.knee.f1:.4f}, {parents.knee.f2:,})")

    result = run(base, data, cfg, trace_path=out / "trace.csv", on_generation=report)

    rows = []
    for role in ("knee", "heavy", "light"):
        ind = result.tri.roles()[role]
        model_dir = out / role
        save_model(result.models[role], model_dir)
        save_genome(ind.genome, model_dir / "genome.json")
        meta = {
            "role": role,
            "f1": result.final_f1[role],
            "f2": ind.f2,
            "base_flops": result.base_flops,
            "percent_pruned": 100.0 * (1.0 - ind.f2 / result.base_flops),
            "seed": cfg.seed,
        }
        (model_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        rows.append([role, result.final_f1[role], ind.f2, meta["percent_pruned"]])

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["solution", "f1", "flops", "percent_pruned"])
        writer.writerows(rows)

    manifest["finished"] = _now()
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    print(f"\nbase FLOPs {result.base_flops:,}")
    print(f"{'solution':<10} {'f1':>8} {'flops':>14} {'% pruned':>9}")
    for role, f1, f2, pct in rows:
        print(f"{role:<10} {f1:>8.4f} {f2:>14,} {pct:>8.2f}%")
    print(f"\nartifacts written to {out}")
    return 0


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    model_dir = Path(args.model_dir)
    meta_path = model_dir / "meta.json"
    if not meta_path.is_file():
        raise EngineError(f"{model_dir}: missing meta.json (not a pruned-model directory?)")
    meta = json.loads(meta_path.read_text())
    model = load_model(model_dir)  # validates the checksum and weight shapes
    genome = load_genome(model_dir / "genome.json")

    arch = model.arch
    c, h, w = arch.input_shape
    print(f"role:            {meta['role']}")
    print(f"family:          {arch.family} ({arch.depth()} weight layers, "
          f"input {c}x{h}x{w}, {arch.num_classes} classes)")
    print(f"flops:           {meta['f2']:,} of {meta['base_flops']:,} "
          f"({meta['percent_pruned']:.2f}% pruned)")
    print(f"final f1:        {meta['f1']:.4f}")
    print("\nsegments (kept / encoded bits):")
    for seg in genome.layout.segments:
        kept = int(genome.segment_bits(seg).sum())
        pct = 100.0 * (1.0 - kept / seg.width)
        targets = ", ".join(seg.targets[:3]) + (", ..." if len(seg.targets) > 3 else "")
        print(f"  {seg.id:<16} {kept:>4} / {seg.width:<4} ({pct:5.1f}% pruned)  -> {targets}")
    print("\nsurviving filters per conv layer:")
    for layer in arch.conv_layers():
        print(f"  {layer.id:<16} {layer.filters}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esprune",
        description="Evolutionary filter pruning for CNN/ResNet/DenseNet graphs.")
    parser.add_argument("--version", action="version", version=f"esprune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flops", help="count FLOPs of a preset or architecture file")
    p.add_argument("arch", help=f"preset ({', '.join(PRESETS)}) or arch.json path")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("prune", help="run the pruning search")
    p.add_argument("--arch", required=True, help="preset name or arch.json path")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="CIFAR binary batch file or directory")
    src.add_argument("--synthetic", metavar="C,PER,SIZE",
                     help="generate a synthetic dataset: classes,per_class,image_size")
    p.add_argument("--classes", type=int, default=10, choices=(10, 100),
                   help="label layout for --data")
    p.add_argument("--lambda", dest="lambda_size", type=int, default=20)
    p.add_argument("--generations", type=int, default=10)
    p.add_argument("--pm", type=float, default=0.1)
    p.add_argument("--e-eval", type=int, default=5)
    p.add_argument("--alpha-eval", type=float, default=0.1)
    p.add_argument("--e-fine", type=int, default=50)
    p.add_argument("--alpha-fine", type=float, default=0.01)
    p.add_argument("--variant", choices=("plus", "comma"), default="plus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="prune-run",
                   help=f"output directory (relative paths join ${OUT_ROOT_ENV})")
    p.add_argument("--subset-per-class", type=int, default=None,
                   help="evaluation subset size per class (default: 1000 images total)")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--workers", type=int, default=1,
                   help="concurrent candidate evaluations")
    p.add_argument("--base-model", default=None,
                   help="directory of a serialized model to prune")
    p.add_argument("--pretrain-epochs", type=int, default=10,
                   help="epochs to train a fresh base model when --base-model is absent")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("inspect", help="report on a pruned model directory")
    p.add_argument("model_dir")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ArchError, DataError, EngineError, EvolveError, GenomeError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
