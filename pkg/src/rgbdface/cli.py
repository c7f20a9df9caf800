"""Command-line entry point.

Commands: synth, train, export-depth, eval, sweep-lambda, ablate.  Every
command writes a run manifest (resolved config, dataset digest, seed, tool
version) to its output directory before doing long work, so each run is
reproducible from the manifest alone.  Outputs carry no timestamps:
re-running a command with identical arguments rewrites identical bytes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import (
    load_depthgen_checkpoint,
    load_fusion_checkpoint,
    save_depthgen_checkpoint,
    save_fusion_checkpoint,
)
from .dataio import (
    VariationSpec,
    build_protocol,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
)
from .evaluation import mae, rank1_report, similarity_matrix
from .profiles import PROFILES
from .training import (
    TrainConfig,
    embed_dataset,
    export_generated_depth,
    train_depthgen,
    train_fusion,
)

DEFAULT_LAMBDAS = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"


class CliError(ValueError):
    pass


def _parse_resolution(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            h = w = int(parts[0])
        elif len(parts) == 2:
            h, w = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise CliError(f"--res must be an integer or HxW, got {text!r}")
    return h, w


def _write_run_manifest(out_dir: Path, command: str, config: dict,
                        dataset_digest: str | None, seed: int | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "dataset_digest": dataset_digest,
        "seed": seed,
        "out_dir": str(out_dir),
        "version": __version__,
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        stage=args.stage,
        max_epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        decay_factor=args.decay_factor,
        patience=args.patience,
        seed=args.seed,
        profile=args.profile,
        mfs_on=not args.no_mfs,
        mfs_levels=args.mfs_levels,
        cic_on=not args.no_cic,
        cfe_on=not args.no_cfe,
        lambda_dis=args.lambda_dis,
        arc_scale=args.arc_scale,
        arc_margin=args.arc_margin,
    )


def _config_dict(config: TrainConfig) -> dict:
    return {k: getattr(config, k) for k in (
        "stage", "max_epochs", "batch_size", "lr", "momentum", "decay_factor",
        "patience", "seed", "profile", "mfs_on", "mfs_levels", "cic_on",
        "cfe_on", "lambda_dis", "arc_scale", "arc_margin")}


def cmd_synth(args) -> int:
    resolution = _parse_resolution(args.res)
    out = Path(args.out)
    _write_run_manifest(out, "synth", {
        "ids": args.ids, "per_id": args.per_id,
        "res": list(resolution), "depth_bits": args.depth_bits,
    }, dataset_digest=None, seed=args.seed)
    dataset = generate_synthetic_dataset(
        args.ids, args.per_id, VariationSpec(), resolution, args.seed)
    save_dataset(dataset, out, depth_bits=args.depth_bits)
    print(f"wrote {len(dataset)} samples ({dataset.identity_count} identities) to {out}")
    return 0


def _run_training(dataset, config: TrainConfig, out: Path) -> Path:
    """Train one stage, write history + checkpoint; returns checkpoint path."""
    ckpt_path = out / "checkpoint.ckpt"
    if config.stage == "depthgen":
        gen, backbone, history = train_depthgen(dataset, config)
        save_depthgen_checkpoint(ckpt_path, gen, backbone, config.profile,
                                 dataset.identity_count)
    else:
        streams, heads, classifiers, history = train_fusion(dataset, config)
        save_fusion_checkpoint(ckpt_path, streams, heads, classifiers,
                               config.profile, dataset.identity_count,
                               config.arc_scale, config.arc_margin,
                               config.lambda_dis)
    (out / "history.csv").write_text(history.to_table(), encoding="utf-8")
    return ckpt_path


def cmd_train(args) -> int:
    config = _train_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    _write_run_manifest(out, "train", {"data": str(args.data), **_config_dict(config)},
                        dataset_digest=dataset.manifest_digest, seed=config.seed)
    ckpt = _run_training(dataset, config, out)
    print(f"stage {config.stage}: checkpoint {ckpt}, history {out / 'history.csv'}")
    return 0


def cmd_export_depth(args) -> int:
    dataset = load_dataset(args.data)
    out = Path(args.out)
    _write_run_manifest(out, "export-depth", {
        "data": str(args.data), "checkpoint": str(args.checkpoint),
        "depth_bits": args.depth_bits,
    }, dataset_digest=dataset.manifest_digest, seed=None)
    generator, _, profile, _ = load_depthgen_checkpoint(args.checkpoint)
    exported = export_generated_depth(dataset, generator, profile)
    save_dataset(exported, out, depth_bits=args.depth_bits)
    print(f"wrote generated-depth dataset ({len(exported)} samples) to {out}")
    return 0


def _evaluate_rank1(dataset, streams, heads, dump_path: Path | None = None):
    """Shared by eval and sweep: full gallery/probe rank-1 on a dataset."""
    protocol = build_protocol(dataset)
    gallery_idx = list(protocol.gallery_indices)
    probe_idx = list(protocol.probe_indices)
    gallery_emb = embed_dataset(dataset, streams, heads, gallery_idx)
    probe_emb = embed_dataset(dataset, streams, heads, probe_idx)
    probe_labels = np.array([dataset[i].identity for i in probe_idx])
    gallery_labels = np.array([dataset[i].identity for i in gallery_idx])
    if dump_path is not None:
        np.savez(dump_path, probe=probe_emb, gallery=gallery_emb,
                 probe_labels=probe_labels, gallery_labels=gallery_labels)
    matrix = similarity_matrix(probe_emb, gallery_emb)
    return rank1_report(
        matrix,
        probe_labels=probe_labels,
        gallery_labels=gallery_labels,
        subset_of={k: dataset[i].subset for k, i in enumerate(probe_idx)})


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    out = Path(args.out)
    _write_run_manifest(out, "eval", {
        "data": str(args.data),
        "fusion_ckpt": str(args.fusion_ckpt),
        "gen_ckpt": str(args.gen_ckpt) if args.gen_ckpt else None,
    }, dataset_digest=dataset.manifest_digest, seed=None)

    streams, heads, _, profile, _ = load_fusion_checkpoint(args.fusion_ckpt)
    if args.gen_ckpt:
        generator, _, gen_profile, _ = load_depthgen_checkpoint(args.gen_ckpt)
        if gen_profile.name != profile.name:
            raise CliError(f"generator profile {gen_profile.name!r} does not match "
                           f"fusion profile {profile.name!r}")
        eval_ds = export_generated_depth(dataset, generator, profile)
        depth_mae = mae(np.stack([s.depth for s in eval_ds]),
                        np.stack([s.depth for s in dataset]))
        (out / "mae_report.txt").write_text(f"mae={depth_mae:.6f}\n", encoding="utf-8")
    else:
        eval_ds = dataset

    report = _evaluate_rank1(eval_ds, streams, heads,
                             dump_path=out / "embeddings.npz")
    (out / "rank_report.txt").write_text(report.to_key_values(), encoding="utf-8")
    (out / "rank_table.txt").write_text(report.to_table(), encoding="utf-8")
    print(report.to_key_values(), end="")
    return 0


def cmd_sweep_lambda(args) -> int:
    lambdas = sorted({float(v) for v in args.lambdas.split(",") if v.strip()})
    if not lambdas:
        raise CliError("lambda list is empty")
    dataset = load_dataset(args.data)
    out = Path(args.out)
    _write_run_manifest(out, "sweep-lambda", {
        "data": str(args.data), "lambdas": lambdas, "epochs": args.epochs,
        "profile": args.profile,
    }, dataset_digest=dataset.manifest_digest, seed=args.seed)

    rows = []
    for lam in lambdas:
        config = TrainConfig(stage="fusion", max_epochs=args.epochs,
                             seed=args.seed, profile=args.profile, lambda_dis=lam)
        run_dir = out / f"lambda_{lam:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        _run_training(dataset, config, run_dir)
        streams, heads, _, _, _ = load_fusion_checkpoint(run_dir / "checkpoint.ckpt")
        report = _evaluate_rank1(dataset, streams, heads)
        rows.append((lam, report.overall_accuracy))
        print(f"lambda={lam:g}: rank1={report.overall_accuracy:.4f}")

    table = "lambda,rank1\n" + "".join(f"{lam:g},{acc:.6f}\n" for lam, acc in rows)
    (out / "sweep.csv").write_text(table, encoding="utf-8")
    return 0


def cmd_ablate(args) -> int:
    dataset = load_dataset(args.data)
    out = Path(args.out)
    _write_run_manifest(out, "ablate", {
        "data": str(args.data), "epochs": args.epochs, "profile": args.profile,
    }, dataset_digest=dataset.manifest_digest, seed=args.seed)

    rows = []
    for cfe_on, cic_on in ((False, False), (False, True), (True, False), (True, True)):
        config = TrainConfig(stage="fusion", max_epochs=args.epochs, seed=args.seed,
                             profile=args.profile, cic_on=cic_on, cfe_on=cfe_on)
        run_dir = out / f"cfe_{int(cfe_on)}_cic_{int(cic_on)}"
        run_dir.mkdir(parents=True, exist_ok=True)
        _run_training(dataset, config, run_dir)
        streams, heads, _, _, _ = load_fusion_checkpoint(run_dir / "checkpoint.ckpt")
        report = _evaluate_rank1(dataset, streams, heads)
        rows.append((cfe_on, cic_on, report.overall_accuracy))
        print(f"cfe={'on' if cfe_on else 'off'} cic={'on' if cic_on else 'off'}: "
              f"rank1={report.overall_accuracy:.4f}")

    table = "cfe,cic,rank1\n" + "".join(
        f"{'on' if c else 'off'},{'on' if i else 'off'},{acc:.6f}\n"
        for c, i, acc in rows)
    (out / "ablation.csv").write_text(table, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgbdface",
        description="Two-stage RGB-D face recognition: depth generation, "
                    "two-stream fusion, rank-1 evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a paired RGB-D dataset")
    p.add_argument("--ids", type=int, required=True, help="number of identities")
    p.add_argument("--per-id", type=int, required=True, help="samples per identity")
    p.add_argument("--res", default="64", help="resolution (int or HxW, multiples of 32)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--depth-bits", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one pipeline stage")
    p.add_argument("--stage", choices=("depthgen", "fusion"), required=True)
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--profile", choices=sorted(PROFILES), default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=None,
                   help="default: 32 for depthgen, 4 for fusion")
    p.add_argument("--lr", type=float, default=None,
                   help="default: 0.01 for depthgen, 0.001 for fusion")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--decay-factor", type=float, default=0.5)
    p.add_argument("--no-mfs", action="store_true", help="drop the feature loss (stage 1)")
    p.add_argument("--mfs-levels", type=int, default=3)
    p.add_argument("--no-cic", action="store_true", help="drop the consistency loss (stage 2)")
    p.add_argument("--no-cfe", action="store_true", help="drop the exclusion loss (stage 2)")
    p.add_argument("--lambda-dis", type=float, default=0.5, dest="lambda_dis",
                   help="identity-loss weight in the stage-2 total")
    p.add_argument("--arc-scale", type=float, default=30.0)
    p.add_argument("--arc-margin", type=float, default=0.5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export-depth", help="replace dataset depth with generated depth")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--depth-bits", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_export_depth)

    p = sub.add_parser("eval", help="rank-1 identification (and MAE with --gen-ckpt)")
    p.add_argument("--data", required=True)
    p.add_argument("--fusion-ckpt", required=True)
    p.add_argument("--gen-ckpt", default=None,
                   help="stage-1 checkpoint; regenerates depth and reports MAE "
                        "against the dataset's stored depth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda", help="train stage 2 per lambda, table accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambdas", default=DEFAULT_LAMBDAS)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=sorted(PROFILES), default="full")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("ablate", help="2x2 cic/cfe toggle matrix for stage 2")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=sorted(PROFILES), default="full")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
