"""Command-line surface.

Exit codes: 0 success, 2 usage/input error, 3 numeric failure. Commands
stage their outputs in a sibling ".partial" path and rename on success, so
a failed run never leaves a half-written dataset or run directory behind.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .configio import ConfigError, build_configs, parse_kv_text
from .model import STAGES, AdaptModel, AttentionRecord
from .morphology import (
    UnlabeledVolumeError,
    augment_sample,
    expand_atrophy,
    flat_square,
    reduce_atrophy,
)
from .numerics import NumericError, ShapeError
from .slicer import VIEW_NAMES, default_bounds, extract_slices
from .trainer import (
    CheckpointError,
    TrainingDiverged,
    evaluate,
    initial_allocation,
    load_checkpoint,
    prepare_stack,
    save_checkpoint,
    train,
)
from .volumes import (
    LABEL_AD,
    LABEL_MCI,
    LABEL_NAMES,
    LABEL_NC,
    DegenerateVolumeError,
    PhantomSpec,
    VolumeFormatError,
    generate_phantom,
    load_dataset,
    load_volume,
    read_manifest,
    save_volume,
    write_manifest,
)
from . import viz


class UsageError(ValueError):
    """Bad flags, paths, or inputs; maps to exit code 2."""


_INPUT_ERRORS = (
    UsageError,
    ConfigError,
    VolumeFormatError,
    CheckpointError,
    DegenerateVolumeError,
    UnlabeledVolumeError,
    FileNotFoundError,
    NotADirectoryError,
    ShapeError,
    ValueError,
)
_NUMERIC_ERRORS = (TrainingDiverged, NumericError)


@contextmanager
def _staged(target):
    """Build outputs under <target>.partial, rename to <target> on success."""
    target = Path(target)
    if target.exists():
        raise UsageError(f"output path {target} already exists")
    if not target.parent.exists():
        raise UsageError(f"parent directory {target.parent} does not exist")
    tmp = target.with_name(target.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    tmp.rename(target)


def _load_split_volumes(data_dir):
    data_dir = Path(data_dir)
    if not (data_dir / "manifest.tsv").exists():
        raise UsageError(f"no manifest.tsv under {data_dir}")
    return load_dataset(data_dir)


def cmd_gen_phantoms(args):
    if args.count < 1:
        raise UsageError("--count must be positive")
    spec = PhantomSpec.scaled(args.size, noise_sd=args.noise, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    labels = [(LABEL_NC, LABEL_AD, LABEL_MCI)[i % 3] for i in range(args.count)]
    with _staged(args.out) as tmp:
        entries = []
        per_class_seen = {LABEL_NC: 0, LABEL_AD: 0, LABEL_MCI: 0}
        totals = {k: labels.count(k) for k in per_class_seen}
        for i, label in enumerate(labels):
            vol = generate_phantom(spec, label, rng)
            name = f"phantom_{i:04d}_{LABEL_NAMES[label]}.advl"
            save_volume(vol, tmp / name)
            entries.append((name, _split_for(label, per_class_seen[label], totals[label])))
            per_class_seen[label] += 1
        write_manifest(tmp, entries)
    print(f"wrote {args.count} volumes to {args.out}")
    return 0


def _split_for(label, index, total):
    """70/15/15 by class order; MCI goes to train only (binary val/test)."""
    if label == LABEL_MCI:
        return "train"
    n_train = round(0.7 * total)
    n_val = round(0.15 * total)
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def cmd_augment(args):
    if args.se_radius < 0:
        raise UsageError("--se-radius must be nonnegative")
    in_dir = Path(args.in_dir)
    entries = read_manifest(in_dir)
    se = flat_square(args.se_radius)
    rng = np.random.default_rng(args.seed)
    with _staged(args.out) as tmp:
        out_entries = []
        for name, split in entries:
            vol = load_volume(in_dir / name)
            stem = Path(name).stem
            if args.mode == "policy":
                pairs = augment_sample(vol, rng, se=se)
                for j, (new_vol, label) in enumerate(pairs):
                    out_name = f"{stem}_a{j}_{LABEL_NAMES[label]}.advl"
                    save_volume(new_vol, tmp / out_name)
                    out_entries.append((out_name, split))
            else:
                axis = int(rng.integers(3))
                op = expand_atrophy if args.mode == "expand" else reduce_atrophy
                suffix = "exp" if args.mode == "expand" else "red"
                out_name = f"{stem}_{suffix}.advl"
                save_volume(op(vol, se, axis), tmp / out_name)
                out_entries.append((out_name, split))
        write_manifest(tmp, out_entries)
    print(f"wrote {len(out_entries)} volumes to {args.out}")
    return 0


def _merged_options(args):
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        raw.update(parse_kv_text(path.read_text(), source=str(path)))
    for key in (
        "patch_size",
        "embed_dim",
        "heads",
        "mlp_ratio",
        "n_total",
        "epochs",
        "batch_size",
        "lr",
        "p_update",
        "se_radius",
    ):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = str(value)
    if args.layers is not None:
        raw["layers"] = args.layers
    if args.no_augment:
        raw["augment"] = "false"
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    return raw


def cmd_train(args):
    splits = _load_split_volumes(args.data)
    if not splits["train"] or not splits["val"]:
        raise UsageError("dataset needs nonempty train and val splits")
    extent = splits["train"][0].extents[0]
    for vol in splits["train"] + splits["val"]:
        if vol.extents != (extent, extent, extent):
            raise UsageError(f"volumes must share one cubic extent, got {vol.extents}")
    model_cfg, train_cfg = build_configs(_merged_options(args), image_extent=extent)
    model = AdaptModel(model_cfg, seed=train_cfg.seed)

    def log(row):
        counts = "/".join(str(c) for c in row.counts)
        print(
            f"epoch {row.epoch} loss {row.train_loss:.4f} "
            f"val_acc {row.val_acc:.4f} alloc {counts} lr {row.lr:.3e}"
        )

    with _staged(args.out) as tmp:
        result = train(splits["train"], splits["val"], model, train_cfg, log=log)
        save_checkpoint(
            tmp / "checkpoint.adpt",
            result.model,
            result.optimizer,
            result.allocation,
            result.rng,
            train_cfg.epochs,
            train_cfg,
        )
        with open(tmp / "metrics.tsv", "w") as fh:
            for m in result.metrics:
                fh.write(
                    f"{m.epoch}\t{m.train_loss:.6f}\t{m.val_acc:.6f}"
                    f"\t{m.counts[0]}\t{m.counts[1]}\t{m.counts[2]}\t{m.lr:.8e}\n"
                )
        viz.save_training_figure(result.metrics, tmp / "training_curves.png")
    print(f"run written to {args.out}")
    return 0


def cmd_eval(args):
    ck = load_checkpoint(args.checkpoint)
    splits = _load_split_volumes(args.data)
    vols = splits[args.split]
    if not vols:
        raise UsageError(f"split {args.split!r} is empty")
    acc, confusion = evaluate(ck.model, vols, ck.allocation)
    print(f"accuracy\t{acc:.4f}")
    print("confusion\ttrue\\pred\tnc\tad")
    for true_label in (LABEL_NC, LABEL_AD):
        row = "\t".join(str(confusion[true_label, p]) for p in (LABEL_NC, LABEL_AD))
        print(f"confusion\t{LABEL_NAMES[true_label]}\t{row}")
    return 0


def cmd_attn_map(args):
    ck = load_checkpoint(args.checkpoint)
    vol = load_volume(args.volume)
    cfg = ck.model.config
    stack = prepare_stack(vol, ck.allocation, cfg.image_extent)
    record = AttentionRecord()
    ck.model.forward(stack, record=record)

    grid = cfg.grid
    extent = cfg.image_extent
    maps = {}
    picked_slices = {}
    for view in range(3):
        members = stack.view_members(view)
        mid = members[len(members) // 2]
        mid_in_view = members.index(mid)
        picked_slices[view] = stack.slices[mid]
        for stage in STAGES:
            rows = record.rows[stage][view]
            if stage == "inter":
                row = rows[0]  # [H, T]
            else:
                row = rows[0, mid_in_view]
            patch_row = row.mean(axis=0)[1:]  # heads averaged, class slot dropped
            maps[(view, stage)] = viz.bilinear_upsample(
                patch_row.reshape(grid, grid), extent
            )
    with _staged(args.out_dir) as tmp:
        for view in range(3):
            viz.write_pgm(
                tmp / f"slice_{VIEW_NAMES[view]}.pgm", viz.minmax_u8(picked_slices[view])
            )
            for stage in STAGES:
                viz.write_pgm(
                    tmp / f"map_{VIEW_NAMES[view]}_{stage}.pgm",
                    viz.minmax_u8(maps[(view, stage)]),
                )
        viz.save_attention_panel(maps, picked_slices, STAGES, tmp / "panel.png")
    print(f"attention maps written to {args.out_dir}")
    return 0


def cmd_slice_dump(args):
    vol = load_volume(args.volume)
    extent = vol.extents[0]
    if vol.extents != (extent, extent, extent):
        raise UsageError(f"volume must be cubic, got {vol.extents}")
    n_min, n_max = default_bounds(args.n_total)
    alloc = initial_allocation(args.n_total, n_min, n_max)
    stack = extract_slices(vol, alloc)
    with _staged(args.out_dir) as tmp:
        for i, (view, src) in enumerate(stack.provenance):
            viz.write_pgm(
                tmp / f"slice_{VIEW_NAMES[view]}_{src:04d}.pgm",
                viz.minmax_u8(stack.slices[i]),
            )
    print(f"{len(stack.provenance)} slices written to {args.out_dir}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="adapt3d",
        description="Adaptive slice-transformer toolkit for 3D volume classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", help="generate a synthetic phantom dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("augment", help="morphology-augment a dataset")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("expand", "reduce", "policy"), required=True)
    p.add_argument("--se-radius", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--layers", default=None, help="e.g. 1,1,2,2")
    p.add_argument("--mlp-ratio", dest="mlp_ratio", type=int, default=None)
    p.add_argument("--n-total", dest="n_total", type=int, default=None)
    p.add_argument("--p-update", dest="p_update", type=float, default=None)
    p.add_argument("--se-radius", dest="se_radius", type=int, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-map", help="export per-stage attention maps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_attn_map)

    p = sub.add_parser("slice-dump", help="write a volume's slices as PGM images")
    p.add_argument("--volume", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--n-total", dest="n_total", type=int, default=12)
    p.set_defaults(func=cmd_slice_dump)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except _INPUT_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
