"""Command-line surface: train, eval, rank, inspect-partition, make-toy.

Exit codes: 0 success, 2 configuration or data problems, 3 checkpoint
incompatibility, 4 checkpoint corruption.

Output layout under --out: checkpoints/ (training archives), reports/
(metric files), grids/ (ranking visualizations).
"""

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import data as data_mod
from . import evaluation as eval_mod
from . import trainer as trainer_mod
from .partition import enumerate_windows
from .trainer import TrainConfig, TrainSchedule

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INCOMPATIBLE = 3
EXIT_CORRUPT = 4


def load_train_config(path=None, overrides=None):
    """TrainConfig from an optional YAML file plus CLI overrides."""
    raw = {}
    if path is not None:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    if "schedule" in raw:
        sched = dict(raw.pop("schedule"))
        if "milestones" in sched:
            sched["milestones"] = tuple(sorted(
                (int(k), float(v)) for k, v in dict(sched["milestones"]).items()
            ))
        raw["schedule"] = TrainSchedule(**sched)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    return TrainConfig(**raw)


def cmd_train(args):
    overrides = {
        "variant": args.variant,
        "data_root": args.data,
        "out_dir": args.out,
        "seed": args.seed,
        "epochs": args.epochs,
        "steps_per_epoch": args.steps_per_epoch,
        "base_width": args.base_width,
        "num_ids_per_batch": args.p,
        "num_imgs_per_id": args.k,
    }
    try:
        cfg = load_train_config(args.config, overrides)
    except (OSError, ValueError, TypeError, yaml.YAMLError) as e:
        print(f"error: bad config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.data_root is None:
        print("error: no dataset root (set data_root in the config or pass --data)",
              file=sys.stderr)
        return EXIT_CONFIG
    if not Path(cfg.data_root).is_dir():
        print(f"error: dataset root {cfg.data_root} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ckpt, log_path, _ = trainer_mod.train(cfg, resume=args.resume)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer_mod.IncompatibleCheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except trainer_mod.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    print(f"checkpoint: {ckpt}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_eval(args):
    try:
        index = data_mod.scan_dataset(args.data)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result, manifest = trainer_mod.evaluate_checkpoint(
            args.checkpoint, index, use_train=args.use_train,
            normalize=args.l2_normalize,
        )
    except trainer_mod.IncompatibleCheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except trainer_mod.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT

    report = eval_mod.metrics_report(result)
    report["variant"] = manifest["variant"]
    report["embedding_dim"] = manifest["embedding_dim"]
    out = Path(args.out) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    table = eval_mod.report_table(result)
    (out / "metrics.txt").write_text(table)
    print(table, end="")
    print(f"reports: {out}")
    return EXIT_OK


def _thumbnail(index, record, size=(64, 128), border=None, width=3):
    img = data_mod.load_image(index, record)
    if isinstance(img, np.ndarray):
        img = Image.fromarray(img)
    img = img.convert("RGB").resize(size, Image.BILINEAR)
    if border is not None:
        framed = Image.new("RGB", (size[0] + 2 * width, size[1] + 2 * width), border)
        framed.paste(img, (width, width))
        return framed
    return img


def cmd_rank(args):
    try:
        index = data_mod.scan_dataset(args.data)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        payload = trainer_mod.load_checkpoint(args.checkpoint)
        model, manifest = trainer_mod.model_from_checkpoint(payload)
    except trainer_mod.IncompatibleCheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except trainer_mod.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT

    query = index.split("query")
    gallery = index.split("gallery")
    if args.num_queries is not None:
        query = query[: args.num_queries]
    if not query:
        print("no query images; nothing to rank")
        return EXIT_OK

    q_emb = eval_mod.extract_embeddings(model, index, query)
    g_emb = eval_mod.extract_embeddings(model, index, gallery)
    dist = eval_mod.distance_matrix(q_emb, g_emb)
    lists = eval_mod.rank_list(
        dist,
        np.array([r.person_id for r in query]),
        np.array([r.camera_id for r in query]),
        np.array([r.person_id for r in gallery]),
        np.array([r.camera_id for r in gallery]),
        args.k,
    )

    out = Path(args.out) / "grids"
    out.mkdir(parents=True, exist_ok=True)
    thumb, pad = (64, 128), 3
    cell = (thumb[0] + 2 * pad, thumb[1] + 2 * pad)
    grid = Image.new("RGB", (cell[0] * (args.k + 1), cell[1] * len(query)), "white")
    index_rows = []
    for row, (q, entries) in enumerate(zip(query, lists)):
        grid.paste(_thumbnail(index, q, thumb, border="black"), (0, row * cell[1]))
        for col, (g, match) in enumerate(entries):
            color = "green" if match else "red"
            grid.paste(
                _thumbnail(index, gallery[g], thumb, border=color),
                ((col + 1) * cell[0], row * cell[1]),
            )
            index_rows.append({
                "query": Path(q.path).name,
                "rank": col + 1,
                "gallery": Path(gallery[g].path).name,
                "is_match": match,
            })
    grid_path = out / "rank_grid.png"
    grid.save(grid_path)
    with open(out / "rank_index.jsonl", "w") as f:
        for row in index_rows:
            f.write(json.dumps(row) + "\n")
    print(f"grid: {grid_path}")
    print(f"index: {out / 'rank_index.jsonl'}")
    return EXIT_OK


def cmd_inspect_partition(args):
    if args.strips < 1:
        print(f"error: --strips must be >= 1, got {args.strips}", file=sys.stderr)
        return EXIT_CONFIG
    windows = enumerate_windows(args.strips, include_full=args.include_full)
    print(f"strips: {args.strips}   windows: {len(windows)}")
    print("start  length  height_fraction")
    for w in windows:
        print(f"{w.start:>5}  {w.length:>6}  {str(w.height_fraction):>15}")
    if not windows:
        print("(no local windows: the only qualifying window is full height,"
              " which the global part owns)")
    for w in windows:
        print(json.dumps({
            "start": w.start, "length": w.length, "total": w.total,
            "height_fraction": str(w.height_fraction),
        }))
    return EXIT_OK


def cmd_make_toy(args):
    index = data_mod.make_synthetic(args.ids, args.imgs_per_id, seed=args.seed)
    root = data_mod.export_dataset(index, args.out)
    counts = {s: len(index.split(s)) for s in data_mod.SPLITS}
    print(f"wrote {root}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cgpn",
        description="Coarse-grained part-level re-identification harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--variant", choices=sorted(trainer_mod.VARIANTS))
    p.add_argument("--data", help="dataset root (train/query/gallery)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int, dest="steps_per_epoch")
    p.add_argument("--base-width", type=int, dest="base_width")
    p.add_argument("-p", type=int, help="identities per batch")
    p.add_argument("-k", type=int, help="images per identity")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/eval")
    p.add_argument("--use-train", action="store_true",
                   help="score the train split against itself")
    p.add_argument("--l2-normalize", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank", help="emit top-k retrieval grids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/rank")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--num-queries", type=int, dest="num_queries")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("inspect-partition", help="print the strip-window table")
    p.add_argument("--strips", type=int, required=True)
    p.add_argument("--include-full", action="store_true",
                   help="also list the full-height window")
    p.set_defaults(func=cmd_inspect_partition)

    p = sub.add_parser("make-toy", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--imgs-per-id", type=int, default=6, dest="imgs_per_id")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
