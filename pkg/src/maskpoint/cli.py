"""Command-line entry point: ``maskpoint <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def cmd_gen_data(args):
    from .coco import write_dataset
    from .synth import SceneConfig, generate_dataset

    cfg = SceneConfig(size=args.size, num_classes=args.classes, overlap=args.overlap,
                      min_instances=args.min_instances, max_instances=args.max_instances, noise=args.noise,
                      scale_range=tuple(args.scale_range))
    records = generate_dataset(cfg, args.scenes, args.seed, start_id=args.start_id)
    index = write_dataset(records, args.out)
    print(f"wrote {len(records)} scenes to {index}")


def cmd_make_labels(args):
    from .coco import make_labels

    doc = make_labels(args.annotations, args.out, args.k, args.sampling, args.epsilon, args.center, args.seed)
    print(f"labeled {len(doc['annotations'])} annotations -> {args.out}")


def _load_config(path):
    from .train import TrainConfig

    return TrainConfig.from_json(path) if path else TrainConfig()


def _labeled(records, cfg):
    from .synth import label_records

    if all(inst.contour_points is not None for r in records for inst in r.instances):
        return records
    logging.getLogger(__name__).info("no contour labels in dataset; labeling with k=%d", cfg.fusion.k)
    return label_records(records, cfg.fusion.k, cfg.sampling, cfg.epsilon, cfg.fusion.use_center, seed=cfg.seed)


def cmd_train(args):
    from .checkpoint import save_checkpoint
    from .coco import read_dataset
    from .train import Trainer

    cfg = _load_config(args.config)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.coco_preset:
        cfg.fusion.alpha = 0.1
    records = _labeled(read_dataset(args.data), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    with open(out / "train_log.jsonl", "w") as log_file:
        trainer = Trainer(records, cfg, log_file=log_file)
        trainer.run()
    path = save_checkpoint(trainer.model, out / "model.ckpt")
    last = trainer.history[-1] if trainer.history else None
    print(f"checkpoint: {path}")
    if last is not None:
        print(f"final loss: {last.total:.4f}")


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .coco import read_dataset
    from .train import InferConfig, evaluate

    model = load_checkpoint(args.checkpoint)
    fc = model.config.fusion
    records = read_dataset(args.data)
    if all(inst.contour_points is None for r in records for inst in r.instances):
        from .synth import label_records

        records = label_records(records, fc.k, use_center=fc.use_center)
    report = evaluate(model, records, InferConfig(score_threshold=args.score_threshold))
    text = report.to_json(indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def cmd_ablate(args):
    from .ablation import run_ablation, write_table
    from .coco import read_dataset
    from .synth import SceneConfig, generate_dataset
    from .train import TrainConfig

    grid = json.loads(Path(args.grid).read_text())
    base = TrainConfig.from_dict(grid.get("base", {}))
    if "train_data" in grid:
        train = read_dataset(grid["train_data"])
        held = read_dataset(grid["eval_data"])
    else:
        syn = grid.get("synthetic", {})
        scfg = SceneConfig(size=syn.get("size", 128), num_classes=base.model.num_classes,
                           scale_range=tuple(syn.get("scale_range", (8.0, 18.0))))
        seed = syn.get("seed", 0)
        train = generate_dataset(scfg, syn.get("train_scenes", 200), seed)
        held = generate_dataset(scfg, syn.get("eval_scenes", 50), seed + 1)
    table = run_ablation(grid, base, train, held, progress=lambda row: print(f"  {row.setting}: {row.status}", flush=True))
    out = args.out or grid.get("out", "ablation_out")
    write_table(table, out)
    print(table.to_text())


def cmd_export_heatmaps(args):
    from .checkpoint import load_checkpoint
    from .train import InferConfig
    from .viz import export_heatmaps

    model = load_checkpoint(args.checkpoint)
    image = np.asarray(Image.open(args.image).convert("RGB")) / 255.0
    paths = export_heatmaps(model, image, args.out, infer_config=InferConfig(score_threshold=args.score_threshold))
    for p in paths:
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="maskpoint", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic COCO-style dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=200)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--overlap", type=_on_off, default=False)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--start-id", type=int, default=0)
    g.add_argument("--min-instances", type=int, default=1)
    g.add_argument("--max-instances", type=int, default=4)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--scale-range", type=float, nargs=2, default=(8.0, 18.0), metavar=("MIN", "MAX"),
                   help="shape half-size range in pixels")
    g.set_defaults(func=cmd_gen_data)

    m = sub.add_parser("make-labels", help="add contour-point labels to COCO-style annotations")
    m.add_argument("--annotations", required=True)
    m.add_argument("--k", type=int, default=100)
    m.add_argument("--sampling", choices=("uniform", "corner"), default="uniform")
    m.add_argument("--epsilon", type=float, default=2.0)
    m.add_argument("--center", type=_on_off, default=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_labels)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--coco-preset", action="store_true", help="keypoint loss weight 0.1")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--score-threshold", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--grid", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-heatmaps", help="write per-detection heatmap PNGs")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True)
    x.add_argument("--out", default="heatmaps")
    x.add_argument("--score-threshold", type=float, default=0.5)
    x.set_defaults(func=cmd_export_heatmaps)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
