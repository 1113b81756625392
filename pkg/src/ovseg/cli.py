"""Command-line interface.

Subcommands: train, infer, eval, partition, analyze, tiles. Config values come
from a JSON file or a named preset, with --set section.key=value overrides
(flag beats file). Exit codes: 0 ok, 1 missing input file, 2 invalid
config/arguments, 3 training divergence, 4 checkpoint/model mismatch.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import imaging
from .config import ConfigError, ModelConfig, config_from_dict, load_config, preset
from .errors import (AlignmentError, CheckpointMismatch, ShapeError,
                     TrainingDiverged, UndefinedMetricError)
from .evaluation import (ConfusionMatrix, PrototypeSet, partition_classes,
                         ridge_r2, subset_miou, textual_prototypes)
from .lga import infer as lga_infer
from .lga import plan_tiles
from .model import SegModel
from .tensorio import load_checkpoint, load_embeddings, save_embeddings
from .training import scene_dataset, train as run_training

EXIT_OK = 0
EXIT_MISSING = 1
EXIT_INVALID = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4


def _load_run_config(args):
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file {args.config} not found")
        return load_config(args.config, overrides=args.set or ())
    cfg = preset(getattr(args, "preset", None) or "desk")
    data = cfg.to_dict()
    for item in (args.set or ()):
        from .config import apply_override
        apply_override(data, item)
    return config_from_dict(data)


def _class_list(args):
    if getattr(args, "classes", None):
        names = [c.strip() for c in args.classes.split(",") if c.strip()]
    elif getattr(args, "classes_file", None):
        if not os.path.exists(args.classes_file):
            raise FileNotFoundError(f"class file {args.classes_file} not found")
        with open(args.classes_file) as f:
            names = [line.strip() for line in f if line.strip()]
    else:
        names = []
    if not names:
        raise ConfigError("class list is empty")
    return names


# -- subcommands ---------------------------------------------------------------

def cmd_train(args):
    cfg = _load_run_config(args)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    scenes = scene_dataset(cfg.train.scenes, cfg.train.scene_classes,
                           cfg.train.scene_size, seed=cfg.seed)
    model = SegModel(cfg.model, seed=cfg.seed)
    log = print if not args.quiet else None
    history, reached = run_training(model, scenes, cfg.train, out_dir=out_dir,
                                    seed=cfg.seed, log=log)
    with open(os.path.join(out_dir, "run_config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=1)
    summary = {"iterations": len(history), "final_loss": history[-1][3],
               "target_reached": reached, "out_dir": out_dir}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_infer(args):
    if not os.path.exists(args.image):
        raise FileNotFoundError(f"image file {args.image} not found")
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    names = _class_list(args)
    cfg = _load_run_config(args)
    manifest_meta = _peek_meta(args.checkpoint)
    if "model" in manifest_meta:
        model_cfg = ModelConfig(**manifest_meta["model"])
    else:
        model_cfg = cfg.model
    model = SegModel(model_cfg, seed=cfg.seed)
    load_checkpoint(args.checkpoint, model)
    infer_cfg = cfg.infer
    if args.no_lga:
        infer_cfg = dataclasses.replace(infer_cfg, lga_vlm=False)
    if args.lga_spe:
        infer_cfg = dataclasses.replace(infer_cfg, lga_spe=True)
    image = imaging.read_image(args.image)
    result = lga_infer(image, model, names, infer_cfg)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    index_path = os.path.join(args.out, f"{stem}_labels.png")
    color_path = os.path.join(args.out, f"{stem}_color.png")
    imaging.write_index_png(index_path, result.labels)
    imaging.write_color_png(color_path, result.labels, len(names))
    outputs = {"labels": index_path, "color": color_path}
    if args.probs:
        probs_path = os.path.join(args.out, f"{stem}_probs.ovsg")
        save_embeddings(probs_path, result.probs, names)
        outputs["probs"] = probs_path
    print(json.dumps({"classes": names, "outputs": outputs,
                      "size": list(result.labels.shape)}))
    return EXIT_OK


def _peek_meta(ckpt_path):
    try:
        with open(str(ckpt_path) + ".json") as f:
            return json.load(f).get("meta", {})
    except FileNotFoundError:
        raise CheckpointMismatch(f"missing checkpoint manifest {ckpt_path}.json")


def cmd_eval(args):
    names = _class_list(args)
    pred_files = _png_map(args.pred)
    gt_files = _png_map(args.gt)
    orphans = sorted(set(pred_files) ^ set(gt_files))
    if orphans:
        raise ConfigError(f"unpaired files between pred and gt: {orphans}")
    if not pred_files:
        raise ConfigError("no prediction/target pairs found")
    conf = ConfusionMatrix(len(names), ignore_label=args.ignore)
    for key in sorted(pred_files):
        pred = imaging.read_index_png(pred_files[key])
        target = imaging.read_index_png(gt_files[key])
        conf.update(target, pred)
    iou = conf.per_class_iou()
    report = {
        "n_images": len(pred_files),
        "classes": names,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "miou": float(np.nanmean(iou)),
    }
    if args.partition:
        with open(args.partition) as f:
            part_data = json.load(f)
        index = {name: i for i, name in enumerate(names)}
        part = _partition_from_json(part_data, index)
        seen, unseen = subset_miou(conf, part)
        report["seen_miou"] = seen
        report["unseen_miou"] = unseen
        report["partition"] = part.as_dict(names)
    payload = json.dumps(report, indent=1)
    print(payload)
    if args.out:
        with open(args.out, "w") as f:
            f.write(payload)
    return EXIT_OK


def _partition_from_json(data, index):
    from .evaluation import ClassPartition

    def resolve(items):
        out = set()
        for item in items:
            out.add(index[item] if isinstance(item, str) else int(item))
        return out

    return ClassPartition(resolve(data["seen"]), resolve(data["unseen"]),
                          data.get("threshold", 0.9), data.get("mode", "visual"))


def _png_map(dirname):
    if not os.path.isdir(dirname):
        raise FileNotFoundError(f"directory {dirname} not found")
    return {os.path.splitext(f)[0]: os.path.join(dirname, f)
            for f in os.listdir(dirname) if f.lower().endswith(".png")}


def cmd_partition(args):
    cfg = _load_run_config(args)
    if args.mode == "textual" and args.train_classes and args.test_classes:
        model = SegModel(cfg.model, seed=cfg.seed)
        train_names = [c.strip() for c in args.train_classes.split(",") if c.strip()]
        test_names = [c.strip() for c in args.test_classes.split(",") if c.strip()]
        train_protos = textual_prototypes(model.encode_texts(train_names))
        test_protos = textual_prototypes(model.encode_texts(test_names))
    else:
        if not args.train_emb or not args.test_emb:
            raise ConfigError("visual mode needs --train-emb and --test-emb files")
        train_protos = _protos_from_file(args.train_emb)
        test_protos = _protos_from_file(args.test_emb)
    part = partition_classes(train_protos, test_protos,
                             threshold=args.threshold, mode=args.mode)
    payload = json.dumps(part.as_dict(test_protos.class_names), indent=1)
    print(payload)
    if args.out:
        with open(args.out, "w") as f:
            f.write(payload)
    return EXIT_OK


def _protos_from_file(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"embedding file {path} not found")
    arr, names = load_embeddings(path)
    if arr.ndim != 2:
        raise ShapeError(f"embedding file {path} must hold a (N, C) matrix")
    return PrototypeSet(names or [str(i) for i in range(arr.shape[0])], arr)


def cmd_analyze(args):
    cfg = _load_run_config(args)
    g, _ = load_embeddings(args.global_emb)
    l, _ = load_embeddings(args.local_emb)
    y, _ = load_embeddings(args.prototypes)
    if g.shape[0] != l.shape[0] or g.shape[0] != y.shape[0]:
        raise ShapeError(
            f"row counts differ: global {g.shape[0]}, local {l.shape[0]}, "
            f"prototypes {y.shape[0]}")
    alpha = args.alpha if args.alpha is not None else cfg.eval.ridge_alpha
    folds = args.folds or cfg.eval.folds
    table = {
        "global_only": ridge_r2(g, y, alpha=alpha, folds=folds, seed=cfg.seed),
        "local_only": ridge_r2(l, y, alpha=alpha, folds=folds, seed=cfg.seed),
        "concatenated": ridge_r2(np.concatenate([g, l], axis=1), y,
                                 alpha=alpha, folds=folds, seed=cfg.seed),
    }
    payload = json.dumps({"alpha": alpha, "folds": folds, "r2": table}, indent=1)
    print(payload)
    if args.out:
        with open(args.out, "w") as f:
            f.write(payload)
    return EXIT_OK


def cmd_tiles(args):
    cfg = _load_run_config(args)
    plan = plan_tiles(cfg.infer)
    print(json.dumps({
        "image": list(plan.image_hw), "window": plan.window,
        "overlap": plan.overlap, "stride": plan.stride,
        "n_tiles": plan.n_tiles, "origins": [list(o) for o in plan.origins],
    }, indent=1))
    return EXIT_OK


# -- wiring ----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ovseg",
                                     description="Desk-scale open-vocabulary segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--preset", choices=["desk", "paper"], help="named preset")
        p.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                       help="override a config value")

    p = sub.add_parser("train", help="train on synthetic scenes")
    common(p)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="segment an image with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--classes-file", help="file with one class name per line")
    p.add_argument("--out", default="out")
    p.add_argument("--no-lga", action="store_true", help="single full-image pass")
    p.add_argument("--lga-spe", action="store_true", help="tile the prior encoder too")
    p.add_argument("--probs", action="store_true", help="dump probability tensor")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="mIoU report from prediction/target PNG dirs")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--classes-file")
    p.add_argument("--ignore", type=int, default=255)
    p.add_argument("--partition", help="partition JSON for seen/unseen split")
    p.add_argument("--out", help="write the JSON report here too")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("partition", help="seen/unseen split by prototype similarity")
    common(p)
    p.add_argument("--mode", choices=["visual", "textual"], default="visual")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--train-emb", help="training prototypes (.ovsg)")
    p.add_argument("--test-emb", help="test prototypes (.ovsg)")
    p.add_argument("--train-classes", help="textual mode: training class names")
    p.add_argument("--test-classes", help="textual mode: test class names")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("analyze", help="ridge R2 of text embeddings vs prototypes")
    common(p)
    p.add_argument("--global-emb", required=True)
    p.add_argument("--local-emb", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("tiles", help="print the tiling schedule")
    common(p)
    p.set_defaults(fn=cmd_tiles)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as e:
        print(f"error: {e}; diagnostics: {json.dumps(e.diagnostics)}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointMismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ConfigError, ShapeError, AlignmentError, UndefinedMetricError,
            ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
