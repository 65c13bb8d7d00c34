"""``lucidcam`` command line.

Exit codes: 0 ok, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import asdict

import numpy as np

from . import __version__
from .cam import grad_cam, top_losses
from .data import (DataGenConfig, channel_stats, filter_outliers, generate_dataset, load_dataset_dir,
                   save_dataset, stratified_split)
from .errors import ArgumentError, DataError, NumericError, ShapeError
from .model import init_params, predict_logits, small_cam_net
from .optim import TrainConfig, evaluate, lr_find, train, wd_grid_search
from .persist import append_metrics, atomic_write_bytes, load_checkpoint, save_checkpoint
from .render import (apply_colormap, compose_panel, gray_to_rgb, image_to_rgb, overlay, plot_series,
                     read_png, to_grayscale, write_png)
from .rng import derive_seed
from . import layers as L

log = logging.getLogger("lucidcam")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


# -- argument types ----------------------------------------------------------

def _num(kind, test, desc):
    def parse(text):
        try:
            v = kind(text)
        except (TypeError, ValueError):
            raise argparse.ArgumentTypeError(f"expected {desc}, got {text!r}")
        if not test(v):
            raise argparse.ArgumentTypeError(f"expected {desc}, got {text!r}")
        return v
    parse.__name__ = desc
    return parse


pos_int = _num(int, lambda v: v >= 1, "an integer >= 1")
nonneg_int = _num(int, lambda v: v >= 0, "an integer >= 0")
pos_float = _num(float, lambda v: math.isfinite(v) and v > 0, "a number > 0")
nonneg_float = _num(float, lambda v: math.isfinite(v) and v >= 0, "a number >= 0")
unit_float = _num(float, lambda v: 0 <= v <= 1, "a number in [0, 1]")
open_unit = _num(float, lambda v: 0 < v < 1, "a number in (0, 1)")
seed_int = _num(int, lambda v: v >= 0, "a non-negative integer seed")


def wd_list(text):
    try:
        vals = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals or any(not math.isfinite(v) or v < 0 for v in vals):
        raise argparse.ArgumentTypeError(f"weight decays must be a non-empty list of numbers >= 0, got {text!r}")
    return vals


def class_choice(text):
    if text in ("auto", "0", "1"):
        return text
    raise argparse.ArgumentTypeError(f"--class must be auto, 0 or 1, got {text!r}")


# -- parser ------------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    if seed:
        p.add_argument("--seed", type=seed_int, default=None, help="RNG seed (fallback: $LUCIDCAM_SEED, then 42)")
    p.add_argument("--workers", type=pos_int, default=1, help="parallel workers for generation/evaluation")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_flags(p):
    p.add_argument("--data", required=True, help="dataset directory (train/ and valid/, or one labelled dir)")
    p.add_argument("--valid-frac", type=open_unit, default=0.2, help="split fraction when DIR is not pre-split")
    p.add_argument("--low", type=unit_float, default=0.05, help="drop images with mean intensity below this")
    p.add_argument("--high", type=unit_float, default=0.95, help="drop images with mean intensity above this")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="lucidcam", description="Train a small CNN on histopathology-style "
                                     "patches and explain its predictions with Grad-CAM.")
    parser.add_argument("--version", action="version", version=f"lucidcam {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    subs = {}

    p = subs["gen-data"] = sub.add_parser("gen-data", help="generate a synthetic labelled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=pos_int, default=2000)
    p.add_argument("--n-valid", type=pos_int, default=500)
    p.add_argument("--size", type=_num(int, lambda v: v >= 8, "an integer >= 8"), default=96)
    p.add_argument("--pos-frac", type=unit_float, default=0.4)
    p.add_argument("--bright-frac", type=unit_float, default=0.01)
    p.add_argument("--dark-frac", type=unit_float, default=0.01)
    _common(p)

    p = subs["find-lr"] = sub.add_parser("find-lr", help="exponential learning-rate sweep")
    _data_flags(p)
    p.add_argument("--lr-min", type=pos_float, default=1e-6)
    p.add_argument("--lr-max", type=pos_float, default=1.0)
    p.add_argument("--iters", type=_num(int, lambda v: v >= 2, "an integer >= 2"), default=200)
    p.add_argument("--wd", type=nonneg_float, default=1e-4)
    p.add_argument("--batch", type=pos_int, default=32)
    p.add_argument("--out", required=True, help="CSV of step,lr,smoothed_loss")
    p.add_argument("--plot", help="optional PNG of the curve")
    _common(p)

    p = subs["grid-wd"] = sub.add_parser("grid-wd", help="weight-decay grid search over LR sweeps")
    _data_flags(p)
    p.add_argument("--wds", type=wd_list, default=[1e-2, 1e-4, 1e-6])
    p.add_argument("--lr-min", type=pos_float, default=1e-6)
    p.add_argument("--lr-max", type=pos_float, default=1.0)
    p.add_argument("--iters", type=_num(int, lambda v: v >= 2, "an integer >= 2"), default=200)
    p.add_argument("--batch", type=pos_int, default=32)
    p.add_argument("--out", required=True, help="JSON report")
    _common(p)

    p = subs["train"] = sub.add_parser("train", help="two-phase one-cycle training")
    _data_flags(p)
    p.add_argument("--max-lr", type=pos_float, default=2e-2)
    p.add_argument("--wd", type=nonneg_float, default=1e-4)
    p.add_argument("--epochs1", type=nonneg_int, default=1)
    p.add_argument("--epochs2", type=nonneg_int, default=3)
    p.add_argument("--batch", type=pos_int, default=32)
    p.add_argument("--pct-peak", type=open_unit, default=0.5)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--head", choices=["gap_linear", "mlp"], default="gap_linear")
    p.add_argument("--out", required=True, help="checkpoint path (.lcam)")
    p.add_argument("--log", help="metrics log (.jsonl)")
    _common(p)

    p = subs["eval"] = sub.add_parser("eval", help="accuracy and loss of a checkpoint (JSON on stdout)")
    _data_flags(p)
    p.add_argument("--model", required=True)
    _common(p)

    p = subs["explain"] = sub.add_parser("explain", help="Grad-CAM overlay for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="8-bit RGB PNG")
    p.add_argument("--class", dest="cls", type=class_choice, default="auto")
    p.add_argument("--layer", default="last-conv", help="last-conv or convN")
    p.add_argument("--alpha", type=unit_float, default=0.4)
    p.add_argument("--label", type=_num(int, lambda v: v in (0, 1), "0 or 1"), default=None,
                   help="true label, shown in the panel caption")
    p.add_argument("--out", required=True)
    p.add_argument("--panel", action="store_true", help="write original | grayscale | overlay with caption")
    _common(p)

    p = subs["top-losses"] = sub.add_parser("top-losses", help="panel of the highest-loss validation images")
    _data_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--k", type=pos_int, default=9)
    p.add_argument("--columns", type=pos_int, default=3)
    p.add_argument("--grad-cam", action="store_true", help="tiles show Grad-CAM overlays")
    p.add_argument("--alpha", type=unit_float, default=0.4)
    p.add_argument("--out", required=True)
    _common(p)
    return parser, subs


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        parser.exit(EXIT_USAGE, "lucidcam: error: a command is required\n")
    sp = subs[args.command]
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            sp.error(f"cannot read config {args.config}: {e}")
        if not isinstance(cfg, dict):
            sp.error("config file must hold a JSON object")
        actions = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_").lstrip("_")
            dest = "cls" if dest == "class" else dest
            if dest not in actions or dest in ("config", "help"):
                sp.error(f"unknown config key {key!r}")
            action = actions[dest]
            if action.type is not None and value is not None:
                try:
                    value = action.type(",".join(map(str, value)) if isinstance(value, list) else str(value))
                except argparse.ArgumentTypeError as e:
                    sp.error(f"config key {key!r}: {e}")
            defaults[dest] = value
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if hasattr(args, "seed") and args.seed is None:
        env = os.environ.get("LUCIDCAM_SEED")
        if env is not None:
            try:
                args.seed = seed_int(env)
            except argparse.ArgumentTypeError as e:
                sp.error(f"LUCIDCAM_SEED: {e}")
        else:
            args.seed = 42
    if hasattr(args, "low") and not args.low < args.high:
        sp.error(f"--low must be below --high, got {args.low} >= {args.high}")
    if getattr(args, "command", None) in ("find-lr", "grid-wd") and not args.lr_max > args.lr_min:
        sp.error("--lr-max must exceed --lr-min")
    if args.command == "train" and args.epochs1 + args.epochs2 == 0:
        sp.error("--epochs1 and --epochs2 cannot both be 0")
    return args


# -- helpers --------------------------------------------------------------------

def load_splits(args):
    """(train, valid) from DIR/train + DIR/valid, or a stratified split of DIR."""
    root = args.data
    tdir, vdir = os.path.join(root, "train"), os.path.join(root, "valid")
    if os.path.isdir(tdir) and os.path.isdir(vdir):
        train_set, valid_set = load_dataset_dir(tdir), load_dataset_dir(vdir)
    elif os.path.isfile(os.path.join(root, "labels.csv")):
        train_set, valid_set = stratified_split(load_dataset_dir(root), args.valid_frac, args.seed)
    else:
        raise DataError(f"{root}: no dataset found (expected train/ and valid/ or labels.csv)")
    train_set, dropped_t = filter_outliers(train_set, args.low, args.high)
    valid_set, dropped_v = filter_outliers(valid_set, args.low, args.high)
    log.info("removed %d train / %d valid intensity outliers", len(dropped_t), len(dropped_v))
    if not train_set or not valid_set:
        raise DataError(f"{root}: empty split after outlier filtering")
    return train_set, valid_set


def load_eval_set(args):
    root = args.data
    vdir = os.path.join(root, "valid")
    if os.path.isdir(vdir):
        data = load_dataset_dir(vdir)
    else:
        data = load_dataset_dir(root)
    data, _ = filter_outliers(data, args.low, args.high)
    if not data:
        raise DataError(f"{root}: no samples left after outlier filtering")
    return data


def model_for(train_set, head="gap_linear"):
    mean, std = channel_stats(train_set)
    shape = train_set[0].image.shape
    return small_cam_net(shape, head_kind=head, input_norm=(mean, std))


def _write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _finite_or_none(v):
    return v if math.isfinite(v) else None


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True))


def parse_layer(spec, name):
    convs = spec.conv_ids
    if name == "last-conv":
        return convs[-1]
    if name.startswith("conv") and name[4:].isdigit() and int(name[4:]) < len(convs):
        return convs[int(name[4:])]
    raise ArgumentError(f"--layer must be last-conv or conv0..conv{len(convs) - 1}, got {name!r}")


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args):
    fracs = (args.pos_frac, args.bright_frac, args.dark_frac)
    if sum(fracs) > 1:
        raise ArgumentError("--pos-frac + --bright-frac + --dark-frac must not exceed 1")
    configs = {
        "train": DataGenConfig(args.n_train, args.size, args.pos_frac, args.bright_frac, args.dark_frac, args.seed),
        "valid": DataGenConfig(args.n_valid, args.size, args.pos_frac, args.bright_frac, args.dark_frac,
                               derive_seed(args.seed, 1)),
    }
    os.makedirs(args.out, exist_ok=True)
    summary = {}
    for split, cfg in configs.items():
        samples = generate_dataset(cfg, prefix=f"{split}_", workers=args.workers)
        save_dataset(samples, os.path.join(args.out, split), manifest={"config": asdict(cfg), "split": split})
        summary[split] = {"n": len(samples), "positives": sum(s.label for s in samples)}
    manifest = {"seed": args.seed, "splits": {k: asdict(v) for k, v in configs.items()}}
    _write_text(os.path.join(args.out, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _print_json(summary)


def cmd_find_lr(args):
    train_set, _ = load_splits(args)
    spec = model_for(train_set)
    curve = lr_find(spec, init_params(spec, args.seed), train_set, args.lr_min, args.lr_max, args.iters,
                    args.wd, batch_size=args.batch, seed=args.seed)
    rows = "".join(f"{i},{lr!r},{loss!r}\n" for i, (lr, loss) in enumerate(zip(curve.lrs, curve.losses)))
    _write_text(args.out, "step,lr,smoothed_loss\n" + rows)
    if args.plot:
        pts = [(math.log10(lr), loss) for lr, loss in zip(curve.lrs, curve.losses) if math.isfinite(loss)]
        if len(pts) >= 2:
            write_png(plot_series(pts), args.plot)
    _print_json({"suggested_lr": curve.suggested_lr, "divergence_lr": curve.divergence_lr,
                 "min_loss_lr": curve.min_loss_lr,
                 "stopped_early": curve.stopped_early, "points": len(curve.lrs)})


def cmd_grid_wd(args):
    train_set, _ = load_splits(args)
    spec = model_for(train_set)
    selected, curves = wd_grid_search(spec, init_params(spec, args.seed), train_set, args.wds,
                                      lr_min=args.lr_min, lr_max=args.lr_max, iters=args.iters,
                                      batch_size=args.batch, seed=args.seed)
    report = {"selected_wd": selected, "curves": {
        repr(wd): {"divergence_lr": c.divergence_lr, "min_loss": _finite_or_none(c.min_loss),
                   "suggested_lr": c.suggested_lr, "stopped_early": c.stopped_early,
                   "lrs": c.lrs, "losses": [_finite_or_none(v) for v in c.losses]}
        for wd, c in curves.items()}}
    _write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    _print_json({"selected_wd": selected})


def cmd_train(args):
    train_set, valid_set = load_splits(args)
    spec = model_for(train_set, args.head)
    params = init_params(spec, args.seed)
    config = TrainConfig(args.epochs1, args.epochs2, args.max_lr, args.wd, args.batch, args.seed,
                         augment=not args.no_augment, pct_peak=args.pct_peak)
    tmp_log = None
    on_record = None
    if args.log:
        fd, tmp_log = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(args.log)), prefix=".tmp-",
                                       suffix=".jsonl")
        os.close(fd)
        on_record = lambda rec: append_metrics(rec, tmp_log)  # noqa: E731
    try:
        params, report = train(spec, params, train_set, valid_set, config, on_record=on_record)
        if tmp_log:
            os.replace(tmp_log, args.log)
            tmp_log = None
    finally:
        if tmp_log and os.path.exists(tmp_log):
            os.unlink(tmp_log)
    val_loss, val_acc = report.epochs[-1].val_loss, report.epochs[-1].val_acc
    meta = {"train_config": asdict(config), "val_loss": val_loss, "val_acc": val_acc,
            "n_train": len(train_set), "n_valid": len(valid_set)}
    save_checkpoint(spec, params, meta, args.out, seed=args.seed)
    _print_json({"val_acc": val_acc, "val_loss": val_loss, "steps": len(report.steps)})


def cmd_eval(args):
    spec, params, _ = load_checkpoint(args.model)
    data = load_eval_set(args)
    val_loss, acc = evaluate(spec, params, data, workers=args.workers)
    _print_json({"accuracy": acc, "val_loss": val_loss, "n": len(data)})


def _load_image(path):
    if not os.path.isfile(path):
        raise DataError(f"missing image file {path}")
    return np.ascontiguousarray((read_png(path, "RGB").astype(np.float32) / np.float32(255)).transpose(2, 0, 1))


def cmd_explain(args):
    spec, params, _ = load_checkpoint(args.model)
    image = _load_image(args.image)
    if tuple(image.shape) != spec.input_shape:
        raise DataError(f"{args.image}: size {image.shape} does not match model input {spec.input_shape}")
    layer_id = parse_layer(spec, args.layer)
    logits = predict_logits(spec, params, image[None])[0]
    probs = L.softmax(logits)
    pred = int(np.argmax(logits))
    cls = pred if args.cls == "auto" else int(args.cls)
    heat = grad_cam(spec, params, image, cls, layer_id)
    gray = to_grayscale(image)
    over = overlay(gray, apply_colormap(heat.values), args.alpha)
    if args.panel:
        loss = None if args.label is None else float(L.per_sample_cross_entropy(logits[None], [args.label])[0])
        caption = (pred, args.label, loss, float(probs[pred]))
        tiles = [image_to_rgb(image), gray_to_rgb(gray), over]
        write_png(compose_panel([(t, caption) for t in tiles], columns=3), args.out)
    else:
        write_png(over, args.out)
    _print_json({"predicted": pred, "probability": float(probs[pred]), "class_index": cls,
                 "layer_id": layer_id, "all_zero": heat.all_zero})


def cmd_top_losses(args):
    spec, params, _ = load_checkpoint(args.model)
    data = load_eval_set(args)
    ranked = top_losses(spec, params, data, args.k)
    tiles = []
    for e in ranked:
        img = data[e.index].image
        if args.grad_cam:
            heat = grad_cam(spec, params, img, e.predicted, spec.last_conv)
            tile = overlay(to_grayscale(img), apply_colormap(heat.values), args.alpha)
        else:
            tile = image_to_rgb(img)
        tiles.append((tile, (e.predicted, e.actual, e.loss, e.probability)))
    write_png(compose_panel(tiles, args.columns), args.out)
    _print_json([{"id": e.id, "predicted": e.predicted, "actual": e.actual, "loss": e.loss,
                  "probability": e.probability} for e in ranked])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "find-lr": cmd_find_lr,
    "grid-wd": cmd_grid_wd,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "top-losses": cmd_top_losses,
}


def run_cli(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ArgumentError as e:
        print(f"lucidcam: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"lucidcam: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, OSError) as e:
        print(f"lucidcam: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


def main():
    sys.exit(run_cli())
