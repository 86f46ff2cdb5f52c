"""Command-line entry point: synth, train, eval, ablate, predict, maskvis.

Configuration precedence is defaults < config file < flags; the effective
configuration is echoed into every output directory.  The config file is
plain text, one `key = value` per line, keys matching flag names with
underscores (e.g. `width_multiplier = 0.125`).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError, restore_network
from .core import GridError, Mask
from .data import (
    SynthParams,
    generate_corpus,
    load_sample,
    load_split,
    read_manifest,
)
from .maskgen import build_pyramid, generate_mask, stage_shapes
from .metrics import ConfusionMatrix, format_table
from .network import VARIANT_ROWS, AblationSpec, parameter_count
from .train import TrainConfig, TrainingDiverged, apply_strict_mode, evaluate, train

CLASS_COLORS = np.array([[0, 0, 0], [0, 200, 0], [220, 40, 40]], dtype=np.uint8)


# ---------------------------------------------------------------------------
# argument plumbing

def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from None


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_COERCERS = {"hw": _hw, "floats": _floats, "bool": _bool, "int": int, "float": float, "str": str}


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """Build the CLI; with `suppress`, only explicitly passed flags appear."""

    def dflt(value):
        return argparse.SUPPRESS if suppress else value

    parser = argparse.ArgumentParser(prog="amfnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=dflt(None), help="key = value config file")
        p.add_argument("--seed", type=int, default=dflt(0))

    p = sub.add_parser("synth", help="write a synthetic corpus in dataset layout")
    add_common(p)
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--count", type=int, default=dflt(32))
    p.add_argument("--resolution", type=_hw, default=dflt((96, 128)))
    p.add_argument("--invalid-fraction", type=float, default=dflt(0.0), dest="invalid_fraction")
    p.add_argument("--road-fraction", type=float, default=dflt(0.5), dest="road_fraction")
    p.add_argument("--obstacles", type=int, default=dflt(2))
    p.add_argument("--noise", type=float, default=dflt(0.04))
    p.add_argument("--ratios", type=_floats, default=dflt((0.5, 0.25, 0.25)))

    def add_train_flags(p):
        p.add_argument("--variant", default=dflt("J"), help="row letter A..J or 5-char stage string")
        p.add_argument("--width", type=float, default=dflt(0.125), dest="width_multiplier")
        p.add_argument("--epochs", type=int, default=dflt(30))
        p.add_argument("--batch", type=int, default=dflt(4), dest="batch_size")
        p.add_argument("--lr", type=float, default=dflt(0.01), dest="initial_lr")
        p.add_argument("--momentum", type=float, default=dflt(0.9))
        p.add_argument("--decay", type=float, default=dflt(0.95))
        p.add_argument("--resolution", type=_hw, default=dflt((96, 128)))
        p.add_argument("--class-weights", type=_floats, default=dflt((1.0, 1.0, 1.0)), dest="class_weights")
        p.add_argument("--depth-divisor", type=float, default=dflt(None), dest="depth_divisor")
        p.add_argument("--no-mhsa", action="store_true", default=dflt(False), dest="no_mhsa")
        p.add_argument("--augment", action="store_true", default=dflt(False))
        p.add_argument("--strict", action="store_true", default=dflt(False))

    p = sub.add_parser("train", help="train one variant on a corpus")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir", required=True, dest="run_dir")
    p.add_argument("--resume", default=dflt(None), help="checkpoint to continue from")
    add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the label oracle) on a split")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default=dflt("test"))
    p.add_argument("--checkpoint", default=dflt(None))
    p.add_argument("--run-dir", required=True, dest="run_dir")
    p.add_argument("--oracle", action="store_true", default=dflt(False),
                   help="feed ground-truth labels back as predictions")
    p.add_argument("--strict", action="store_true", default=dflt(False))

    p = sub.add_parser("ablate", help="train and evaluate every stage-fusion variant")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir", required=True, dest="run_dir")
    add_train_flags(p)

    p = sub.add_parser("predict", help="write the predicted label map and an overlay image")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", required=True, dest="sample_id")
    p.add_argument("--out", required=True)

    p = sub.add_parser("maskvis", help="render validity masks; with a checkpoint, dump fusion weights")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--id", required=True, dest="sample_id")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=dflt(None))

    return parser


def load_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise GridError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise GridError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def merge_config(args: argparse.Namespace, explicit: set[str]) -> argparse.Namespace:
    """Apply config-file values under any flag not explicitly given."""
    if not getattr(args, "config", None):
        return args
    known = vars(args)
    for key, raw in load_config_file(args.config).items():
        if key not in known:
            raise GridError(f"unknown config key {key!r}")
        if key in explicit:
            continue
        current = known[key]
        if isinstance(current, bool):
            value = _bool(raw)
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        elif isinstance(current, tuple) and current and isinstance(current[0], int):
            value = _hw(raw)
        elif isinstance(current, tuple):
            value = _floats(raw)
        else:
            value = raw
        setattr(args, key, value)
    return args


def echo_config(args: argparse.Namespace, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in sorted(vars(args).items()):
        if key in ("command", "config"):
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands

def _train_config(args) -> TrainConfig:
    return TrainConfig(
        initial_lr=args.initial_lr,
        momentum=args.momentum,
        decay=args.decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        input_resolution=args.resolution,
        width_multiplier=args.width_multiplier,
        variant=AblationSpec.parse(args.variant),
        class_weights=args.class_weights,
        depth_divisor=args.depth_divisor,
        use_mhsa_stage5=not args.no_mhsa,
        augment=args.augment,
        strict=args.strict,
    )


def cmd_synth(args) -> int:
    params = SynthParams(
        resolution=args.resolution,
        invalid_fraction=args.invalid_fraction,
        road_fraction=args.road_fraction,
        obstacle_count=args.obstacles,
        noise_level=args.noise,
        seed=args.seed,
    )
    out = Path(args.out)
    splits = generate_corpus(out, args.count, params, ratios=args.ratios)
    echo_config(args, out)
    print(f"wrote {args.count} samples to {out} "
          f"(train {len(splits['train'])} / val {len(splits['val'])} / test {len(splits['test'])})")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    run_dir = Path(args.run_dir)
    train_samples = load_split(args.data, "train")
    val_samples = load_split(args.data, "val")
    echo_config(args, run_dir)
    result = train(train_samples, val_samples, config, run_dir, resume=args.resume)
    last = result.log[-1]
    print(f"finished epoch {last.epoch}: loss {last.train_loss:.4f}, val mIoU {100 * last.val_mIoU:.2f}%")
    print(f"best checkpoint (epoch {result.best_epoch}): {result.best_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    if args.strict:
        apply_strict_mode(args.seed)
    samples = load_split(args.data, args.split)
    run_dir = Path(args.run_dir)
    if args.oracle:
        conf = ConfusionMatrix()
        for s in samples:
            conf.add(s.label.data, s.label.data)
        report = conf.compute()
    else:
        if not args.checkpoint:
            raise GridError("eval needs --checkpoint (or --oracle)")
        net, _, _ = restore_network(args.checkpoint)
        report = evaluate(net, samples)
    echo_config(args, run_dir)
    table = format_table(report)
    (run_dir / "metrics.txt").write_text(table + "\n")
    (run_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(table)
    return 0


def cmd_ablate(args) -> int:
    run_dir = Path(args.run_dir)
    train_samples = load_split(args.data, "train")
    val_samples = load_split(args.data, "val")
    echo_config(args, run_dir)
    rows = []
    for row in VARIANT_ROWS:
        row_args = argparse.Namespace(**vars(args))
        row_args.variant = row
        config = _train_config(row_args)
        result = train(train_samples, val_samples, config, run_dir / f"variant_{row}")
        net, _, _ = restore_network(result.best_checkpoint)
        report = evaluate(net, val_samples)
        rows.append({
            "row": row,
            "stages": AblationSpec.from_row(row).to_string(),
            "parameters": parameter_count(net),
            "mAcc": report.macc,
            "mIoU": report.miou,
            "mF1": report.mf1,
        })
        print(f"variant {row} ({rows[-1]['stages']}): mIoU {100 * report.miou:.2f}%")
    header = f"{'No.':<5}{'stages':<8}{'params':>10}{'mAcc':>8}{'mIoU':>8}{'mF1':>8}"
    lines = [header] + [
        f"({r['row']})  {r['stages']:<8}{r['parameters']:>10}"
        f"{100 * r['mAcc']:8.2f}{100 * r['mIoU']:8.2f}{100 * r['mF1']:8.2f}"
        for r in rows
    ]
    (run_dir / "ablation.txt").write_text("\n".join(lines) + "\n")
    (run_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print("\n".join(lines))
    return 0


def _save_gray(path: Path, values: np.ndarray) -> None:
    Image.fromarray(values.astype(np.uint8), mode="L").save(path)


def cmd_predict(args) -> int:
    net, _, _ = restore_network(args.checkpoint)
    sample = load_sample(args.data, args.sample_id)
    from .data import collate

    rgb, depth, _ = collate([sample])
    net.eval()
    import torch

    with torch.no_grad():
        pred = net(rgb, depth).argmax(dim=1)[0].numpy().astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_gray(out / f"{args.sample_id}_pred.png", pred)
    base = (sample.rgb.data.transpose(1, 2, 0) * 255).astype(np.float32)
    overlay = (0.5 * base + 0.5 * CLASS_COLORS[pred]).astype(np.uint8)
    Image.fromarray(overlay, mode="RGB").save(out / f"{args.sample_id}_overlay.png")
    print(f"wrote {out / f'{args.sample_id}_overlay.png'}")
    return 0


def cmd_maskvis(args) -> int:
    sample = load_sample(args.data, args.sample_id)
    mask = generate_mask(sample.depth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_gray(out / f"{args.sample_id}_mask.png", mask.data * 255)
    pyramid = build_pyramid(mask, stage_shapes(mask.shape))
    for n, level in enumerate(pyramid.levels, 1):
        _save_gray(out / f"{args.sample_id}_mask_m{n}.png", level.data * 255)
    if args.checkpoint:
        import torch

        from .data import collate

        net, _, _ = restore_network(args.checkpoint)
        net.eval()
        rgb, depth, _ = collate([sample])
        record: dict = {}
        with torch.no_grad():
            net(rgb, depth, record=record)
        lines = []
        for n in range(1, 6):
            stage = record[f"stage{n}"]
            if "w_rgb" in stage:
                lines.append(
                    f"stage={n} fusion=adaptive "
                    f"w_rgb={float(stage['w_rgb'][0]):.6f} w_depth={float(stage['w_depth'][0]):.6f} "
                    f"m_depth_mean={stage['m_depth_mean']:.6f} "
                    f"m_depth_min={stage['m_depth_min']:.6f} m_depth_max={stage['m_depth_max']:.6f}"
                )
            else:
                lines.append(f"stage={n} fusion=addition")
        (out / f"{args.sample_id}_weights.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    print(f"wrote mask images to {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
    "maskvis": cmd_maskvis,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser(suppress=False)
    args = parser.parse_args(argv)
    explicit = set(vars(build_parser(suppress=True).parse_args(argv)))
    try:
        args = merge_config(args, explicit)
        start = time.time()
        code = COMMANDS[args.command](args)
        print(f"[{args.command}] done in {time.time() - start:.1f}s")
        return code
    except (GridError, CheckpointError, TrainingDiverged, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
