"""Command line entry point: ``vicregl <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import TrainConfig, apply_overrides, dump_config, load_config
from .data import ShapesConfig, gen_shapes, read_dataset, render_shapes
from .eval import ProbeConfig, linear_probe_classify, linear_probe_segment
from .geometry import CropRect, ViewSampler
from .model import config_hash, load_checkpoint, model_from_config
from .trainer import pretrain
from .verify import run_suite
from .viz import compute_panels, save_visualization

logger = logging.getLogger("vicregl")


class UsageError(Exception):
    pass


def _parse_set(items: List[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _lrs(text: str):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--lrs expects comma separated numbers, got {text!r}")
    if not values or any(v <= 0 for v in values):
        raise UsageError("--lrs values must be positive")
    return values


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.size < 8:
        raise UsageError("--size must be >= 8")
    out = Path(args.out)
    if args.out_dir:
        out = Path(args.out_dir) / out
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg = ShapesConfig(canvas_size=args.size, seed=args.seed)
    gen_shapes(cfg, args.n, out)
    print(f"wrote {args.n} samples to {out}")
    return 0


def resolve_train_config(args) -> TrainConfig:
    """File values first, then ``--set`` overrides, then dedicated flags."""
    overrides = _parse_set(args.set or [])
    flags = {"loss.alpha": args.alpha, "loss.gamma_large": args.gamma1,
             "loss.gamma_small": args.gamma2, "multicrop.enabled": args.multicrop,
             "epochs": args.epochs, "seed": args.seed, "batch_size": args.batch_size}
    overrides.update({k: v for k, v in flags.items() if v is not None})
    try:
        return load_config(args.config, overrides)
    except (KeyError, ValueError, TypeError) as e:
        raise UsageError(str(e))


def cmd_pretrain(args) -> int:
    if args.config is not None and not Path(args.config).exists():
        raise UsageError(f"config file not found: {args.config}")
    cfg = resolve_train_config(args)
    out_dir = Path(args.out_dir)
    if args.data is not None:
        dataset = read_dataset(args.data)
        cfg.data.path = str(args.data)
    elif cfg.data.path:
        dataset = read_dataset(cfg.data.path)
    else:
        dataset = render_shapes(ShapesConfig(canvas_size=cfg.data.canvas_size, seed=cfg.data.seed),
                                cfg.data.n_samples)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    ckpt, history = pretrain(cfg, dataset, out_dir, resume=not args.no_resume)
    last = history[-1] if history else {}
    print(f"trained to step {ckpt.step}; final total loss {last.get('total', float('nan')):.4f}, "
          f"std_min {last.get('std_min', float('nan')):.3f}")
    return 0


def load_trained(checkpoint: str, config: Optional[str] = None):
    """Rebuild a model from a checkpoint and the run's ``config.yaml``."""
    path = Path(checkpoint)
    ckpt = load_checkpoint(path)
    cfg_path = Path(config) if config else path.parent.parent / "config.yaml"
    if not cfg_path.exists():
        raise FileNotFoundError(f"run config not found: {cfg_path} (pass --config)")
    cfg = load_config(cfg_path)
    if config_hash(cfg.to_dict()) != ckpt.config_hash:
        logger.warning("config %s does not match the checkpoint's config hash", cfg_path)
    model = model_from_config(cfg.to_dict())
    ckpt.load_into(model)
    return model.eval(), cfg


def _probe(args, fn, name: str) -> int:
    model, _ = load_trained(args.checkpoint, args.config)
    dataset = read_dataset(args.data)
    test = read_dataset(args.test_data) if args.test_data else None
    pcfg = ProbeConfig(lrs=_lrs(args.lrs), epochs=args.epochs, holdout=args.holdout,
                       multi_stage=getattr(args, "multi_stage", False), seed=args.seed)
    result = fn(model, dataset, pcfg, test=test)
    if not result.config["frozen"]:
        raise RuntimeError("backbone was not frozen during probing")
    record = result.to_dict()
    record.update({"checkpoint": str(args.checkpoint), "data": str(args.data)})
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / f"{name}.json", record)
    for lr, value in record["config"]["sweep"].items():
        print(f"lr {lr}: {result.metric} {value:.4f}")
    print(f"best lr {result.config['best_lr']}: {result.metric} {result.value:.4f}")
    return 0


def cmd_eval_cls(args) -> int:
    return _probe(args, linear_probe_classify, "eval_cls")


def cmd_eval_seg(args) -> int:
    return _probe(args, linear_probe_segment, "eval_seg")


def cmd_visualize(args) -> int:
    if Path(args.out).suffix.lower() not in (".png", ".svg"):
        raise UsageError("--out must end in .png or .svg")
    if args.gamma < 1:
        raise UsageError("--gamma must be >= 1")
    model, cfg = load_trained(args.checkpoint, args.config)
    dataset = read_dataset(args.data)
    if not 0 <= args.index < len(dataset):
        raise UsageError(f"--index must lie in [0, {len(dataset)})")
    pixels = dataset.images[args.index].astype(np.float64)
    h, w = pixels.shape[1:]
    size = cfg.multicrop.large_size
    if args.identical:
        crop = CropRect(0.0, 0.0, float(w), float(h), False, size, size)
        crops = [crop, crop]
    else:
        sampler = ViewSampler(large_size=(size, size), area_range=cfg.multicrop.area_range,
                              aspect_range=cfg.multicrop.aspect_range, flip_prob=cfg.multicrop.flip_prob)
        crops = list(sampler.sample(np.random.default_rng(args.seed), (h, w)))
    panels = compute_panels(model, pixels, crops, args.gamma)
    out = Path(args.out)
    if args.out_dir:
        out = Path(args.out_dir) / out
    out.parent.mkdir(parents=True, exist_ok=True)
    save_visualization(out, pixels, crops, panels)
    print(f"wrote {out} ({', '.join(f'{p.title}: {len(p.matches)} matches' for p in panels)})")
    return 0


def cmd_verify(args) -> int:
    results = run_suite(args.filter)
    if not results:
        raise UsageError(f"no checks match filter {args.filter!r}")
    for r in results:
        print(r.line(), flush=True)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# -- parser ----------------------------------------------------------------------

def _probe_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="labeled dataset (VDSB file or PNG directory)")
    p.add_argument("--test-data", help="held-out dataset; default holds out the tail of --data")
    p.add_argument("--config", help="run config (default: config.yaml of the checkpoint's run)")
    p.add_argument("--out-dir", default="eval")
    p.add_argument("--lrs", default="1.0,0.3,0.1,0.03")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--holdout", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vicregl", description="Self-supervised pretraining with local and global criteria.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--data", help="dataset file; default generates shapes in memory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="YAML config; flags take precedence over its values")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma1", type=int, help="matches kept between the large views")
    p.add_argument("--gamma2", type=int, help="matches kept for pairs with a small view")
    p.add_argument("--multicrop", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. loss.use_feature=false")
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("eval-cls", help="linear classification probe on a frozen checkpoint")
    _probe_flags(p)
    p.set_defaults(fn=cmd_eval_cls)

    p = sub.add_parser("eval-seg", help="linear segmentation probe on a frozen checkpoint")
    _probe_flags(p)
    p.add_argument("--multi-stage", action="store_true", help="concatenate all stage outputs")
    p.set_defaults(fn=cmd_eval_seg)

    p = sub.add_parser("visualize-matches", help="draw the best local matches between two views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True, help="output .png or .svg")
    p.add_argument("--out-dir")
    p.add_argument("--gamma", type=int, default=10)
    p.add_argument("--identical", action="store_true", help="use the full image for both views")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("verify", help="run gradient, matching, loss and geometry checks")
    p.add_argument("--filter", help="run only checks whose name contains, or group equals, this")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure: report and exit 1
        print(f"{parser.prog} {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
