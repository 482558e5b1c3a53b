"""Command line entry point: phantom, augment, train, segment, evaluate.

Flag precedence: explicit CLI flags override config-file values, which
override built-in defaults; the effective configuration is echoed verbatim
before work starts. Exit codes: 0 success, 1 usage/config error, 2 data or
format error, 3 numerical failure.

``WMHSEG_THREADS`` caps worker-thread parallelism; it is applied to the
numeric backends before they are loaded, which is why the heavy imports in
this module are deferred into the command handlers.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_TUPLE_KEYS = {"stage_channels", "stage_depths", "reduction_factors",
               "num_heads", "decoder_channels", "input_size", "size",
               "num_lesions_range", "lesion_radius_mm", "spacing"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _apply_thread_cap() -> None:
    cap = os.environ.get("WMHSEG_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _number(raw: str):
    try:
        return int(raw)
    except ValueError:
        return float(raw)


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        return tuple(_number(v) for v in raw.split(","))
    try:
        return _number(raw)
    except ValueError:
        pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def _read_config_file(path) -> dict:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ValueError(f"config line without '=': {line!r}")
            values[key.strip()] = _parse_value(key.strip(), raw)
    return values


def _effective(defaults: dict, config_path, flag_values: dict) -> dict:
    merged = dict(defaults)
    if config_path:
        merged.update(_read_config_file(config_path))
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return merged


def _echo(command: str, cfg: dict) -> None:
    for key in sorted(cfg):
        print(f"config {command}: {key}={cfg[key]}")


def _model_config(cfg: dict):
    from .model import ModelConfig
    keys = ("stage_channels", "stage_depths", "reduction_factors", "num_heads",
            "ffn_expansion", "decoder_channels", "input_size")
    kwargs = {k: cfg[k] for k in keys if k in cfg}
    preset = cfg.get("model", "default")
    if preset == "reduced":
        base = ModelConfig.reduced()
    elif preset == "tiny":
        base = ModelConfig.tiny()
    elif preset == "default":
        base = ModelConfig()
    else:
        raise ValueError(f"unknown model preset '{preset}'")
    if kwargs:
        from dataclasses import asdict
        merged = asdict(base)
        merged.update(kwargs)
        return ModelConfig(**merged)
    return base


# ---- subcommands -------------------------------------------------------------


def cmd_phantom(args) -> int:
    from .phantom import PhantomConfig, generate_dataset
    base = PhantomConfig()
    defaults = {"n": 10, "seed": 0, "size": base.size,
                "num_lesions_range": base.num_lesions_range,
                "lesion_radius_mm": base.lesion_radius_mm,
                "spacing": base.spacing}
    cfg = _effective(defaults, args.config,
                     {"n": args.n, "seed": args.seed, "size": args.size})
    _echo("phantom", cfg)
    pc = PhantomConfig(size=tuple(cfg["size"]),
                       num_lesions_range=tuple(cfg["num_lesions_range"]),
                       lesion_radius_mm=tuple(cfg["lesion_radius_mm"]),
                       spacing=tuple(cfg["spacing"]))
    entries = generate_dataset(cfg["n"], cfg["seed"], args.out, config=pc)
    print(f"wrote {len(entries)} manifest rows to "
          f"{Path(args.out) / 'manifest.csv'}")
    return EXIT_OK


def cmd_augment(args) -> int:
    from .artifacts import (KINDS, apply_artifact, read_sidecar, sample_spec,
                            write_sidecar)
    from .nifti import read_nifti, write_nifti
    if args.replay:
        spec = read_sidecar(args.replay)
    else:
        if args.kind not in KINDS:
            print(f"error: invalid kind '{args.kind}'; valid kinds: "
                  f"{', '.join(KINDS)}", file=sys.stderr)
            return EXIT_USAGE
        spec = sample_spec(args.kind, args.seed)
    _echo("augment", {"kind": spec.kind, "seed": spec.seed,
                      "in": args.in_path, "out": args.out})
    vol = read_nifti(args.in_path)
    write_nifti(apply_artifact(vol, spec), args.out)
    write_sidecar(str(args.out) + ".spec", spec)
    print(f"wrote {args.out} (+ sidecar {args.out}.spec)")
    return EXIT_OK


_TRAIN_KEYS = ("lr", "batch_size", "epochs", "plateau_patience",
               "plateau_factor", "min_lr", "split_ratio", "seed", "beta1",
               "beta2", "adam_eps", "checkpoint_every", "include_artifacts",
               "normalization_scope")


def cmd_train(args) -> int:
    from dataclasses import asdict
    from .training import TrainConfig, train
    defaults = dict(asdict(TrainConfig()), model="default")
    flags = {"lr": args.lr, "batch_size": args.batch_size,
             "epochs": args.epochs, "seed": args.seed,
             "split_ratio": args.split_ratio, "model": args.model,
             "include_artifacts": False if args.no_artifacts else None}
    cfg = _effective(defaults, args.config, flags)
    _echo("train", cfg)
    train_cfg = TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS})
    result = train(train_cfg, _model_config(cfg), args.manifest, args.out,
                   resume=args.resume)
    last = result.history[-1]
    print(f"finished epoch {last['epoch']}: train {last['train_loss']:.4f} "
          f"val {last['val_loss']:.4f}")
    print(f"best checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def cmd_segment(args) -> int:
    # intentionally no preprocessing or hyperparameter flags: inference
    # consumes the raw volume and the checkpoint alone
    from .model import load_checkpoint
    from .nifti import read_nifti, write_nifti
    from .training import infer_volume
    _echo("segment", {"checkpoint": args.checkpoint, "in": args.in_path,
                      "out": args.out})
    params, model_cfg = load_checkpoint(args.checkpoint)
    vol = read_nifti(args.in_path)
    mask = infer_volume(params, model_cfg, vol)
    write_nifti(vol.with_data(mask), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .phantom import manifest_dir, read_manifest
    from .training import evaluate, split_dataset
    _echo("evaluate", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                       "out": args.out, "split": args.split,
                       "split_seed": args.split_seed,
                       "split_ratio": args.split_ratio})
    entries = read_manifest(args.manifest)
    if args.split != "all":
        train_src, test_src = split_dataset(entries, args.split_ratio,
                                            args.split_seed)
        keep = set(train_src if args.split == "train" else test_src)
        entries = [e for e in entries if e.source_id in keep]
    metrics, summary = evaluate(args.checkpoint, entries,
                                manifest_dir(args.manifest), out_csv=args.out,
                                per_slice=args.per_slice)
    for kind, mean in summary["mean_dice_by_kind"].items():
        drop = summary["dice_drop_vs_clean"].get(kind)
        extra = "" if drop is None else f" (drop vs clean {drop:+.4f})"
        print(f"kind {kind}: mean dice {mean:.4f}{extra}")
    print(f"wrote {len(metrics)} rows to {args.out}")
    return EXIT_OK


# ---- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="wmhseg",
                     description="White matter hyperintensity segmentation "
                                 "pipeline: phantoms, artifacts, training, "
                                 "inference, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("-n", type=int, default=None, help="number of phantoms")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=lambda s: tuple(int(v) for v in s.split(",")),
                   default=None, metavar="X,Y,Z")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("augment", help="apply one artifact to a volume")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--kind", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replay", default=None,
                   help="reproduce a corruption from its sidecar spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train on a manifest dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split-ratio", type=float, default=None)
    p.add_argument("--model", choices=("default", "reduced", "tiny"),
                   default=None)
    p.add_argument("--no-artifacts", action="store_true",
                   help="train on clean scans only (augmentation ablation)")
    p.add_argument("--resume", default=None, metavar="CKPT")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one volume with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--per-slice", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except BrokenPipeError:
        return EXIT_OK
    except Exception as exc:  # map package errors onto documented exit codes
        from .errors import (ConfigError, DataFormatError, NumericsError,
                             UsageError, ValidationError)
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, (ConfigError, UsageError, ValueError)) \
                and not isinstance(exc, (DataFormatError, ValidationError)):
            return EXIT_USAGE
        if isinstance(exc, NumericsError):
            return EXIT_NUMERIC
        if isinstance(exc, (DataFormatError, ValidationError, OSError)):
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
