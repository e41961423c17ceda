"""Command line entry point: ``gla synth|train|explain|ablate|eval``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .anchors import DEFAULT_PROMPTS, UNRELATED_PROMPTS
from .errors import (CheckpointVersionError, ConditioningError, ConfigurationError, DegenerateProjectionError,
                     FrameLoadError, NumericalError, StructuralError, ValidationError)
from .frames import DatasetManifest
from .gradcam import DEFAULT_N_PERTURB, DEFAULT_QUANTILE, DEFAULT_SIGMA
from .reports import TARGET_MODES, explain, run_ablation
from .rf_synth import generate_dataset
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("gla")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _resolution(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", " ").replace(",", " ").split()
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use 64 or 64x64") from None
    if len(vals) == 1:
        vals *= 2
    if len(vals) != 2 or min(vals) < 8:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use 64 or 64x64 (at least 8)")
    return vals[0], vals[1]


def _env_seed() -> int | None:
    raw = os.environ.get("GLA_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GLA_SEED must be an integer, got {raw!r}") from None


def _pick_seed(flag: int | None, fallback: int) -> int:
    """Explicit --seed beats GLA_SEED, which beats the config/default seed."""
    if flag is not None:
        return flag
    env = _env_seed()
    if env is not None:
        log.warning("GLA_SEED=%d overrides seed %d", env, fallback)
        return env
    return fallback


def _config_from_args(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(base, dict):
            raise UsageError("config file must hold a JSON object of TrainConfig fields")
    flags = {
        "max_epochs": getattr(args, "max_epochs", None), "patience": getattr(args, "patience", None),
        "batch_size": getattr(args, "batch_size", None), "learning_rate": getattr(args, "lr", None),
        "lambda_r": getattr(args, "lambda_r", None), "lambda_a": getattr(args, "lambda_a", None),
        "lambda_k": getattr(args, "lambda_k", None), "anchor_provider": getattr(args, "anchor_provider", None),
        "embeddings_path": getattr(args, "embeddings", None),
    }
    if getattr(args, "prompts", None):
        flags["prompts"] = tuple(args.prompts)
    if getattr(args, "freeze_tau", False):
        flags["freeze_tau"] = True
    try:
        cfg = TrainConfig.from_dict({**TrainConfig().to_dict(), **base})
        cfg = cfg.with_overrides(**flags)
        return cfg.with_overrides(seed=_pick_seed(getattr(args, "seed", None), cfg.seed))
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def _load_manifest(path) -> DatasetManifest:
    return DatasetManifest.load_file(path)


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.n_empty < 0 or args.n_person < 0:
        raise UsageError("--n-empty and --n-person must be >= 0")
    mode = {"signal": "signal_chain", "image": "image_level"}[args.mode]
    seed = _pick_seed(args.seed, 0)
    m = generate_dataset(args.n_empty, args.n_person, mode=mode, seed=seed, out_dir=args.out,
                         resolution=args.resolution)
    counts = m.label_counts()
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    print(f"frames: {len(m.entries)} (empty {counts['empty']}, person {counts['person']}), mode {mode}, seed {seed}")
    return EXIT_OK


def _print_epoch(row: dict) -> None:
    print(f"{row['epoch']:>5} {row['train_total']:>11.5f} {row['train_recon']:>11.5f} {row['train_align']:>11.5f} "
          f"{row['train_kld']:>11.4f} {row['val_total']:>11.5f} {row['val_accuracy']:>8.3f}"
          f"{'  *' if row.get('best') else ''}", flush=True)


EPOCH_HEADER = (f"{'epoch':>5} {'train_L':>11} {'recon':>11} {'align':>11} {'kld':>11} {'val_L':>11} "
                f"{'val_acc':>8}")


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    manifest = _load_manifest(args.manifest)
    print(EPOCH_HEADER)
    ckpt = train(cfg, manifest, on_epoch=_print_epoch)
    path = save_checkpoint(ckpt, args.out)
    print(f"best epoch {ckpt.epoch}, best val loss {ckpt.best_val_loss:.6f}")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    res = evaluate(ckpt, manifest, tuple(args.split))
    summary = {**res.summary(), "splits": list(args.split)}
    text = json.dumps(summary, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_explain(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    target = args.target_class or "predicted"
    seed = _pick_seed(args.seed, ckpt.config.seed)
    res = explain(ckpt, manifest, frame_ids=args.frames, splits=tuple(args.split), target=target,
                  n=args.n_perturb, sigma=args.sigma, quantile=args.quantile, seed=seed, out_dir=args.out,
                  render=not args.no_figures)
    print(json.dumps(res.summary, indent=2, sort_keys=True))
    print(f"rows: {res.csv_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    manifest = _load_manifest(args.manifest)
    baseline = load_checkpoint(args.baseline) if args.baseline else None
    cfg = None if baseline else _config_from_args(args)
    prompts = tuple(args.ablation_prompts) if args.ablation_prompts else UNRELATED_PROMPTS
    print(EPOCH_HEADER)
    report = run_ablation(manifest, cfg, baseline, prompts, args.frozen_backbone, tuple(args.split),
                          args.n_perturb, args.sigma, args.quantile, out_dir=args.out, on_epoch=_print_epoch)
    print(report.summary_text())
    print(f"report: {Path(args.out) / 'ablation.json'}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _add_train_flags(p) -> None:
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-r", type=float)
    p.add_argument("--lambda-a", type=float)
    p.add_argument("--lambda-k", type=float)
    p.add_argument("--prompts", nargs=2, metavar=("EMPTY", "PERSON"),
                   help=f"anchor prompts (default: {list(DEFAULT_PROMPTS)})")
    p.add_argument("--anchor-provider", choices=("stub", "external"))
    p.add_argument("--embeddings", help="JSON file mapping prompt strings to vectors")
    p.add_argument("--freeze-tau", action="store_true")


def _add_cam_flags(p) -> None:
    p.add_argument("--n-perturb", type=int, default=DEFAULT_N_PERTURB)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--quantile", type=float, default=DEFAULT_QUANTILE)
    p.add_argument("--split", nargs="+", choices=("train", "val", "test"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gla", description="Radar presence detection with text-anchored VAE latents.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic RA dataset")
    p.add_argument("--n-empty", type=int, required=True)
    p.add_argument("--n-person", type=int, required=True)
    p.add_argument("--mode", choices=("signal", "image"), default="image")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=_resolution, help="frame size, e.g. 64 or 64x64 (default: RA grid)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the VAE and alignment head")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="alignment accuracy and mean losses on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", nargs="+", choices=("train", "val", "test"), default=["test"])
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="latent Grad-CAM figures and metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--frames", nargs="+", help="frame ids (default: the chosen splits)")
    p.add_argument("--target-class", choices=TARGET_MODES,
                   help="class to explain; default is the predicted class")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    _add_cam_flags(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="retrain with unrelated prompts and compare CAM metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--baseline", help="reuse this baseline checkpoint instead of training one")
    p.add_argument("--ablation-prompts", nargs=2, metavar=("P0", "P1"))
    p.add_argument("--frozen-backbone", action="store_true", help="keep the baseline VAE, retrain only the head")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_cam_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


_DEFAULT_SPLITS = {"explain": ["test"], "ablate": ["val", "test"]}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "split", "unset") is None:
            args.split = _DEFAULT_SPLITS[args.command]
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ConditioningError, DegenerateProjectionError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FrameLoadError, CheckpointVersionError, ConfigurationError, ValidationError, StructuralError,
            KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
