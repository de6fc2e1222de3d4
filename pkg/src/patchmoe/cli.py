"""Command-line entry point: ``patchmoe <command> [options]``.

Exit codes: 0 success, 1 internal or check failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

from . import tensor as T
from .container import ContainerError
from .harness import data as D
from .harness.cost import count_cost
from .harness.gradcheck import SCOPES, gradcheck
from .harness.train import TrainSettings, evaluate_model, train
from .scan_order import (
    PatchScheme,
    SchemeParseError,
    is_bijection,
    locality_csv,
    locality_profile,
    format_permutation,
    parse_patch_scheme,
    patch_contiguous,
    scan_order,
)
from .segnet import NetworkConfig, PatchMoENet, load_checkpoint, to_container

log = logging.getLogger("patchmoe")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad command-line or config-file input (exit code 2)."""


@dataclass
class RunConfig:
    command: str = ""
    scheme: str = "8844/1111/1111/1111"
    channels: tuple = (16, 32, 64, 128)
    size: tuple = (64, 64)
    seed: int = 0
    epochs: int = 60
    out: Optional[str] = None
    precision: str = "f64"
    no_concat_expert: bool = False
    no_residual: bool = False
    no_moe: bool = False
    raster_only: bool = False
    state_dim: int = 8
    sdi_channels: int = 16
    blocks: int = 1
    batch_size: int = 8
    train_size: int = 200
    val_size: int = 50
    data: Optional[str] = None

    def network_config(self) -> NetworkConfig:
        scheme = parse_patch_scheme(self.scheme)
        if len(scheme.stages) != len(self.channels):
            raise T.ConfigurationError(
                f"scheme {self.scheme} has {len(scheme.stages)} stages but {len(self.channels)} channel widths given")
        if self.raster_only:
            scheme = PatchScheme.raster(len(self.channels))
        return NetworkConfig(
            stage_channels=self.channels,
            blocks_per_stage=self.blocks,
            patch_scheme=scheme,
            sdi_channels=self.sdi_channels,
            input_size=self.size,
            state_dim=self.state_dim,
            use_moe=not self.no_moe,
            use_concat=not self.no_concat_expert,
            use_residual=not self.no_residual,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed)


# ---------------------------------------------------------------- value parsing


def _size(text: str) -> tuple:
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.isdigit() and int(p) > 0 for p in parts):
        raise UsageError(f"size must look like 64x64, got {text!r}")
    return int(parts[0]), int(parts[1])


def _channels(text: str) -> tuple:
    try:
        chans = tuple(int(c) for c in text.split(","))
    except ValueError:
        raise UsageError(f"channels must be comma-separated integers, got {text!r}") from None
    if not chans or min(chans) < 1:
        raise UsageError(f"channels must be positive, got {text!r}")
    return chans


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise UsageError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise UsageError(f"expected a positive integer, got {text!r}")
    return v


def _nonneg(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise UsageError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise UsageError(f"expected a non-negative integer, got {text!r}")
    return v


def _flag(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _precision(text: str) -> str:
    if text not in ("f32", "f64"):
        raise UsageError(f"precision must be f32 or f64, got {text!r}")
    return text


_CONVERTERS = {
    "scheme": str,
    "channels": _channels,
    "size": _size,
    "seed": _nonneg,
    "epochs": _positive,
    "out": str,
    "precision": _precision,
    "no_concat_expert": _flag,
    "no_residual": _flag,
    "no_moe": _flag,
    "raster_only": _flag,
    "state_dim": _positive,
    "sdi_channels": _positive,
    "blocks": _positive,
    "batch_size": _positive,
    "train_size": _positive,
    "val_size": _positive,
    "data": str,
}


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines (``#`` comments); keys match the long flags with underscores."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        if key not in _CONVERTERS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _CONVERTERS[key](value.strip())
    return values


def _all_ones(scheme: str) -> bool:
    return all(p == 1 for stage in parse_patch_scheme(scheme).stages for p in stage)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    known = {f.name for f in fields(RunConfig)} - {"command"}
    flags = {k: v for k, v in vars(args).items() if k in known and v is not None and v is not False}
    cfg = replace(RunConfig(command=args.command), **{**file_values, **flags})
    scheme_given = "scheme" in flags or "scheme" in file_values
    if cfg.raster_only and scheme_given and not _all_ones(cfg.scheme):
        raise UsageError(f"--raster-only conflicts with patch scheme {cfg.scheme}")
    if _all_ones(cfg.scheme):
        cfg = replace(cfg, raster_only=True)
    return cfg


# ---------------------------------------------------------------- commands


def _out_dir(cfg: RunConfig) -> Optional[Path]:
    if cfg.out is None:
        return None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_scan(args, cfg: RunConfig) -> int:
    if args.height < 1 or args.width < 1:
        raise T.ConfigurationError(f"grid must be at least 1x1, got {args.height}x{args.width}")
    order = scan_order(args.height, args.width, args.patch, args.direction)
    contiguous = patch_contiguous(order)
    bijective = is_bijection(order)
    profile = locality_profile(order)
    perm = format_permutation(order)
    csv_text = locality_csv(profile)
    print(f"# scan {args.height}x{args.width} patch={args.patch} direction={order.direction.value}")
    print(perm)
    print(f"# bijection: {'ok' if bijective else 'FAILED'}")
    print(f"# patch contiguity: {'ok' if contiguous else 'FAILED'}")
    print(f"# mean neighbour distance: {profile.mean:.6f}")
    sys.stdout.write(csv_text)
    out = _out_dir(cfg)
    if out is not None:
        (out / "permutation.txt").write_text(perm + "\n")
        (out / "locality.csv").write_text(csv_text)
    return EXIT_OK if contiguous and bijective else EXIT_FAILURE


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    ok = True
    for scope in scopes:
        report = gradcheck(scope, trials=args.trials, seed=cfg.seed, corrupt=args.corrupt)
        for line in report.lines():
            print(line)
        ok &= report.passed
    return EXIT_OK if ok else EXIT_FAILURE


def _datasets(cfg: RunConfig):
    if cfg.data:
        root = Path(cfg.data)
        return D.load_split(root / "train"), D.load_split(root / "val")
    h, w = cfg.size
    # Validation samples come from a disjoint seed stream.
    return (D.generate_dataset(cfg.train_size, h, w, seed=cfg.seed),
            D.generate_dataset(cfg.val_size, h, w, seed=cfg.seed + 1_000_003))


def cmd_make_data(args, cfg: RunConfig) -> int:
    if cfg.out is None:
        raise UsageError("make-data needs --out DIR")
    train_set, val_set = _datasets(replace(cfg, data=None))
    D.save_dataset(cfg.out, {"train": train_set, "val": val_set})
    print(f"wrote {len(train_set)} train / {len(val_set)} val samples to {cfg.out} "
          f"(foreground fraction {D.foreground_fraction(train_set):.4f})")
    return EXIT_OK


def _print_history(tag: str, history) -> None:
    for rec in history:
        print(f"{tag} epoch {rec.epoch:3d} loss {rec.loss:.5f} dsc {rec.dsc:.4f} iou {rec.iou:.4f} "
              f"mae {rec.mae:.4f} lr {rec.lr:.3e}")


def cmd_train(args, cfg: RunConfig) -> int:
    net_cfg = cfg.network_config()
    train_set, val_set = _datasets(cfg)
    result = train(net_cfg, train_set, val_set, cfg.train_settings(), _out_dir(cfg), tag=args.tag)
    _print_history(args.tag, result.history)
    print(f"trained {len(result.history)} epochs in {result.seconds:.1f} s")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint)
    if cfg.data:
        samples = D.load_split(Path(cfg.data) / "val")
    else:
        h, w = model.config.input_size
        samples = D.generate_dataset(cfg.val_size, h, w, seed=cfg.seed + 1_000_003)
    report = evaluate_model(model, samples)
    print(f"dsc={report.dsc:.6f} iou={report.iou:.6f} mae={report.mae:.6f} threshold={report.threshold}")
    out = _out_dir(cfg)
    if out is not None:
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("samples", "dsc", "iou", "mae", "threshold"))
            w.writerow((len(samples), report.dsc, report.iou, report.mae, report.threshold))
    return EXIT_OK


def cmd_cost(args, cfg: RunConfig) -> int:
    net_cfg = cfg.network_config()
    report = count_cost(net_cfg)
    stored = to_container(PatchMoENet(net_cfg, seed=cfg.seed)).param_scalar_count()
    sys.stdout.write(report.to_text())
    match = stored == report.params
    print(f"checkpoint parameter scalars: {stored} ({'match' if match else 'MISMATCH'})")
    out = _out_dir(cfg)
    if out is not None:
        (out / "cost.csv").write_text(report.to_csv())
    return EXIT_OK if match else EXIT_FAILURE


ABLATION_VARIANTS = (
    ("raster_only", dict(raster_only=True, no_moe=True)),
    ("patch_ordered", dict(raster_only=False, no_moe=True)),
    ("patch_moe", dict(raster_only=False, no_moe=False)),
)


def run_ablation(cfg: RunConfig, out: Optional[Path] = None) -> list:
    """Train the three ablation variants on one dataset; returns ``(name, TrainResult)`` pairs."""
    if _all_ones(cfg.scheme):
        raise UsageError("the patch-ordered variants need a non-raster --scheme")
    train_set, val_set = _datasets(cfg)
    results = []
    for name, flags in ABLATION_VARIANTS:
        variant = replace(cfg, **flags)
        log.info("ablation variant %s", name)
        res = train(variant.network_config(), train_set, val_set, variant.train_settings(), out, tag=name)
        results.append((name, res))
    if out is not None:
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("variant", "params", "dsc", "iou", "mae", "seconds"))
            for name, res in results:
                f = res.final
                w.writerow((name, res.model.num_parameters(), f"{f.dsc:.10g}", f"{f.iou:.10g}",
                            f"{f.mae:.10g}", f"{res.seconds:.3f}"))
    return results


def cmd_ablate(args, cfg: RunConfig) -> int:
    cfg = replace(cfg, raster_only=False)
    results = run_ablation(cfg, _out_dir(cfg))
    for name, res in results:
        f = res.final
        print(f"{name:<14} params {res.model.num_parameters():>8d} dsc {f.dsc:.4f} iou {f.iou:.4f} "
              f"mae {f.mae:.4f} time {res.seconds:.1f} s")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", metavar="FILE", help="key=value file; explicit flags override it")
    g.add_argument("--scheme", help="patch sizes per stage, e.g. 8844/1111/1111/1111")
    g.add_argument("--channels", type=_channels, help="stage widths, e.g. 16,32,64,128")
    g.add_argument("--size", type=_size, help="input size HxW")
    g.add_argument("--seed", type=_nonneg)
    g.add_argument("--epochs", type=_positive)
    g.add_argument("--precision", choices=("f32", "f64"))
    g.add_argument("--state-dim", dest="state_dim", type=_positive)
    g.add_argument("--sdi-channels", dest="sdi_channels", type=_positive)
    g.add_argument("--blocks", type=_positive, help="VSS blocks per stage")
    g.add_argument("--batch-size", dest="batch_size", type=_positive)
    g.add_argument("--train-size", dest="train_size", type=_positive)
    g.add_argument("--val-size", dest="val_size", type=_positive)
    g.add_argument("--data", metavar="DIR", help="dataset written by make-data (train/ and val/)")
    g.add_argument("--out", metavar="DIR")
    g.add_argument("--no-concat-expert", dest="no_concat_expert", action="store_true")
    g.add_argument("--no-residual", dest="no_residual", action="store_true")
    g.add_argument("--no-moe", dest="no_moe", action="store_true", help="sum the directional outputs")
    g.add_argument("--raster-only", dest="raster_only", action="store_true", help="force patch size 1 everywhere")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = _Parser(prog="patchmoe", description="Patch-ordered selective-scan segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("scan", parents=[common], help="dump a scan permutation and its locality profile")
    p.add_argument("height", type=int)
    p.add_argument("width", type=int)
    p.add_argument("patch", type=int)
    p.add_argument("direction", help="forward, reverse, wh_forward or wh_reverse")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("all",) + SCOPES, default="all")
    p.add_argument("--trials", type=_positive, default=8, help="coordinates per parameter")
    p.add_argument("--corrupt", action="store_true", help="skew analytic gradients (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("make-data", parents=[common], help="write a synthetic dataset")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--tag", default="train", help="basename of the CSV and checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on validation data")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", parents=[common], help="parameter and MAC counts")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("ablate", parents=[common], help="train raster / patch-ordered / patch+MoE variants")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (SchemeParseError, T.ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with T.precision(cfg.precision):
            return args.func(args, cfg)
    except (UsageError, T.ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (T.ContractError, T.DimensionError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
