"""Command-line pipeline: genworld, pretrain, adapt, evaluate, report.

Every command resolves the same run directory from (seed, effective config),
so the five stages of one run chain through the filesystem and two runs with
different settings can never collide.  Effective settings come from flags,
then a `key = value` config file, then built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, fields

from . import evalreport, scenario
from .adapt import TtaConfig, adapt
from .losses import LossWeights
from .model import init_model, read_checkpoint, write_checkpoint
from .rng import RngKey


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of the pipeline; defaults match the shipped recipe."""

    seed: int = 0
    # world geometry
    fine_height: int = 96
    fine_width: int = 96
    coarse_ratio: int = 4
    smooth_scale: float = 6.0
    noise_sigma_k: float = 0.5
    date_spread_k: float = 3.0
    dropout_rate: float = 0.1
    # pretraining
    pretrain_epochs: int = 30
    pretrain_lr: float = 3e-3
    pretrain_stride: int = 16
    # adaptation loss weights and loop
    lambda1: float = 0.65
    lambda2: float = 0.30
    lambda3: float = 0.25
    mc: int = 10
    epochs: int = 10
    lr: float = 4e-4
    patch: int = 32
    stride: int = 8
    shuffle: bool = False
    full_batch: bool = False
    sgd: bool = False
    # evaluation
    eval_factor: int = 2
    eval_mc: int = 0
    threads: int = 1

    def canonical(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self))

    def run_id(self) -> str:
        digest = hashlib.sha256(self.canonical().encode("ascii")).hexdigest()[:12]
        return f"run_seed{self.seed}_{digest}"

    def tta_config(self) -> TtaConfig:
        return TtaConfig(
            weights=LossWeights(self.lambda1, self.lambda2, self.lambda3),
            mc_samples=self.mc,
            epochs=self.epochs,
            learning_rate=self.lr,
            patch_size=self.patch,
            stride=self.stride,
            seed=self.seed,
            shuffle=self.shuffle,
            full_batch=self.full_batch,
            plain_sgd=self.sgd,
            threads=self.threads,
        )

    def world_overrides(self) -> dict:
        return dict(
            height=self.fine_height,
            width=self.fine_width,
            coarse_ratio=self.coarse_ratio,
            smooth_scale=self.smooth_scale,
            noise_sigma_k=self.noise_sigma_k,
            date_spread_k=self.date_spread_k,
        )


_BOOL_FIELDS = {"shuffle", "full_batch", "sgd"}


def _parse_config_file(path: str) -> dict:
    """Line-based `key = value`; blank lines and #-comments allowed."""
    valid = {f.name: f.type for f in fields(RunConfig)}
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in valid:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce(key, value)
    return out


def _coerce(key: str, value: str):
    if key in _BOOL_FIELDS:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    default = getattr(RunConfig(), key)
    return type(default)(value)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", default="runs", help="root directory for run outputs")
    parser.add_argument("--config", default=None, help="optional key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    skip = {"seed", "shuffle", "full_batch", "sgd"}
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        default = getattr(RunConfig(), f.name)
        parser.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f.name,
            type=type(default),
            default=None,
            help=f"{f.name} (default {default})",
        )
    for name in sorted(_BOOL_FIELDS):
        parser.add_argument(
            f"--{name.replace('_', '-')}",
            dest=name,
            action="store_const",
            const=True,
            default=None,
            help=f"enable {name} (default off)",
        )


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Flags beat config file beats defaults."""
    settings: dict = {}
    if args.config:
        settings.update(_parse_config_file(args.config))
    for f in fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            settings[f.name] = flag_value
    return RunConfig(**settings)


def _run_dir(args: argparse.Namespace, config: RunConfig) -> str:
    path = os.path.join(args.out, config.run_id())
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.txt"), "w", encoding="ascii") as fh:
        fh.write(config.canonical() + "\n")
    return path


def _world_dir(run_dir: str) -> str:
    return os.path.join(run_dir, "world")


def _pretrained_path(run_dir: str) -> str:
    return os.path.join(run_dir, "pretrained.efd1")


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} is missing; run `lstfuse {hint}` first with the same seed/config")
    return path


def cmd_genworld(args) -> int:
    config = resolve_config(args)
    run_dir = _run_dir(args, config)
    world = scenario.default_world(config.seed, **config.world_overrides())
    scenario.write_world(world, _world_dir(run_dir))
    print(f"world written to {_world_dir(run_dir)}")
    return 0


def cmd_pretrain(args) -> int:
    config = resolve_config(args)
    run_dir = _run_dir(args, config)
    world = scenario.read_world(_require(_world_dir(run_dir), "genworld"))
    model = init_model(RngKey(config.seed), dropout_rate=config.dropout_rate)
    trained, report = scenario.pretrain(
        model,
        world.source.samples,
        epochs=config.pretrain_epochs,
        learning_rate=config.pretrain_lr,
        patch_size=config.patch,
        stride=config.pretrain_stride,
        seed=config.seed,
    )
    write_checkpoint(trained, _pretrained_path(run_dir))
    print(
        f"pretrained on {world.source.spec.name}: "
        f"rmse {report.final_rmse:.3f} K (mean-predictor baseline {report.baseline_rmse:.3f} K)"
    )
    print(f"checkpoint written to {_pretrained_path(run_dir)}")
    return 0


def cmd_adapt(args) -> int:
    config = resolve_config(args)
    run_dir = _run_dir(args, config)
    model = read_checkpoint(_require(_pretrained_path(run_dir), "pretrain"))
    regions = scenario.read_adaptation_inputs(_require(_world_dir(run_dir), "genworld"))
    tta = config.tta_config()
    for region, samples in regions.items():
        report = adapt(model, samples, tta)
        region_dir = os.path.join(run_dir, region)
        os.makedirs(region_dir, exist_ok=True)
        report.write_losscurve_csv(os.path.join(region_dir, "losscurve.csv"))
        report.write_patches_csv(os.path.join(region_dir, "patches.csv"))
        write_checkpoint(report.model, os.path.join(region_dir, "checkpoint_after.efd1"))
        first, last = report.epoch_stats[0], report.epoch_stats[-1]
        print(
            f"{region}: {report.steps} steps, mean total loss "
            f"{first.mean_total:.4f} -> {last.mean_total:.4f}"
        )
    return 0


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    run_dir = _run_dir(args, config)
    world = scenario.read_world(_require(_world_dir(run_dir), "genworld"))
    before = read_checkpoint(_require(_pretrained_path(run_dir), "pretrain"))
    after = {}
    for region in world.targets:
        path = os.path.join(run_dir, region.spec.name, "checkpoint_after.efd1")
        after[region.spec.name] = read_checkpoint(_require(path, "adapt"))
    regions = [(r.spec.name, r.samples) for r in world.targets]
    key = RngKey(config.seed).child("eval") if config.eval_mc > 0 else None
    rows = evalreport.compare(
        before, after, regions, config.eval_factor, config.eval_mc, key
    )
    evalreport.write_metrics_csv(rows, os.path.join(run_dir, "metrics.csv"))
    print(evalreport.format_table(rows))
    return 0


def cmd_report(args) -> int:
    config = resolve_config(args)
    run_dir = _run_dir(args, config)
    rows = evalreport.read_metrics_csv(_require(os.path.join(run_dir, "metrics.csv"), "evaluate"))
    world = scenario.read_manifest(_require(_world_dir(run_dir), "genworld"))
    lines = [
        "Cross-region adaptation report",
        f"run: {config.run_id()}",
        "",
        evalreport.format_table(rows),
        "",
        "Loss curves (mean total per epoch)",
    ]
    for block in world["targets"]:
        region = block["name"]
        curve_path = _require(os.path.join(run_dir, region, "losscurve.csv"), "adapt")
        with open(curve_path, encoding="ascii") as fh:
            curve = [line.strip().split(",") for line in fh][1:]
        totals = ", ".join(f"{float(row[4]):.4f}" for row in curve)
        shift = block["shift"]
        lines.append(
            f"  {region} (fraction shift {shift['fraction_distance']:.2f}, "
            f"sensor bias {shift['sensor_bias_k']:+.1f} K): {totals}"
        )
    text = "\n".join(lines) + "\n"
    with open(os.path.join(run_dir, "report.txt"), "w", encoding="ascii") as fh:
        fh.write(text)
    print(text, end="")
    return 0


_COMMANDS = {
    "genworld": (cmd_genworld, "generate the synthetic source and target regions"),
    "pretrain": (cmd_pretrain, "train the reference model on the source region"),
    "adapt": (cmd_adapt, "run test-time adaptation per target region"),
    "evaluate": (cmd_evaluate, "score before/after checkpoints against truth"),
    "report": (cmd_report, "assemble the plain-text comparison report"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lstfuse",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in _COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        _add_common(sub)
        sub.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # pragma: no cover - exercised via CLI tests
        error = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(error), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
