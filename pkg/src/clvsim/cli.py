"""Command-line entry point: generate, train, simulate, evaluate, propensity."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .bundle import read_bundle, write_bundle
from .core import read_panel_csv, schema_path, write_panel_csv
from .errors import ClvError, ConfigError
from .pipeline import (
    RunConfig,
    evaluate,
    rank_propensity,
    read_simulation_csv,
    set_threads,
    simulate_panel,
    train,
    write_decile_csv,
    write_json,
    write_lift_csv,
    write_segments_csv,
    write_simulation_csv,
)
from .synthgen import generate_population

log = logging.getLogger("clvsim")

ENV_PREFIX = "CLVSIM_"
# flag name -> (RunConfig field, parser)
OVERRIDES = {
    "seed": ("seed", int),
    "segments": ("segments", int),
    "horizon": ("horizon", int),
    "discount": ("discount", float),
    "threads": ("threads", int),
}

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERSION = 0, 2, 3, 4


class UsageError(ClvError):
    exit_code = EXIT_USAGE


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="RunConfig JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--segments", type=int, help="requested segment count S, churn included")
    p.add_argument("--horizon", type=int, help="simulation horizon T in years")
    p.add_argument("--discount", type=float, help="discount rate d")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--threads", type=int, help="worker threads for prediction kernels")
    p.add_argument("--baseline", action="store_true", help="also run the Markov baseline")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clvsim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"clvsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic panel CSV")
    _common(p)
    p.add_argument("--customers", type=int, help="overrides generator.n_customers")
    p.add_argument("--years", type=int, help="overrides generator.n_years")

    p = sub.add_parser("train", help="fit segmentation, the four models and the baseline")
    _common(p)
    p.add_argument("--panel", type=Path, required=True)

    p = sub.add_parser("simulate", help="per-customer expected cv and CLV")
    _common(p)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--panel", type=Path, required=True)

    p = sub.add_parser("evaluate", help="metrics report, lift and decile CSVs")
    _common(p)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--panel", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True, help="simulation CSV of the learned models")
    p.add_argument("--baseline-predictions", type=Path, help="simulation CSV of the baseline")

    p = sub.add_parser("propensity", help="rank customers by propensity to enter target subtrees")
    _common(p)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--panel", type=Path, required=True)
    p.add_argument("--targets", help="comma-separated subtree labels, e.g. S_01,S_11")
    return parser


def resolve_config(args: argparse.Namespace, env: dict | None = None) -> RunConfig:
    """Defaults < config file < CLVSIM_* environment < command-line flags."""
    env = os.environ if env is None else env
    if args.config is not None:
        _require(args.config, "config file")
        try:
            config = RunConfig.from_dict(json.loads(args.config.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    else:
        config = RunConfig()
    overrides = {}
    for flag, (name, parse) in OVERRIDES.items():
        raw = env.get(ENV_PREFIX + flag.upper())
        if raw is not None:
            try:
                overrides[name] = parse(raw)
            except ValueError:
                raise ConfigError(f"{ENV_PREFIX}{flag.upper()}={raw!r} is not a valid {parse.__name__}") from None
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "targets", None):
        overrides["target_subtrees"] = tuple(t.strip() for t in args.targets.split(",") if t.strip())
    gen = {}
    if getattr(args, "customers", None) is not None:
        gen["n_customers"] = args.customers
    if getattr(args, "years", None) is not None:
        gen["n_years"] = args.years
    seed = overrides.get("seed")
    if seed is not None:
        gen["seed"] = seed
    if gen:
        overrides["generator"] = type(config.generator).from_dict({**config.generator.to_dict(), **gen})
    return config.with_overrides(**overrides)


def _require(path: Path | None, what: str) -> Path:
    if path is None or not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def _load_panel(path: Path | None, schema=None):
    panel = read_panel_csv(_require(path, "panel CSV"), schema)
    panel.validate()
    return panel


def _out_dir(args) -> Path:
    out = args.out or Path(os.environ.get(ENV_PREFIX + "OUT", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config: RunConfig, inputs: dict[str, Path], outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "config_hash": config.hash(),
        "seed": config.seed,
        "config": config.to_dict(),
        "inputs": {k: {"path": p.name, "sha256": _file_digest(p)} for k, p in sorted(inputs.items())},
        "outputs": {p.name: _file_digest(p) for p in outputs},
        "version": __version__,
    }
    write_json(manifest, out / "manifest.json")


def cmd_generate(args, config: RunConfig) -> None:
    out = _out_dir(args)
    panel = generate_population(config.generator)
    path = out / "panel.csv"
    write_panel_csv(panel, path)
    log.info("wrote %d rows for %d customers to %s", len(panel), panel.n_customers, path)
    write_manifest(out, "generate", config, {}, [path, schema_path(path)])


def cmd_train(args, config: RunConfig) -> None:
    out = _out_dir(args)
    panel = _load_panel(args.panel)
    bundle = train(panel, config)
    bundle_path, seg_path = out / "bundle.json", out / "segments.csv"
    write_bundle(bundle, bundle_path)
    write_segments_csv(bundle, panel, seg_path)
    log.info("trained %d segments", bundle.n_segments)
    write_manifest(out, "train", config, {"panel": args.panel}, [bundle_path, seg_path])


def cmd_simulate(args, config: RunConfig) -> None:
    out = _out_dir(args)
    bundle = read_bundle(_require(args.bundle, "model bundle"))
    panel = _load_panel(args.panel, bundle.schema)
    outputs = []
    path = out / "simulation.csv"
    write_simulation_csv(simulate_panel(bundle, panel, config), path)
    outputs.append(path)
    if args.baseline:
        path = out / "simulation_baseline.csv"
        write_simulation_csv(simulate_panel(bundle, panel, config, baseline=True), path)
        outputs.append(path)
    write_manifest(out, "simulate", config, {"bundle": args.bundle, "panel": args.panel}, outputs)


def cmd_evaluate(args, config: RunConfig) -> None:
    out = _out_dir(args)
    bundle = read_bundle(_require(args.bundle, "model bundle"))
    panel = _load_panel(args.panel, bundle.schema)
    preds = read_simulation_csv(_require(args.predictions, "predictions CSV"))
    inputs = {"bundle": args.bundle, "panel": args.panel, "predictions": args.predictions}
    base = None
    if args.baseline_predictions is not None or args.baseline:
        path = args.baseline_predictions or args.predictions.with_name("simulation_baseline.csv")
        base = read_simulation_csv(_require(path, "baseline predictions CSV"))
        inputs["baseline_predictions"] = path
    result = evaluate(bundle, panel, preds, config, base)
    metrics, lift, deciles = out / "metrics.json", out / "lift.csv", out / "deciles.csv"
    write_json(result.to_dict(), metrics)
    write_lift_csv(result.lift, lift)
    outputs = [metrics, lift]
    if result.deciles is not None:
        write_decile_csv(result.deciles, deciles)
        outputs.append(deciles)
    write_manifest(out, "evaluate", config, inputs, outputs)


def cmd_propensity(args, config: RunConfig) -> None:
    out = _out_dir(args)
    bundle = read_bundle(_require(args.bundle, "model bundle"))
    panel = _load_panel(args.panel, bundle.schema)
    ranked = rank_propensity(bundle, panel, config)
    path = out / "propensity.csv"
    ranked.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    write_manifest(out, "propensity", config, {"bundle": args.bundle, "panel": args.panel}, [path])


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "propensity": cmd_propensity,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                         format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        set_threads(config.threads)
        COMMANDS[args.command](args, config)
    except ClvError as exc:
        print(f"clvsim {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
