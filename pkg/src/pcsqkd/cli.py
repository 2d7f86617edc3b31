"""Command-line runner: ``pcsqkd --experiment table1 --out runs/table1``.

A configuration file (JSON, or TOML by extension) is validated against the
published schema, command-line flags override it, and every module type is
built before any computation starts. Each run writes its files plus a
``manifest.json`` with SHA-256 digests. On failure the partial outputs and
manifest go to ``<out>/quarantine`` and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from . import __version__
from .errors import QKDError
from .experiments import EXPERIMENTS, PATHS, ConfigError, ExperimentConfig, Outputs, json_bytes, run_experiment

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("pcsqkd")

EXIT_OK = 0
EXIT_FAILED = 1


def load_schema() -> dict:
    text = resources.files("pcsqkd").joinpath("schema/experiment.schema.json").read_text()
    return json.loads(text)


def load_config_file(path) -> dict:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".toml":
        return tomllib.loads(raw.decode())
    return json.loads(raw)


def validate_config_dict(d: dict) -> None:
    try:
        jsonschema.validate(d, load_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"configuration invalid at {where}: {e.message}") from None


@dataclass
class RunManifest:
    config: dict
    tool_version: str
    seeds: list
    status: str = "running"
    timings_s: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    failed_blocks: int = 0
    error: str | None = None

    def to_json(self) -> bytes:
        return json_bytes(asdict(self))


def write_files(root: Path, files: dict) -> list[dict]:
    entries = []
    for name, content in files.items():
        target = root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(content)
        entries.append({"path": name, "sha256": hashlib.sha256(content).hexdigest(), "bytes": len(content)})
    return entries


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcsqkd", description="Shaped-QAM CV-QKD simulations and key-rate reports.")
    p.add_argument("--experiment", choices=EXPERIMENTS, help="experiment to run (overrides the config file)")
    p.add_argument("--config", type=Path, help="JSON or TOML configuration file")
    p.add_argument("--seed", type=int, action="append", help="run seed; repeat for several")
    p.add_argument("--blocks", type=int, help="blocks per seed for e2e-sim")
    p.add_argument("--path", choices=PATHS, help="e2e-sim channel fidelity")
    p.add_argument("--symbols", type=int, dest="symbols_per_block", help="symbols per block, both polarizations")
    p.add_argument("--workers", type=int, help="process-pool size")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    d = load_config_file(args.config) if args.config else {}
    overrides = {
        "experiment": args.experiment,
        "seeds": args.seed,
        "blocks": args.blocks,
        "path": args.path,
        "symbols_per_block": args.symbols_per_block,
        "workers": args.workers,
        "output_dir": str(args.out) if args.out else None,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    if "experiment" not in d:
        raise ConfigError("no experiment given; use --experiment or set it in the config file")
    validate_config_dict(d)
    return ExperimentConfig.from_dict(d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (QKDError, OSError, ValueError) as e:
        print(f"pcsqkd: configuration error: {e}", file=sys.stderr)
        return EXIT_FAILED

    out_dir = Path(cfg.output_dir)
    manifest = RunManifest(config=cfg.to_dict(), tool_version=__version__, seeds=list(cfg.seeds))
    outputs = Outputs()
    t0 = time.perf_counter()
    try:
        log.info("running %s", cfg.experiment)
        run_experiment(cfg, outputs)
    except Exception as e:  # any failure quarantines whatever was produced
        manifest.timings_s[cfg.experiment] = time.perf_counter() - t0
        manifest.status = "error"
        manifest.error = f"{type(e).__name__}: {e}"
        manifest.failed_blocks = outputs.failures
        q = out_dir / "quarantine"
        manifest.files = write_files(q, outputs.files)
        (q / "manifest.json").write_bytes(manifest.to_json())
        print(f"pcsqkd: {cfg.experiment} failed: {manifest.error}; partial outputs in {q}", file=sys.stderr)
        return EXIT_FAILED

    manifest.timings_s[cfg.experiment] = time.perf_counter() - t0
    manifest.status = "ok"
    manifest.failed_blocks = outputs.failures
    manifest.files = write_files(out_dir, outputs.files)
    (out_dir / "manifest.json").write_bytes(manifest.to_json())
    for name in outputs.files:
        log.info("wrote %s", out_dir / name)
    if "table1.txt" in outputs.files:
        sys.stdout.write(outputs.files["table1.txt"].decode())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
