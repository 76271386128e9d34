"""Command-line entry point.

    fcclsim run <config> [--out DIR] [--seed N]
    fcclsim sweep <config> --axis NAME --values V1,V2,... [--out DIR] [--seed N]
    fcclsim verify

Exit codes: 0 success, 1 usage, 2 validation, 3 numeric abort.
When ``--out`` is omitted, outputs go under ``$FCCLSIM_OUT_ROOT`` (default
``runs``) in a directory named after the config file and seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, config
from .errors import ConfigError, NumericAbort
from .federation import correlation_matrices, run_experiment
from .metrics import dump_correlation_matrix, forgetting_gaps, summarize, write_metrics_csv

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ROOT_ENV = "FCCLSIM_OUT_ROOT"
SUMMARY_COLUMNS = ("axis", "value", "status", "intra_last3", "inter_last3", "mean_forgetting_gap", "out_dir")

log = logging.getLogger("fcclsim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _read_config(path: str) -> tuple[str, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    data = p.read_bytes()
    return data.decode("utf-8"), hashlib.sha256(data).hexdigest()


def _default_out(config_path: str, seed: int, suffix: str = "") -> Path:
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / f"{Path(config_path).stem}-seed{seed}{suffix}"


def _with_seed(cfg: config.RunConfig, seed: int | None) -> config.RunConfig:
    if seed is None:
        return cfg
    fed = cfg.federation
    fed = dataclasses.replace(fed, seed=seed, scenario=dataclasses.replace(fed.scenario, seed=seed))
    return dataclasses.replace(cfg, federation=fed)


def execute(cfg: config.RunConfig, out_dir: Path, config_path: str, config_hash: str) -> tuple[int, dict]:
    """Run one experiment into ``out_dir``; returns (exit code, manifest)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    fed = cfg.federation
    outputs = ["metrics.csv", "config.ini"]
    start = time.perf_counter()
    manifest = {
        "config_path": str(config_path),
        "config_sha256": config_hash,
        "seed": fed.seed,
        "strategy": fed.strategy,
        "version": __version__,
        "outputs": outputs,
        "status": "running",
    }
    _write_atomic(out_dir / "config.ini", config.dumps(cfg))

    def dump(epoch, clients, pool):
        corr_dir = out_dir / "correlations"
        corr_dir.mkdir(exist_ok=True)
        for i, m in enumerate(correlation_matrices(clients, pool, cfg.output.correlation_batch)):
            name = f"correlations/epoch{epoch:03d}_client{i}.txt"
            dump_correlation_matrix(m, out_dir / name)
            outputs.append(name)

    code = EXIT_OK
    try:
        result = run_experiment(fed, on_epoch=dump if cfg.output.correlation_dumps else None)
    except NumericAbort as exc:
        code = EXIT_NUMERIC
        manifest["status"] = "numeric_abort"
        manifest["diagnostic"] = {k: (v if isinstance(v, (int, str, list)) else float(v)) for k, v in exc.diagnostic.items()}
        outputs.remove("metrics.csv")
    else:
        write_metrics_csv(result.log, out_dir / "metrics.csv")
        summary = summarize(result.log)
        gaps = forgetting_gaps(result.log)
        manifest["status"] = "completed"
        manifest["summary"] = {
            "intra_last3": round(summary["intra"], 6),
            "inter_last3": round(summary["inter"], 6),
            "mean_forgetting_gap": round(float(np.mean(list(gaps.values()))), 6) if gaps else None,
        }
    manifest["wall_clock_seconds"] = round(time.perf_counter() - start, 3)
    manifest["finished_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    _write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return code, manifest


def cmd_run(config_path: str, out_dir: str | None = None, seed: int | None = None) -> int:
    text, digest = _read_config(config_path)
    cfg = _with_seed(config.loads(text, config_path), seed)
    out = Path(out_dir) if out_dir else _default_out(config_path, cfg.federation.seed)
    code, manifest = execute(cfg, out, config_path, digest)
    if code == EXIT_OK:
        s = manifest["summary"]
        print(f"{out}: intra {s['intra_last3']:.4f} inter {s['inter_last3']:.4f}")
    else:
        print(f"numeric abort: {manifest['diagnostic']}", file=sys.stderr)
    return code


def _value_dir(axis: str, value: str) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in value)
    return f"{axis.replace('.', '_')}={safe}"


def cmd_sweep(config_path: str, axis: str, values: str, out_dir: str | None = None, seed: int | None = None) -> int:
    text, digest = _read_config(config_path)
    try:
        config.resolve_axis(axis)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise UsageError("--values needs at least one value")
    # validate every point before running any of them
    cfgs = [_with_seed(config.with_override(text, axis, v, config_path), seed) for v in items]
    out = Path(out_dir) if out_dir else _default_out(config_path, cfgs[0].federation.seed, f"-sweep-{axis}")
    out.mkdir(parents=True, exist_ok=True)
    rows, worst = [], EXIT_OK
    for value, cfg in zip(items, cfgs):
        sub = out / _value_dir(axis, value)
        code, manifest = execute(cfg, sub, config_path, digest)
        worst = max(worst, code)
        s = manifest.get("summary", {})
        fmt = lambda v: "" if v is None else f"{v:.4f}"
        rows.append([axis, value, manifest["status"], fmt(s.get("intra_last3")), fmt(s.get("inter_last3")), fmt(s.get("mean_forgetting_gap")), sub.name])
        print(f"{axis}={value}: {manifest['status']} inter {fmt(s.get('inter_last3'))} intra {fmt(s.get('intra_last3'))}")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(rows)
    return worst


def cmd_verify() -> int:
    from .verify import main_verify

    ok, table = main_verify()
    print(table)
    return EXIT_OK if ok else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fcclsim", description="Heterogeneous federated learning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config")
    run.add_argument("--out", help="output directory")
    run.add_argument("--seed", type=int, help="override the root seed")

    sweep = sub.add_parser("sweep", help="run one experiment per value of a config key")
    sweep.add_argument("config")
    sweep.add_argument("--axis", required=True, help="config key, e.g. omega or losses.tau")
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--out", help="output directory")
    sweep.add_argument("--seed", type=int, help="override the root seed")

    sub.add_parser("verify", help="run the invariant battery")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.axis, args.values, args.out, args.seed)
        return cmd_verify()
    except UsageError as exc:
        print(f"fcclsim: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"fcclsim: invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
