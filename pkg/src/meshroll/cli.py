"""Command-line entry point: ``meshroll {topo,run,sweep,report,calibrate}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import yaml

from . import report, topology
from .scenario import (
    Scenario,
    ScenarioError,
    SweepGrid,
    calibrate_interval,
    dump_scenario,
    period_axis,
    run_scenario,
    run_sweep,
)
from .topology import TopologyError

log = logging.getLogger("meshroll")

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2


def parse_seeds(text: str | None) -> list[int] | None:
    if text is None or text.strip() == "":
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ScenarioError(f"bad seed list {text!r}") from None


def _load_config(path: str | None) -> tuple[dict, dict | None]:
    """Return (scenario mapping, optional sweep mapping)."""
    if path is None:
        return {}, None
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ScenarioError("config root must be a mapping")
    sweep = data.pop("sweep", None)
    return data, sweep


def _scenario(args) -> tuple[Scenario, dict | None]:
    data, sweep = _load_config(args.config)
    seeds = parse_seeds(args.seed) or parse_seeds(os.environ.get("MESHROLL_SEED"))
    if seeds:
        data["seeds"] = seeds
    return Scenario.from_dict(data), sweep


def _emit(records, args, out: Path) -> None:
    for fmt in args.format:
        for path in report.emit(records, fmt, out):
            print(path)


def _write_rpl_dump(rec, out: Path) -> None:
    rows = rec.extra.get("rpl")
    if not rows:
        return
    path = out / f"rpl_state_seed{rec.seed}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=("id", "rank", "parent", "joined_at"))
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if v is None else v for k, v in row.items()})


# -- subcommands ---------------------------------------------------------------

def cmd_topo(args) -> int:
    if args.validate:
        topo = topology.load_topology(args.validate)
        print(f"{args.validate}: {len(topo)} nodes, source {topo.source.id}, {len(topo.consumers)} consumers")
        return EXIT_OK
    seed = (parse_seeds(args.seed) or parse_seeds(os.environ.get("MESHROLL_SEED")) or [0])[0]
    topo = topology.preset(args.preset, seed=seed)
    text = topology.dumps(topo)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(args.out)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    scn, _ = _scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_scenario(scn, out / "effective_config.yaml")
    records = []
    for seed in scn.seeds:
        rec = run_scenario(scn, seed)
        _write_rpl_dump(rec, out)
        log.info("seed %d: unreachable=%d mean_pdr=%.4f", seed, rec.unreachable, rec.mean_pdr)
        records.append(rec)
    _emit(records, args, out)
    return EXIT_OK


def _grid(sweep: dict | None) -> SweepGrid:
    if not sweep:
        return SweepGrid({"atomic.period_ms": period_axis()})
    axes = dict(sweep.get("axes") or {})
    for key, values in axes.items():
        if values == "periods":
            axes[key] = period_axis()
    return SweepGrid(axes, int(sweep.get("repetitions", 1)))


def cmd_sweep(args) -> int:
    scn, sweep = _scenario(args)
    grid = _grid(sweep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = scn.to_dict()
    effective["sweep"] = {"axes": grid.axes, "repetitions": grid.repetitions}
    with open(out / "effective_config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(effective, fh, sort_keys=False)
    records = run_sweep(scn, grid, parallel=args.parallel)
    failed = [r for r in records if r.error]
    for r in failed:
        log.warning("point %s seed %d failed: %s", r.point, r.seed, r.error)
    _emit(records, args, out)
    return EXIT_RUN if failed and len(failed) == len(records) else EXIT_OK


def cmd_report(args) -> int:
    records = []
    for path in args.inputs:
        p = Path(path)
        records += report.read_json(p) if p.suffix == ".json" else report.read_csv(p)
    out = Path(args.out)
    _emit(records, args, out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    scn, _ = _scenario(args)
    if not scn.stack.is_csma:
        raise ScenarioError("calibrate applies to the CSMA/RPL stacks")
    interval = calibrate_interval(scn, scn.seeds[0])
    print(f"interval_ms: {interval}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "calibration.yaml").write_text(yaml.safe_dump({"csma": {"interval_ms": interval}}), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshroll", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="out"):
        sp.add_argument("--config", help="scenario YAML file")
        sp.add_argument("--seed", help="seed or comma-separated seeds (fallback: $MESHROLL_SEED)")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--format", action="append", choices=report.FORMATS, help="output format (repeatable; default csv)")
        sp.add_argument("--parallel", type=int, default=1, help="worker processes for sweeps")

    t = sub.add_parser("topo", help="generate or validate topology files")
    t.add_argument("--preset", default="umbrella-spacing", choices=topology.PRESETS)
    t.add_argument("--seed")
    t.add_argument("--out")
    t.add_argument("--validate", metavar="FILE")
    t.set_defaults(func=cmd_topo)

    for name, func, text in (
        ("run", cmd_run, "run one scenario for each seed"),
        ("sweep", cmd_sweep, "run a parameter grid"),
        ("calibrate", cmd_calibrate, "find the CSMA source interval"),
    ):
        sp = sub.add_parser(name, help=text)
        common(sp, None if name == "calibrate" else "out")
        sp.set_defaults(func=func)

    r = sub.add_parser("report", help="re-emit charts or tables from CSV/JSON results")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out", default="out")
    r.add_argument("--format", action="append", choices=report.FORMATS)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "format", None) is None:
        args.format = ["svg"] if args.command == "report" else ["csv"]
    try:
        return args.func(args)
    except (ScenarioError, TopologyError, report.ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
