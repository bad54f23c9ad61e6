"""Command-line entry point: ``ssmfusim <subcommand> [flags]``.

Exit status is 0 on success, 1 on configuration or graph errors and 2 when
the hardware point cannot run the requested schedule.
"""
from __future__ import annotations

import argparse
import csv
import io
import re
import sys
from typing import Sequence

from . import dse as dse_mod
from .errors import ConfigError, GraphError, InfeasibleError
from .fusion import scheme_table
from .graph import dumps_graph
from .hardware import CALIBRATED_AREA, DEFAULT_AREA, MiB, load_accelerator
from .models import MambaConfig, build_mamba_block, expand_ssm_operator, load_model, with_L
from .roofline import profile_model, roofline_csv
from .sim import memory_sweep, schedule_for, simulate

SWEEP_HEADER = ["scheme", "L", "capacity_bytes", "capacity_MiB", "n_splits", "cycles",
                "latency_ms", "offchip_bytes"]
SCHEMES_HEADER = ["name", "abbrev", "locality", "tiles_per_layer"]
DEFAULT_CAPACITIES = "24MiB,20MiB,16MiB,12MiB,8MiB,6MiB,4MiB,2MiB,1MiB"
_SIZE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(B|KiB|MiB|GiB)?\s*$", re.IGNORECASE)
_UNITS = {"b": 1, "kib": 1024, "mib": MiB, "gib": 1024 * MiB}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems are configuration errors
        raise ConfigError(message)


def parse_size(text: str) -> int:
    m = _SIZE.match(text)
    if not m:
        raise ConfigError(f"bad size {text!r}; use bytes or a KiB/MiB/GiB suffix")
    return int(float(m.group(1)) * _UNITS[(m.group(2) or "b").lower()])


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad number list {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad integer list {text!r}") from None


def _emit(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _mamba(args) -> MambaConfig:
    model = load_model(args.model)
    if not isinstance(model, MambaConfig):
        raise ConfigError(f"{args.subcommand} needs a Mamba model, got {args.model!r}")
    if args.L is not None or args.stage is not None:
        model = with_L(model, args.L if args.L is not None else model.L, args.stage)
    model.validate()
    return model


def cmd_roofline(args) -> None:
    cfg = load_accelerator(args.accel)
    profiles = []
    for stage in args.stage.split(","):
        for L in _ints(args.L):
            for ref in args.model.split(","):
                m = with_L(load_model(ref), L, stage)
                m.validate()
                profiles.append(profile_model(m, cfg, ref))
    _emit(roofline_csv(profiles, cfg), args.out)


def cmd_simulate(args) -> None:
    cfg = load_accelerator(args.accel)
    cfg.validate()
    model = _mamba(args)
    graph = build_mamba_block(model)
    sched = schedule_for(graph, args.scheme, cfg.onchip_bytes)
    report = simulate(sched, cfg, timeline=args.timeline is not None)
    _emit(report.to_json(), args.out)
    if args.timeline is not None:
        _emit(report.timeline_csv(), args.timeline)


def cmd_sweep_mem(args) -> None:
    cfg = load_accelerator(args.accel)
    cfg.validate()
    model = _mamba(args)
    caps = [parse_size(c) for c in args.capacities.split(",") if c.strip()]
    if not caps or min(caps) <= 0:
        raise ConfigError("capacities must be positive")
    pts = memory_sweep(build_mamba_block(model), args.scheme, cfg, caps)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for p in pts:
        lat = p.total_cycles * model.n_layers / cfg.clock_hz * 1e3
        w.writerow([args.scheme, model.L, p.capacity_bytes, f"{p.capacity_bytes / MiB:.6g}",
                    p.n_splits, p.total_cycles, f"{lat:.6g}", p.offchip_bytes])
    _emit(buf.getvalue(), args.out)


def cmd_dse(args) -> None:
    model = load_model(args.model)
    if not isinstance(model, MambaConfig):
        raise ConfigError("dse needs a Mamba model")
    area = CALIBRATED_AREA if args.area_model == "calibrated" else DEFAULT_AREA
    grid = dse_mod.sweep(_floats(args.area_fractions), _floats(args.mem_fractions), args.scheme,
                         args.L, area, model=model, reference=load_accelerator(args.accel),
                         jobs=args.jobs)
    _emit(dse_mod.dse_csv(grid), args.out)
    if args.contour:
        _emit(dse_mod.contour_data(grid), args.contour)


def cmd_schemes(args) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCHEMES_HEADER)
    for row in scheme_table():
        w.writerow(row)
    _emit(buf.getvalue(), args.out)


def cmd_emit_workload(args) -> None:
    model = _mamba(args)
    graph = expand_ssm_operator(model) if args.ssm_only else build_mamba_block(model)
    _emit(dumps_graph(graph), args.out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssmfusim", description="Fusion-aware SSM accelerator simulator")
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    r = sub.add_parser("roofline", help="per-class roofline CSV")
    r.add_argument("--model", default="opt-2.7b,mamba-2.8b", help="comma-separated presets or JSON files")
    r.add_argument("--stage", default="prefill,decode")
    r.add_argument("--L", default="2048", help="comma-separated sequence lengths")
    r.set_defaults(func=cmd_roofline)

    s = sub.add_parser("simulate", help="simulate one Mamba block, JSON report")
    s.add_argument("--scheme", default="All")
    s.add_argument("--timeline", metavar="CSV", help="also write the per-tile timeline")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("sweep-mem", help="latency across on-chip capacities")
    m.add_argument("--scheme", default="MA-All")
    m.add_argument("--capacities", default=DEFAULT_CAPACITIES)
    m.set_defaults(func=cmd_sweep_mem)

    d = sub.add_parser("dse", help="area x memory-fraction sweep")
    d.add_argument("--scheme", default="MA-All")
    d.add_argument("--L", type=int, default=1024)
    d.add_argument("--area-fractions", default=",".join(map(str, dse_mod.DEFAULT_AREA_FRACTIONS)))
    d.add_argument("--mem-fractions", default=",".join(map(str, dse_mod.DEFAULT_MEM_FRACTIONS)))
    d.add_argument("--area-model", choices=("default", "calibrated"), default="default",
                   help="'calibrated' puts 32768 PEs + 10.5 MiB on the 222 mm^2 line")
    d.add_argument("--jobs", type=int, default=None, help="worker processes (env SSMFUSIM_JOBS)")
    d.add_argument("--contour", metavar="PATH", help="gnuplot contour data file")
    d.set_defaults(func=cmd_dse)

    t = sub.add_parser("schemes", help="list the fusion schemes")
    t.set_defaults(func=cmd_schemes)

    e = sub.add_parser("emit-workload", help="workload graph as JSON")
    e.add_argument("--ssm-only", action="store_true", help="only the expanded state-update operator")
    e.set_defaults(func=cmd_emit_workload)

    for sp in (s, m, e):
        sp.add_argument("--L", type=int, default=None)
        sp.add_argument("--stage", choices=("prefill", "decode"), default=None)
    for sp in (r, s, m, d, e):
        sp.add_argument("--accel", default="marca", help="preset name or JSON file")
    for sp in (s, m, d, e):
        sp.add_argument("--model", default="mamba-2.8b", help="preset name or JSON file")
    for sp in (r, s, m, d, t, e):
        sp.add_argument("--out", default=None, help="output path (default stdout)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
