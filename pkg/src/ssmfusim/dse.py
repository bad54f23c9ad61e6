"""Design-space sweep over chip area and the memory share of that area."""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from .errors import ConfigError, InfeasibleError
from .hardware import GB, MARCA, MiB, AcceleratorConfig, AreaModel, DEFAULT_AREA, area_of, config_from_area
from .models import MambaConfig, build_mamba_block, with_L
from .fusion import FusionScheme, Schedule, compute_d_splits, generate_schedule
from .fusion import scheme as make_scheme
from .sim import simulate

DEFAULT_AREA_FRACTIONS = (0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0, 1.25)
DEFAULT_MEM_FRACTIONS = tuple(round(i / 20, 2) for i in range(21))
CSV_HEADER = ["area_mm2", "mem_fraction", "pe_count", "onchip_MiB", "bw_GBps", "n_splits",
              "cycles", "latency_ms", "speedup", "status"]


@dataclass(frozen=True)
class DsePoint:
    area_mm2: float
    mem_fraction: float
    pe_count: int
    onchip_bytes: int
    bw_Bps: float
    n_splits: int
    cycles: int
    latency_ms: float
    speedup: float
    status: str

    @property
    def feasible(self) -> bool:
        return self.status == "ok"


@dataclass
class DseGrid:
    points: list[DsePoint]
    reference: DsePoint
    scheme: str
    L: int


@lru_cache(maxsize=4)
def _graph(model: MambaConfig):
    return build_mamba_block(model)


@lru_cache(maxsize=64)
def _schedule(model: MambaConfig, scheme: str, n: int) -> Schedule:
    # schedules (and their cached footprints) depend on the split count only
    sch = make_scheme(scheme) if scheme.lower() != "ma-all" else \
        FusionScheme("MA-All", make_scheme("All").local_tensors, True, n)
    return generate_schedule(_graph(model), sch)


def _n_splits(model: MambaConfig, scheme: str, onchip: int) -> int:
    if scheme.lower() != "ma-all":
        return 1
    return compute_d_splits(model.D, model.N, model.element_bits, onchip)


def evaluate(model: MambaConfig, scheme: str, cfg: AcceleratorConfig) -> tuple[int, int]:
    """(n_splits, total cycles per block) of one configuration."""
    n = _n_splits(model, scheme, cfg.onchip_bytes)
    sched = _schedule(model, scheme, n)
    return n, simulate(sched, cfg, timeline=False).total_cycles


def _point(args) -> DsePoint:
    model, scheme, area, mf, area_model, ref_cycles = args
    try:
        cfg = config_from_area(area, mf, area_model)
    except ConfigError:
        return DsePoint(area, mf, 0, 0, 0.0, 0, 0, float("nan"), float("nan"), "infeasible")
    try:
        n, cycles = evaluate(model, scheme, cfg)
    except InfeasibleError:
        return DsePoint(area, mf, cfg.pe_count, cfg.onchip_bytes, cfg.offchip_Bps, 0, 0,
                        float("nan"), float("nan"), "infeasible")
    lat = cycles * model.n_layers / cfg.clock_hz * 1e3
    speed = ref_cycles / cycles if ref_cycles else float("nan")
    return DsePoint(area, mf, cfg.pe_count, cfg.onchip_bytes, cfg.offchip_Bps, n, cycles, lat,
                    speed, "ok")


def jobs_from_env(jobs: int | None) -> int:
    if jobs is not None:
        return max(1, jobs)
    try:
        return max(1, int(os.environ.get("SSMFUSIM_JOBS", "1")))
    except ValueError:
        raise ConfigError("SSMFUSIM_JOBS must be an integer") from None


def sweep(area_fractions: Sequence[float] = DEFAULT_AREA_FRACTIONS,
          mem_fractions: Sequence[float] = DEFAULT_MEM_FRACTIONS,
          scheme: str = "MA-All", L: int = 1024, area_model: AreaModel = DEFAULT_AREA,
          model: MambaConfig | None = None, reference: AcceleratorConfig = MARCA,
          jobs: int | None = None) -> DseGrid:
    """Simulate every (area fraction, memory fraction) point.

    Points are evaluated independently and returned in grid order, so the
    result does not depend on ``jobs``.
    """
    for f in area_fractions:
        if not 0 < f <= 1.25:
            raise ConfigError(f"area fraction {f} outside (0, 1.25]")
    for f in mem_fractions:
        if not 0 <= f <= 1:
            raise ConfigError(f"memory fraction {f} outside [0, 1]")
    if L < 1:
        raise ConfigError("L must be ≥ 1")
    # a single token is a decode step
    model = with_L(model or MambaConfig(), L, "decode" if L == 1 else "prefill")
    n_ref, ref_cycles = evaluate(model, scheme, reference)
    ref_area, ref_mf = area_of(reference, area_model)
    ref = DsePoint(ref_area, ref_mf, reference.pe_count, reference.onchip_bytes, reference.offchip_Bps,
                   n_ref, ref_cycles, ref_cycles * model.n_layers / reference.clock_hz * 1e3, 1.0, "ok")
    tasks = [(model, scheme, af * area_model.anchor_area, mf, area_model, ref_cycles)
             for af in area_fractions for mf in mem_fractions]
    n_jobs = jobs_from_env(jobs)
    if n_jobs == 1:
        points = [_point(t) for t in tasks]
    else:
        with ProcessPoolExecutor(n_jobs) as ex:
            points = list(ex.map(_point, tasks, chunksize=max(1, len(tasks) // (4 * n_jobs))))
    return DseGrid(points, ref, scheme, L)


def best_point(grid: DseGrid | Sequence[DsePoint], area_mm2: float | None = None,
               rel_tol: float = 1e-6) -> DsePoint:
    """Lowest-latency feasible point, optionally restricted to one iso-area line.

    Ties go to the smaller area, then the larger memory.
    """
    pts = grid.points if isinstance(grid, DseGrid) else list(grid)
    if area_mm2 is not None:
        pts = [p for p in pts if abs(p.area_mm2 - area_mm2) <= rel_tol * area_mm2]
    ok = [p for p in pts if p.feasible]
    if not ok:
        raise InfeasibleError("no feasible design point")
    return min(ok, key=lambda p: (p.latency_ms, p.area_mm2, -p.onchip_bytes))


def iso_area_lines(grid: DseGrid) -> dict[float, list[DsePoint]]:
    lines: dict[float, list[DsePoint]] = {}
    for p in grid.points:
        lines.setdefault(round(p.area_mm2, 6), []).append(p)
    return lines


def _fmt(v: float) -> str:
    return "nan" if v != v else f"{v:.6g}"


def dse_csv(grid: DseGrid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in grid.points:
        w.writerow([_fmt(p.area_mm2), _fmt(p.mem_fraction), p.pe_count, _fmt(p.onchip_bytes / MiB),
                    _fmt(p.bw_Bps / GB), p.n_splits, p.cycles, _fmt(p.latency_ms), _fmt(p.speedup),
                    p.status])
    return buf.getvalue()


def contour_data(grid: DseGrid) -> str:
    """gnuplot ``splot``-ready blocks: one iso-area line per block, blank-line separated.

    Columns: area_mm2 mem_fraction latency_ms; infeasible points carry NaN.
    """
    lines = ["# area_mm2 mem_fraction latency_ms"]
    for area, pts in iso_area_lines(grid).items():
        for p in pts:
            lines.append(f"{_fmt(p.area_mm2)} {_fmt(p.mem_fraction)} {_fmt(p.latency_ms)}")
        lines.append("")
    return "\n".join(lines) + "\n"
