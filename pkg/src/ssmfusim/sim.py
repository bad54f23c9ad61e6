"""Tile-schedule simulator: compute time, off-chip traffic and on-chip residency.

Memory is managed in *units*: one unit per tile of a tiled tensor, one per
untiled tensor.  Groups of steps overlap compute with transfer (double
buffering), so a group costs max(compute, transfer) cycles.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

from .deps import split_dims, tile_box, tile_of, tile_range
from .errors import InfeasibleError
from .fusion import FusionScheme, Schedule, generate_schedule, scheme as make_scheme
from .graph import OpNode, TensorSpec, WorkloadGraph, op_count
from .hardware import AcceleratorConfig
from .models import TRANSIENT_ROLES

Box = list[tuple[int, int]]
Unit = tuple[int, tuple[int, ...]]

# reductions spread their work over input elements, not output elements
_REDUCING = frozenset({"ReduceSum", "Softmax", "RMSNorm"})


# ---------------------------------------------------------------------------
# compute model
# ---------------------------------------------------------------------------

def tile_compute_cycles(ops: int, parallel_extent: int, kind: str, cfg: AcceleratorConfig) -> int:
    """ceil(ops / (effective parallelism * ops per PE per cycle)) * CPO."""
    if ops <= 0:
        return 0
    par = min(cfg.pe_count, max(1, parallel_extent))
    rate = Fraction(cfg.macs_per_pe_per_cycle)
    num, den = ops * rate.denominator, par * rate.numerator
    return -(-num // den) * cfg.cycles_per_op(kind)


def ideal_compute_cycles(ops: int, kind: str, cfg: AcceleratorConfig) -> float:
    """Cycles with every PE busy; the numerator of utilization."""
    return float(ops * cfg.cycles_per_op(kind) / cfg.ops_per_cycle)


# ---------------------------------------------------------------------------
# footprints
# ---------------------------------------------------------------------------

def _numel(box: Box) -> int:
    return math.prod(hi - lo for lo, hi in box)


def input_boxes(op: OpNode, out_box: Box, graph: WorkloadGraph) -> list[tuple[int, Box]]:
    """Element boxes of each input read to produce ``out_box`` of the output."""
    ins = [graph.tensors[i] for i in op.inputs]
    out = graph.tensors[op.outputs[0]]
    k, a = op.kind, op.attrs
    pos = {lab: r for (lab, _), r in zip(out.dims, out_box)}
    res = []
    if k == "MatMul":
        left, right = ins
        nl = len(left.dims) - 1
        res.append((left.id, list(out_box[:nl]) + [(0, left.shape[-1])]))
        res.append((right.id, [(0, right.shape[0])] + list(out_box[nl:])))
    elif k == "ReduceSum":
        ax = a["axis"]
        res.append((ins[0].id, list(out_box[:ax]) + [(0, ins[0].shape[ax])] + list(out_box[ax:])))
    elif k in ("Softmax", "RMSNorm"):
        ax = a["axis"] if k == "Softmax" else len(out_box) - 1
        box = list(out_box)
        box[ax] = (0, ins[0].shape[ax])
        res.append((ins[0].id, box))
        if k == "RMSNorm" and len(ins) > 1:
            res.append((ins[1].id, [out_box[-1]]))
    elif k == "Conv1dDepthwise":
        x, w = ins
        box = list(out_box)
        ax = len(box) - 2
        lo, hi = box[ax]
        box[ax] = (max(0, lo - a["kernel"] + 1), hi)
        res.append((x.id, box))
        res.append((w.id, [out_box[-1], (0, a["kernel"])]))
    else:
        for t in ins:
            res.append((t.id, [pos.get(lab, (0, e)) for lab, e in t.dims]))
    return res


def resolve_box(graph: WorkloadGraph, tid: int, box: Box) -> list[tuple[int, Box]]:
    """Map a box of a view back onto the compute outputs or graph inputs holding it."""
    pid = graph.producer(tid)
    if pid is None or not graph.ops[pid].is_movement:
        return [(tid, box)]
    op = graph.ops[pid]
    a = op.attrs
    src = graph.tensors[op.inputs[0]]
    if op.kind == "Slice":
        ax, i = a["axis"], a["index"]
        return resolve_box(graph, src.id, box[:ax] + [(i, i + 1)] + box[ax:])
    if op.kind == "Split":
        ax = a["axis"]
        off = sum(a["sizes"][:op.outputs.index(tid)])
        nb = list(box)
        nb[ax] = (box[ax][0] + off, box[ax][1] + off)
        return resolve_box(graph, src.id, nb)
    if op.kind == "Transpose":
        nb = [(0, 0)] * len(box)
        for j, p in enumerate(a["perm"]):
            nb[p] = box[j]
        return resolve_box(graph, src.id, nb)
    if op.kind == "Concat":
        ax = a["axis"]
        out, off = [], 0
        lo, hi = box[ax]
        for part in op.inputs:
            e = graph.tensors[part].shape[ax]
            plo, phi = max(lo, off), min(hi, off + e)
            if plo < phi:
                nb = list(box)
                nb[ax] = (plo - off, phi - off)
                out.extend(resolve_box(graph, part, nb))
            off += e
        return out
    # Reshape: exact when only unit dims change, otherwise the whole source
    dst = graph.tensors[tid]
    src_core = [i for i, e in enumerate(src.shape) if e > 1]
    dst_core = [i for i, e in enumerate(dst.shape) if e > 1]
    if [src.shape[i] for i in src_core] == [dst.shape[i] for i in dst_core]:
        nb = [(0, 1)] * len(src.shape)
        for si, di in zip(src_core, dst_core):
            nb[si] = box[di]
        return resolve_box(graph, src.id, nb)
    return resolve_box(graph, src.id, [(0, e) for e in src.shape])


def _units_of(t: TensorSpec, sd: list[tuple[int, int]], box: Box) -> list[tuple[Unit, int, bool]]:
    """(unit, bytes read, whole unit read) for every unit overlapping ``box``.

    ``sd`` lists the (axis, factor) splits of ``t``.
    """
    per_axis = []
    for ax, f in sd:
        lo, hi = box[ax]
        e = t.shape[ax]
        hits = [(i, tile_range(e, f, i)) for i in range(tile_of(lo, e, f), tile_of(hi - 1, e, f) + 1)]
        per_axis.append(hits)
    res = []
    bpe = t.element_bits // 8

    def rec(j: int, idx: list[int], bx: Box, full: bool) -> None:
        if j == len(sd):
            res.append(((t.id, tuple(idx)), _numel(bx) * bpe, full))
            return
        ax = sd[j][0]
        for i, (blo, bhi) in per_axis[j]:
            nb = list(bx)
            lo, hi = max(blo, bx[ax][0]), min(bhi, bx[ax][1])
            nb[ax] = (lo, hi)
            rec(j + 1, idx + [i], nb, full and lo == blo and hi == bhi)

    whole = all(box[ax] == (0, e) for ax, e in enumerate(t.shape) if ax not in {a for a, _ in sd})
    rec(0, [], list(box), whole)
    return res


@dataclass
class _StepInfo:
    label: str
    op: OpNode
    group: int
    fused: bool
    reads: list[tuple[Unit, int, bool]]
    out_unit: Unit
    out_bytes: int
    ops: int
    parallel: int
    matmul: tuple[int, int, int, int] | None = None  # M, K, P, bytes per element


def _step_infos(sched: Schedule) -> list[_StepInfo]:
    g = sched.graph
    infos = []
    sd_cache: dict[int, list[tuple[int, int]]] = {}

    def sd_of(t: TensorSpec) -> list[tuple[int, int]]:
        if t.id not in sd_cache:
            sd_cache[t.id] = split_dims(t, sched.tiling.get(t.id))
        return sd_cache[t.id]

    counts: dict[int, int] = {}
    for s in sched.steps:
        op = g.ops[s.tile.op]
        out = g.tensors[op.outputs[0]]
        f = sched.tiling.get(out.id)
        box = tile_box(out, f, s.tile.index)
        n_out = _numel(box)
        if op.id not in counts:
            counts[op.id] = op_count(op, g.tensors)
        ops = counts[op.id] * n_out // out.numel
        par = n_out
        if op.kind in _REDUCING:
            par = n_out * g.tensors[op.inputs[0]].numel // out.numel
        reads: dict[Unit, list] = {}
        for tid, ibox in input_boxes(op, box, g):
            for root, rbox in resolve_box(g, tid, ibox):
                rt = g.tensors[root]
                for unit, nb, full in _units_of(rt, sd_of(rt), rbox):
                    if unit in reads:
                        reads[unit][0] = min(reads[unit][0] + nb, _unit_bytes(g, sched, unit))
                        reads[unit][1] = reads[unit][1] or full
                    else:
                        reads[unit] = [nb, full]
        mm = None
        if op.kind == "MatMul" and not s.fused:
            left, right = (g.tensors[i] for i in op.inputs)
            K = left.shape[-1]
            mm = (left.numel // K, K, right.numel // K, left.element_bits // 8)
        label = out.name + ("[" + ",".join(map(str, s.tile.index)) + "]" if s.tile.index else "")
        infos.append(_StepInfo(label, op, s.group, s.fused,
                               [(u, v[0], v[1]) for u, v in reads.items()],
                               (out.id, s.tile.index), n_out * out.element_bits // 8, ops, par, mm))
    return infos


def _unit_bytes(g: WorkloadGraph, sched: Schedule, unit: Unit) -> int:
    t = g.tensors[unit[0]]
    return _numel(tile_box(t, sched.tiling.get(t.id), unit[1])) * t.element_bits // 8


# ---------------------------------------------------------------------------
# matmul streaming
# ---------------------------------------------------------------------------

def _halvings(n: int) -> list[int]:
    out = [n]
    while n > 1:
        n = -(-n // 2)
        out.append(n)
    return out


@lru_cache(maxsize=4096)
def matmul_traffic(M: int, K: int, P: int, bpe: int, free_bytes: int) -> tuple[int, int]:
    """(input bytes read, weight bytes read) of the cheapest output-stationary tiling.

    Tile sizes are the full extent and its repeated halvings; the working set
    (m·k + k·p + m·p elements) must fit in ``free_bytes``.
    """
    best = None
    for m in _halvings(M):
        for k in _halvings(K):
            for p in _halvings(P):
                if (m * k + k * p + m * p) * bpe > free_bytes:
                    continue
                ins = M * K if (p == P or (m == M and k == K)) else M * K * -(-P // p)
                w = K * P if (m == M or (p == P and k == K)) else K * P * -(-M // m)
                key = (ins + w, -m, -p, -k)
                if best is None or key < best[0]:
                    best = (key, ins * bpe, w * bpe)
    if best is None:
        raise InfeasibleError(f"matmul {M}x{K}x{P} has no tile fitting {free_bytes} B")
    return best[1], best[2]


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class TimelineEntry:
    tile: str
    start_cycle: int
    end_cycle: int
    compute_cycles: int
    transfer_cycles: float
    op_class: str
    offchip_bytes: int


@dataclass
class SimReport:
    scheme: str
    n_splits: int
    capacity_bytes: int
    total_cycles: int = 0
    cycles_by_class: dict[str, float] = field(default_factory=dict)
    offchip_bytes_read: int = 0
    offchip_bytes_written: int = 0
    peak_onchip_bytes: int = 0
    utilization_by_class: dict[str, float] = field(default_factory=dict)
    # off-chip traffic (reads + writes) per tensor role; untagged tensors under "other"
    offchip_bytes_by_role: dict[str, int] = field(default_factory=dict)
    timeline: list[TimelineEntry] = field(default_factory=list)

    @property
    def offchip_bytes(self) -> int:
        return self.offchip_bytes_read + self.offchip_bytes_written

    def to_dict(self, timeline: bool = False) -> dict:
        d = asdict(self)
        d["cycles_by_class"] = {k: round(v, 3) for k, v in sorted(self.cycles_by_class.items())}
        d["utilization_by_class"] = {k: round(v, 6) for k, v in sorted(self.utilization_by_class.items())}
        # bytes shared by a group are attributed pro rata, so round to whole bytes
        d["offchip_bytes_by_role"] = {k: round(v) for k, v in sorted(self.offchip_bytes_by_role.items())}
        if not timeline:
            d.pop("timeline")
        return d

    def to_json(self, timeline: bool = False) -> str:
        return json.dumps(self.to_dict(timeline), indent=2, sort_keys=True) + "\n"

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tile", "start_cycle", "end_cycle", "class", "offchip_bytes"])
        for e in self.timeline:
            w.writerow([e.tile, e.start_cycle, e.end_cycle, e.op_class, e.offchip_bytes])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

class _Memory:
    """Resident units with furthest-next-use eviction."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.size: dict[Unit, int] = {}
        self.dirty: set[Unit] = set()
        self.total = 0

    def __contains__(self, u: Unit) -> bool:
        return u in self.size

    def add(self, u: Unit, nbytes: int, dirty: bool) -> None:
        self.size[u] = nbytes
        self.total += nbytes
        if dirty:
            self.dirty.add(u)

    def drop(self, u: Unit) -> tuple[int, bool]:
        nb = self.size.pop(u)
        self.total -= nb
        was_dirty = u in self.dirty
        self.dirty.discard(u)
        return nb, was_dirty


def simulate(schedule: Schedule, cfg: AcceleratorConfig, timeline: bool = True) -> SimReport:
    """Run ``schedule`` on ``cfg`` and report cycles, traffic and utilization."""
    cfg.validate()
    g = schedule.graph
    sch = schedule.scheme
    # footprints depend only on the schedule; reuse them across hardware points
    infos = schedule.__dict__.get("_sim_infos")
    if infos is None:
        infos = schedule.__dict__["_sim_infos"] = _step_infos(schedule)
    rep = SimReport(sch.name, sch.d_split_factor, cfg.onchip_bytes)
    if not infos:
        return rep

    local_roles = sch.local_roles | TRANSIENT_ROLES
    bpc = Fraction(cfg.offchip_Bps) / Fraction(cfg.clock_hz)
    bpf = float(bpc)

    def is_local(tid: int) -> bool:
        return g.tensors[tid].role in local_roles

    def is_weight(tid: int) -> bool:
        return g.tensors[tid].kind == "weight"

    def zero_init(tid: int) -> bool:
        # prefill starts from an all-zero state, created on chip rather than fetched
        t = g.tensors[tid]
        return g.stage == "prefill" and t.kind == "state" and g.producer(tid) is None

    def role_of(tid: int) -> str:
        t = g.tensors[tid]
        return t.role or ("weight" if t.kind == "weight" else "other")

    uses: dict[Unit, list[int]] = {}
    for i, s in enumerate(infos):
        for u, _, _ in s.reads:
            lst = uses.setdefault(u, [])
            if not lst or lst[-1] != i:
                lst.append(i)
    ptr: dict[Unit, int] = {u: 0 for u in uses}
    never = len(infos)

    def next_use(u: Unit, i: int) -> int:
        lst = uses.get(u)
        if not lst:
            return never
        p = ptr[u]
        while p < len(lst) and lst[p] <= i:
            p += 1
        ptr[u] = p
        return lst[p] if p < len(lst) else never

    mem = _Memory(cfg.onchip_bytes)
    by_role: dict[str, int] = {}
    ideal: dict[str, float] = {}
    cls_cycles: dict[str, float] = {}
    peak = 0
    clock = 0
    # (step, compute cycles, transfer bytes)
    group: list[tuple[_StepInfo, int, int]] = []

    def traffic(tid: int, nbytes: int) -> None:
        if nbytes:
            r = role_of(tid)
            by_role[r] = by_role.get(r, 0) + nbytes

    def close_group() -> None:
        nonlocal clock
        comp = sum(c for _, c, _ in group)
        nbytes = sum(b for _, _, b in group)
        lat = math.ceil(max(Fraction(comp), nbytes / bpc))
        weights = [max(float(c), b / bpf) for _, c, b in group]
        wsum = sum(weights)
        start = float(clock)
        for (s, c, nb), w in zip(group, weights):
            share = lat * w / wsum if wsum else lat / len(group)
            cls = s.op.op_class
            cls_cycles[cls] = cls_cycles.get(cls, 0.0) + share
            if timeline:
                rep.timeline.append(TimelineEntry(s.label, math.floor(start), math.floor(start + share),
                                                  c, nb / bpf, cls, nb))
            start += share
        clock += lat
        group.clear()

    for i, s in enumerate(infos):
        if group and group[-1][0].group != s.group:
            close_group()
        rd = wr = 0
        pinned = {s.out_unit} | {u for u, _, _ in s.reads}
        keep: list[tuple[Unit, int]] = []
        streamed = 0

        if s.matmul is not None:
            M, K, P, bpe = s.matmul
            left, right = (r for r in s.op.inputs)
            in_units = [r for r in s.reads]
            resident = {u for u, _, _ in in_units if u in mem}
            free = max(0, cfg.onchip_bytes - mem.total)
            ins_b, w_b = matmul_traffic(M, K, P, bpe, free)
            lroots = {u for u, _, _ in in_units if _reaches(g, left, u[0])}
            rroots = {u for u, _, _ in in_units if u not in lroots}
            if not lroots or not (lroots <= resident):
                rd += ins_b
                for u in lroots:
                    traffic(u[0], ins_b * _share(in_units, u, lroots))
            if not rroots or not (rroots <= resident):
                rd += w_b
                for u in rroots:
                    traffic(u[0], w_b * _share(in_units, u, rroots))
        else:
            for u, nb, full in s.reads:
                if u in mem:
                    continue
                if not zero_init(u[0]):
                    rd += nb
                    traffic(u[0], nb)
                nu = next_use(u, i)
                if s.fused and full and nu < never and (
                        is_weight(u[0]) or is_local(u[0]) or infos[nu].group == s.group):
                    keep.append((u, _unit_bytes(g, schedule, u)))
                else:
                    streamed += nb

        out_tid = s.out_unit[0]
        out_local = is_local(out_tid)
        if not out_local or out_tid in g.outputs:
            wr += s.out_bytes
            traffic(out_tid, s.out_bytes)
        nu_out = next_use(s.out_unit, i)
        if s.fused and nu_out < never and (out_local or infos[nu_out].group == s.group):
            keep.append((s.out_unit, s.out_bytes))
        elif not s.fused:
            streamed = 0  # whole-tensor ops stream through staging buffers

        if s.fused:
            need = sum(nb for _, nb in keep) + streamed + sum(
                mem.size[u] for u in pinned if u in mem)
            if need > cfg.onchip_bytes:
                raise InfeasibleError(
                    f"step {s.label} needs {need} B on chip, capacity is {cfg.onchip_bytes} B")
            while mem.total + sum(nb for _, nb in keep) + streamed > cfg.onchip_bytes:
                victim = max((u for u in mem.size if u not in pinned),
                             key=lambda u: (next_use(u, i), u))
                nb, dirty = mem.drop(victim)
                if dirty:
                    wr += nb
                    traffic(victim[0], nb)
            for u, nb in keep:
                mem.add(u, nb, dirty=(u == s.out_unit and out_local and out_tid not in g.outputs))
            peak = max(peak, mem.total + streamed)

        # release units with no further use on chip
        for u in pinned:
            if u not in mem:
                continue
            nu = next_use(u, i)
            if nu == never or (not is_local(u[0]) and not is_weight(u[0]) and infos[nu].group != s.group):
                mem.drop(u)

        rep.offchip_bytes_read += rd
        rep.offchip_bytes_written += wr
        c = tile_compute_cycles(s.ops, s.parallel, s.op.kind, cfg)
        cls = s.op.op_class
        ideal[cls] = ideal.get(cls, 0.0) + s.ops * cfg.cycles_per_op(s.op.kind)
        group.append((s, c, rd + wr))
    close_group()

    rep.total_cycles = clock
    rep.cycles_by_class = cls_cycles
    opc = float(cfg.ops_per_cycle)
    rep.utilization_by_class = {k: (min(1.0, ideal.get(k, 0.0) / opc / v) if v else 0.0)
                                for k, v in cls_cycles.items()}
    rep.peak_onchip_bytes = peak
    rep.offchip_bytes_by_role = by_role
    return rep


def _reaches(g: WorkloadGraph, tid: int, root: int) -> bool:
    """Whether ``root`` is ``tid`` or lies upstream of it through views only."""
    while True:
        if tid == root:
            return True
        p = g.producer(tid)
        if p is None or not g.ops[p].is_movement:
            return False
        tid = g.ops[p].inputs[0]


def _share(units, u, group) -> float:
    tot = sum(nb for v, nb, _ in units if v in group)
    return next(nb for v, nb, _ in units if v == u) / tot if tot else 0.0


# ---------------------------------------------------------------------------
# memory sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    capacity_bytes: int
    n_splits: int
    total_cycles: int
    offchip_bytes: int


def ssm_dims(graph: WorkloadGraph) -> tuple[int, int, int]:
    """(D, N, element_bits) of the state-update block, read off the A weight."""
    a = graph.by_role("A")
    if not a:
        raise InfeasibleError("graph has no state-update block")
    t = a[0]
    return t.extent("D"), t.extent("N"), t.element_bits


def schedule_for(graph: WorkloadGraph, scheme_name: str, capacity: int) -> Schedule:
    """Schedule of a named scheme; MA-All sizes its D-split from ``capacity``."""
    from .models import MambaConfig

    name = scheme_name
    if name.lower() == "ma-all":
        D, N, bits = ssm_dims(graph)
        # only D, N and bits matter for the split
        cfg = MambaConfig(d_model=D, expand=1, N=N, element_bits=bits)
        sch = make_scheme(name, cfg, capacity)
    else:
        sch = make_scheme(name)
    return generate_schedule(graph, sch)


def memory_sweep(graph: WorkloadGraph, scheme: FusionScheme | str, cfg: AcceleratorConfig,
                 capacities: Sequence[int]) -> list[SweepPoint]:
    """Simulate at each capacity (descending); MA-All re-derives n per capacity."""
    name = scheme if isinstance(scheme, str) else scheme.name
    fixed = None
    if not isinstance(scheme, str) and scheme.name != "MA-All":
        fixed = generate_schedule(graph, scheme)
    pts = []
    for cap in sorted(capacities, reverse=True):
        sched = fixed or schedule_for(graph, name, cap)
        r = simulate(sched, replace(cfg, onchip_bytes=int(cap)), timeline=False)
        pts.append(SweepPoint(int(cap), r.n_splits, r.total_cycles, r.offchip_bytes))
    return pts
