"""Fusion schemes, memory-aware D-splits and tile schedules for the state update."""
from __future__ import annotations

from dataclasses import dataclass, field

from .deps import TileId, infer_tile_deps, tiles_of
from .errors import ConfigError, GraphError, InfeasibleError
from .graph import WorkloadGraph, topo_order

SCHEME_NAMES = ("UF", "A", "B", "A-B", "AS", "BS", "AS-B", "BS-A", "All", "MA-All")

# Locality column of the scheme table; "h" appears twice (h_{t-1} and h_t)
_LOCAL: dict[str, tuple[str, ...]] = {
    "UF": (),
    "A": ("dA",),
    "B": ("dB",),
    "A-B": ("dA", "dB"),
    "AS": ("dA", "exp_dA", "h", "h"),
    "BS": ("dB", "dBx", "h", "h"),
    "AS-B": ("dA", "exp_dA", "h", "h", "dB"),
    "BS-A": ("dB", "dBx", "h", "h", "dA"),
    "All": ("dA", "exp_dA", "dB", "dBx", "h", "h"),
    "MA-All": ("dA", "exp_dA", "dB", "dBx", "h", "h"),
}

_DISPLAY = {"dA": "ΔA", "exp_dA": "Exp(ΔA)", "dB": "ΔB", "dBx": "ΔBx", "h": "h"}
_FULL_NAMES = {
    "UF": "Unfused", "A": "A-side", "B": "B-side", "A-B": "AB-sides", "AS": "A-state",
    "BS": "B-state", "AS-B": "A-state,B", "BS-A": "B-state,A", "All": "Fuse-All",
    "MA-All": "Mem-Aware",
}


@dataclass(frozen=True)
class FusionScheme:
    name: str
    # multiset of local tensor roles, as listed in the scheme table
    local_tensors: tuple[str, ...] = ()
    l_split: bool = False
    d_split_factor: int = 1

    @property
    def local_roles(self) -> frozenset[str]:
        return frozenset(self.local_tensors)

    @property
    def full_name(self) -> str:
        return _FULL_NAMES[self.name]

    def locality_label(self) -> str:
        if not self.local_tensors:
            return "None"
        out = []
        for r in dict.fromkeys(self.local_tensors):
            c = self.local_tensors.count(r)
            out.append(_DISPLAY[r] + (f" (×{c})" if c > 1 else ""))
        return ", ".join(out)

    def tiles_label(self) -> str:
        if not self.l_split:
            return "None"
        return "nL" if self.name == "MA-All" else "L"


def parse_scheme_name(name: str) -> str:
    for n in SCHEME_NAMES:
        if n.lower() == name.lower():
            return n
    raise ConfigError(f"unknown fusion scheme {name!r}; choose from {', '.join(SCHEME_NAMES)}")


def required_bytes(D: int, N: int, element_bits: int = 32) -> int:
    """On-chip capacity for one token of the fully fused state update."""
    if D < 1 or N < 1:
        raise ConfigError("D and N must be >= 1")
    return (5 * D * N + D) * element_bits // 8


def compute_d_splits(D: int, N: int, element_bits: int, memory_bytes: int) -> int:
    """Smallest number of D-slices whose fused working set fits on chip."""
    if memory_bytes <= 0:
        raise InfeasibleError("no on-chip memory for a fused D-slice")
    if required_bytes(1, N, element_bits) > memory_bytes:
        raise InfeasibleError(
            f"a single D-slice needs {required_bytes(1, N, element_bits)} B, "
            f"only {memory_bytes} B on chip")
    return max(1, -(-required_bytes(D, N, element_bits) // memory_bytes))


def scheme(name: str, cfg=None, memory_bytes: int | None = None) -> FusionScheme:
    """Scheme by name; MA-All needs the model config and memory size to size its D-split."""
    name = parse_scheme_name(name)
    local = _LOCAL[name]
    if name == "UF":
        return FusionScheme("UF")
    n = 1
    if name == "MA-All":
        if cfg is None or memory_bytes is None:
            raise ConfigError("MA-All needs a model config and an on-chip memory size")
        n = compute_d_splits(cfg.D, cfg.N, cfg.element_bits, memory_bytes)
    return FusionScheme(name, local, True, n)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Step:
    tile: TileId
    group: int
    # fused steps keep their data on chip and must fit in capacity
    fused: bool


@dataclass
class Schedule:
    graph: WorkloadGraph
    scheme: FusionScheme
    steps: list[Step]
    # split factors by dim label, keyed by tensor id (compute outputs and pinned inputs)
    tiling: dict[int, dict[str, int]] = field(default_factory=dict)

    @property
    def tiles(self) -> list[TileId]:
        return [s.tile for s in self.steps]

    @property
    def n_groups(self) -> int:
        return self.steps[-1].group + 1 if self.steps else 0


def fused_ops(graph: WorkloadGraph, sch: FusionScheme) -> tuple[list[int], list[int]]:
    """(L-tiled fused ops, per-timestep chain ops), both compute-only."""
    local = sch.local_roles
    tiled, chain = [], []
    for op in topo_order(graph):
        if op.is_movement:
            continue
        if "step" in op.attrs:
            chain.append(op.id)
            continue
        if not sch.l_split:
            continue
        out_role = graph.tensors[op.output].role
        in_roles = {graph.tensors[t].role for t in op.inputs}
        if out_role in local or in_roles & local:
            tiled.append(op.id)
    return tiled, chain


def scheme_tiling(graph: WorkloadGraph, sch: FusionScheme) -> dict[int, dict[str, int]]:
    tiled, chain = fused_ops(graph, sch)
    n = sch.d_split_factor
    til: dict[int, dict[str, int]] = {}
    for o in tiled:
        t = graph.tensors[graph.ops[o].output]
        f = {"L": t.extent("L")} if t.extent("L") and t.extent("L") > 1 else {}
        if n > 1 and t.extent("D"):
            f["D"] = n
        til[t.id] = f
    for o in chain:
        t = graph.tensors[graph.ops[o].output]
        til[t.id] = {"D": n} if n > 1 and t.extent("D") else {}
    if n > 1:
        # weights read by fused ops are pinned one D-slice at a time
        fused = set(tiled) | set(chain)
        for o in fused:
            for i in graph.ops[o].inputs:
                t = graph.tensors[i]
                if graph.producer(i) is None and t.kind == "weight" and t.extent("D"):
                    til[i] = {"D": n}
    return til


def _ancestors(graph: WorkloadGraph, ops: set[int]) -> set[int]:
    seen: set[int] = set()
    stack = list(ops)
    while stack:
        o = stack.pop()
        for t in graph.ops[o].inputs:
            p = graph.producer(t)
            if p is not None and p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def generate_schedule(graph: WorkloadGraph, sch: FusionScheme) -> Schedule:
    """Whole non-fused ops in topological order with the fused block emitted in place.

    The fused block iterates d-slices in the outer loop and timesteps in the
    inner loop; each (d, t) pair is one group holding that timestep's L-tiled
    tiles followed by its chain ops.
    """
    order = [op for op in topo_order(graph) if not op.is_movement]
    tiled, chain = fused_ops(graph, sch)
    fused = set(tiled) | set(chain)
    til = scheme_tiling(graph, sch)
    steps: list[Step] = []
    group = 0

    def whole(op_id: int) -> None:
        nonlocal group
        steps.append(Step(TileId(op_id, ()), group, False))
        group += 1

    if not fused:
        for op in order:
            whole(op.id)
        return Schedule(graph, sch, steps, til)

    anc = {o for o in _ancestors(graph, fused) if not graph.ops[o].is_movement} - fused
    if _ancestors(graph, anc) & fused:
        raise GraphError("dependency cycle among tiles: fused block feeds its own inputs")
    for op in order:
        if op.id in anc:
            whole(op.id)

    by_step: dict[int, list[int]] = {}
    for o in chain:
        by_step.setdefault(graph.ops[o].attrs["step"], []).append(o)
    L = max([graph.tensors[graph.ops[o].output].extent("L") or 1 for o in tiled] + [len(by_step)])
    n = sch.d_split_factor
    for d in range(n):
        for t in range(L):
            for o in tiled:
                out = graph.tensors[graph.ops[o].output]
                f = til.get(out.id, {})
                idx = []
                for lab, _ in out.dims:
                    if f.get(lab, 1) > 1:
                        idx.append(t if lab == "L" else d)
                steps.append(Step(TileId(o, tuple(idx)), group, True))
            for o in by_step.get(t, []):
                steps.append(Step(TileId(o, (d,) if n > 1 else ()), group, True))
            group += 1

    for op in order:
        if op.id not in anc and op.id not in fused:
            whole(op.id)
    return Schedule(graph, sch, steps, til)


def check_schedule(schedule: Schedule) -> None:
    """Raise GraphError unless the schedule is a topological order of the exact tile graph.

    Needs desk-scale dims (see the dependency tracker's memory guard).
    """
    g = schedule.graph
    tg = infer_tile_deps(g, schedule.tiling)
    pos = {s.tile: i for i, s in enumerate(schedule.steps)}
    if set(pos) != set(tg.tiles) or len(pos) != len(schedule.steps):
        raise GraphError("schedule does not cover every tile exactly once")
    for c, p in tg.edges:
        if pos[p] >= pos[c]:
            raise GraphError(f"tile {c} scheduled before its producer {p}")


def fused_tile_counts(schedule: Schedule) -> dict[str, int]:
    """Tiles per fused tensor, keyed by tensor role (L-tiled tensors only)."""
    g = schedule.graph
    tiled, _ = fused_ops(g, schedule.scheme)
    out = {}
    for o in tiled:
        t = g.tensors[g.ops[o].output]
        out[t.role or t.name] = len(tiles_of(t, schedule.tiling.get(t.id)))
    return out


def scheme_table() -> list[tuple[str, str, str, str]]:
    """(full name, abbreviation, locality, tiles per fused layer) for every scheme."""
    rows = []
    for name in SCHEME_NAMES:
        s = FusionScheme(name, _LOCAL[name], name != "UF", 1)
        rows.append((s.full_name, name, s.locality_label(), s.tiles_label()))
    return rows
