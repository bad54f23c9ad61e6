"""Exact inter-tile dependency inference.

Each tensor carries a *producer map*: an array holding, for every element,
the set of producing tiles.  Sets are Python ``int`` bitmasks in numpy
object arrays, so unions are ``|`` and reductions are
``np.bitwise_or.reduce``.  An axis of size 1 on a map of larger extent is
*collapsed*: the cell contents are uniform along it.  Collapsed axes are
what keeps full-size models tractable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import GraphError
from .graph import (EW_KINDS, UNARY_KINDS, OpNode, TensorSpec, WorkloadGraph,
                    topo_order)

# largest uncollapsed extent allowed for dims other than L
GUARD_EXTENT = 64

Tiling = Mapping[int, Mapping[str, int]]


class TileId(NamedTuple):
    op: int
    index: tuple[int, ...] = ()


def tile_of(e: int, extent: int, factor: int) -> int:
    """Tile holding element ``e`` when ``extent`` is cut into ``factor`` near-equal parts."""
    return e * factor // extent


def tile_range(extent: int, factor: int, i: int) -> tuple[int, int]:
    """Half-open element range of tile ``i``; the inverse of ``tile_of``."""
    return -(-i * extent // factor), -(-(i + 1) * extent // factor)


def split_bounds(extent: int, factor: int) -> list[tuple[int, int]]:
    """Half-open element ranges of each tile; the largest is ceil(extent/factor)."""
    if not 1 <= factor <= extent:
        raise GraphError(f"split factor {factor} out of range for extent {extent}")
    return [tile_range(extent, factor, i) for i in range(factor)]


def split_dims(t: TensorSpec, factors: Mapping[str, int] | None) -> list[tuple[int, int]]:
    """(axis, factor) of every split axis of ``t``, in axis order."""
    factors = factors or {}
    unknown = set(factors) - set(t.labels)
    if unknown:
        raise GraphError(f"tiling references dims {sorted(unknown)} absent from tensor {t.id}")
    for lab, e in t.dims:
        if not 1 <= factors.get(lab, 1) <= e:
            raise GraphError(f"split factor {factors[lab]} out of range for {lab}={e}")
    return [(ax, factors[lab]) for ax, lab in enumerate(t.labels) if factors.get(lab, 1) > 1]


def tiles_of(t: TensorSpec, factors: Mapping[str, int] | None) -> list[tuple[int, ...]]:
    sd = split_dims(t, factors)
    return [tuple(ix) for ix in np.ndindex(*[f for _, f in sd])] if sd else [()]


def tile_box(t: TensorSpec, factors: Mapping[str, int] | None,
             index: tuple[int, ...]) -> list[tuple[int, int]]:
    """Element box (per-axis half-open ranges) covered by one tile."""
    box = [(0, e) for e in t.shape]
    for (ax, f), i in zip(split_dims(t, factors), index):
        if not 0 <= i < f:
            raise GraphError(f"tile index {index} out of range for tensor {t.id}")
        box[ax] = tile_range(t.shape[ax], f, i)
    return box


class TileIndexer:
    """Assigns each tile a bit position; op tiles occupy a contiguous block."""

    def __init__(self) -> None:
        self._base: dict[int, int] = {}
        self._shape: dict[int, tuple[int, ...]] = {}
        self._ops: list[int] = []
        self._next = 0

    def register(self, op: int, grid: tuple[int, ...]) -> int:
        if op not in self._base:
            self._base[op] = self._next
            self._shape[op] = grid
            self._ops.append(op)
            self._next += math.prod(grid)
        return self._base[op]

    def bit(self, tile: TileId) -> int:
        grid = self._shape[tile.op]
        flat = int(np.ravel_multi_index(tile.index, grid)) if grid else 0
        return self._base[tile.op] + flat

    def decode(self, mask: int) -> Iterator[TileId]:
        while mask:
            low = mask & -mask
            b = low.bit_length() - 1
            mask ^= low
            # ops are few; linear scan from the back is fine
            for op in reversed(self._ops):
                if self._base[op] <= b:
                    grid = self._shape[op]
                    flat = b - self._base[op]
                    idx = tuple(int(i) for i in np.unravel_index(flat, grid)) if grid else ()
                    yield TileId(op, idx)
                    break


@dataclass(frozen=True)
class ProducerMap:
    tensor: int
    dims: tuple[tuple[str, int], ...]
    cells: np.ndarray

    @property
    def collapsed_dims(self) -> frozenset[str]:
        return frozenset(lab for (lab, e), s in zip(self.dims, self.cells.shape) if s == 1 and e > 1)

    def expanded(self) -> np.ndarray:
        """Full-extent copy of the cell array."""
        return np.broadcast_to(self.cells, tuple(e for _, e in self.dims)).copy()

    def cell(self, index: Sequence[int]) -> int:
        return self.cells[tuple(i if s > 1 else 0 for i, s in zip(index, self.cells.shape))]


# ---------------------------------------------------------------------------
# helpers on cell arrays
# ---------------------------------------------------------------------------

def _obj(shape: tuple[int, ...], value: int = 0) -> np.ndarray:
    a = np.empty(shape, dtype=object)
    a.fill(value)
    return a


def _or(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.bitwise_or(a, b, dtype=object)


def _reduce(a: np.ndarray, axis, keepdims: bool = False) -> np.ndarray:
    r = np.bitwise_or.reduce(a, axis=axis, keepdims=keepdims, dtype=object)
    return r if isinstance(r, np.ndarray) else _scalar(r)


def _scalar(v: int) -> np.ndarray:
    a = np.empty((), dtype=object)
    a[()] = v
    return a


def _recollapse(a: np.ndarray) -> np.ndarray:
    # heuristic: an axis whose slices are all identical carries no information
    for ax in range(a.ndim):
        if a.shape[ax] > 1:
            first = a.take([0], axis=ax)
            if bool(np.all(a == first)):
                a = first
    return a


def _guard(dims: Sequence[tuple[str, int]], shape: tuple[int, ...]) -> None:
    for (lab, e), s in zip(dims, shape):
        if s > 1 and lab != "L" and s > GUARD_EXTENT:
            raise GraphError(
                f"memory guard: dimension {lab} ({e}) would be tracked uncollapsed; "
                f"use extents <= {GUARD_EXTENT} or tile only along L")


def _make(tensor: TensorSpec, cells: np.ndarray) -> ProducerMap:
    cells = _recollapse(cells)
    _guard(tensor.dims, cells.shape)
    return ProducerMap(tensor.id, tensor.dims, cells)


def _align(m: ProducerMap, out_labels: Sequence[str]) -> np.ndarray:
    """Reduce labels absent from the output and arrange the rest in output order."""
    labels = [lab for lab, _ in m.dims]
    cells = m.cells
    drop = tuple(i for i, lab in enumerate(labels) if lab not in out_labels)
    if drop:
        cells = _reduce(cells, drop)
        labels = [lab for i, lab in enumerate(labels) if i not in drop]
    perm = sorted(range(len(labels)), key=lambda i: out_labels.index(labels[i]))
    cells = cells.transpose(perm) if cells.ndim else cells
    labels = [labels[i] for i in perm]
    shape = [1] * len(out_labels)
    for lab, s in zip(labels, cells.shape):
        shape[out_labels.index(lab)] = s
    return cells.reshape(shape)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def init_map(tensor: TensorSpec, factors: Mapping[str, int] | None, op: int,
             indexer: TileIndexer) -> ProducerMap:
    """Producer map of ``tensor`` produced tile-wise by ``op``."""
    sd = split_dims(tensor, factors)
    grid = tuple(f for _, f in sd)
    base = indexer.register(op, grid)
    shape = [1] * len(tensor.dims)
    for ax, _ in sd:
        shape[ax] = tensor.shape[ax]
    flat = np.zeros(shape, dtype=np.int64)
    stride = 1
    for (ax, f) in reversed(sd):
        idx = np.arange(tensor.shape[ax], dtype=np.int64) * f // tensor.shape[ax]
        view = [1] * len(shape)
        view[ax] = tensor.shape[ax]
        flat = flat + idx.reshape(view) * stride
        stride *= f
    cells = np.frompyfunc(lambda v: 1 << (base + int(v)), 1, 1)(flat).astype(object)
    if cells.ndim == 0:
        cells = _scalar(int(cells))
    _guard(tensor.dims, cells.shape)
    return ProducerMap(tensor.id, tensor.dims, cells)


def input_map(tensor: TensorSpec) -> ProducerMap:
    """Graph inputs have no producing tile."""
    return ProducerMap(tensor.id, tensor.dims, _obj((1,) * len(tensor.dims)))


def propagate(op: OpNode, maps: Sequence[ProducerMap],
              tensors: Mapping[int, TensorSpec]) -> list[ProducerMap]:
    """Push input maps through ``op``.

    For data-movement kinds the result is the producer map of each output.
    For compute kinds it is the dependency map of the output: each cell is
    the union of producer cells over every input element the output element
    reads.
    """
    k, a = op.kind, op.attrs
    outs = [tensors[o] for o in op.outputs]
    out = outs[0]
    if k in UNARY_KINDS or k in EW_KINDS or k in ("OuterProduct", "Einsum"):
        labels = list(out.labels)
        acc = _obj((1,) * len(labels))
        for m in maps:
            acc = _or(acc, _align(m, labels))
        return [_make(out, acc)]
    if k == "MatMul":
        lm, rm = maps
        left = _reduce(lm.cells, lm.cells.ndim - 1)
        right = _reduce(rm.cells, 0)
        left = left.reshape(left.shape + (1,) * right.ndim)
        right = right.reshape((1,) * (left.ndim - right.ndim) + right.shape)
        return [_make(out, _or(left, right))]
    if k == "ReduceSum":
        return [_make(out, _reduce(maps[0].cells, a["axis"]))]
    if k == "Softmax":
        return [_make(out, _reduce(maps[0].cells, a["axis"], keepdims=True))]
    if k == "RMSNorm":
        acc = _reduce(maps[0].cells, maps[0].cells.ndim - 1, keepdims=True)
        if len(maps) > 1:
            w = maps[1].cells
            acc = _or(acc, w.reshape((1,) * (acc.ndim - 1) + w.shape))
        return [_make(out, acc)]
    if k == "Conv1dDepthwise":
        xm, wm = maps
        x = xm.cells
        ax = x.ndim - 2
        if x.shape[ax] == 1:
            acc = x
        else:
            acc = x.copy()
            n = x.shape[ax]
            for j in range(1, min(a["kernel"], n)):
                shifted = _obj(x.shape)
                dst = [slice(None)] * x.ndim
                src = [slice(None)] * x.ndim
                dst[ax], src[ax] = slice(j, n), slice(0, n - j)
                shifted[tuple(dst)] = x[tuple(src)]
                acc = _or(acc, shifted)
        w = _reduce(wm.cells, 1)
        acc = _or(acc, w.reshape((1,) * (acc.ndim - 1) + w.shape))
        return [_make(out, acc)]
    if k == "Slice":
        cells = maps[0].cells
        ax = a["axis"]
        i = a["index"] if cells.shape[ax] > 1 else 0
        return [_make(out, cells.take(i, axis=ax))]
    if k == "Split":
        cells = maps[0].cells
        ax = a["axis"]
        res, lo = [], 0
        for o, size in zip(outs, a["sizes"]):
            part = cells if cells.shape[ax] == 1 else cells.take(range(lo, lo + size), axis=ax)
            res.append(_make(o, part))
            lo += size
        return res
    if k == "Concat":
        ax = a["axis"]
        # parts may be collapsed along different off-axis dims
        common = [max(m.cells.shape[i] for m in maps) for i in range(len(out.dims))]
        parts = []
        for m in maps:
            shape = list(common)
            shape[ax] = m.dims[ax][1]
            parts.append(np.broadcast_to(m.cells, shape))
        return [_make(out, np.concatenate(parts, axis=ax))]
    if k == "Transpose":
        return [_make(out, maps[0].cells.transpose(a["perm"]))]
    if k == "Reshape":
        m = maps[0]
        src = [d for d in m.dims if d[1] > 1]
        dst = [d for d in out.dims if d[1] > 1]
        if [e for _, e in src] == [e for _, e in dst]:
            # only unit dims inserted or removed: keep collapsed axes
            core = m.cells.reshape([s for (_, e), s in zip(m.dims, m.cells.shape) if e > 1])
            it = iter(core.shape)
            return [_make(out, core.reshape([next(it) if e > 1 else 1 for _, e in out.dims]))]
        _guard(m.dims, tuple(e for _, e in m.dims))
        return [_make(out, m.expanded().reshape(out.shape))]
    raise GraphError(f"unsupported kind for dependency propagation: {k}")


def _tile_mask(dep: ProducerMap, box: Sequence[tuple[int, int]]) -> int:
    sl = tuple(slice(lo, hi) if s > 1 else slice(0, 1) for (lo, hi), s in zip(box, dep.cells.shape))
    region = dep.cells[sl]
    if region.ndim == 0:
        return int(region)
    return int(_reduce(region.reshape(-1), 0))


@dataclass
class TileGraph:
    edges: set[tuple[TileId, TileId]]
    tiles: list[TileId]


def infer_tile_deps(graph: WorkloadGraph, tiling: Tiling) -> TileGraph:
    """Exact consumer→producer tile edges for ``graph`` tiled per ``tiling``.

    ``tiling`` maps the output tensor of each compute op to split factors by
    dim label; absent tensors are untiled.  Data-movement ops are views and
    never form tiles.
    """
    indexer = TileIndexer()
    maps: dict[int, ProducerMap] = {t: input_map(graph.tensors[t]) for t in graph.inputs()}
    edges: set[tuple[TileId, TileId]] = set()
    tiles: list[TileId] = []
    for op in topo_order(graph):
        res = propagate(op, [maps[t] for t in op.inputs], graph.tensors)
        if op.is_movement:
            for o, m in zip(op.outputs, res):
                maps[o] = m
            continue
        out = graph.tensors[op.output]
        factors = tiling.get(out.id)
        dep = res[0]
        for idx in tiles_of(out, factors):
            tile = TileId(op.id, idx)
            tiles.append(tile)
            mask = _tile_mask(dep, tile_box(out, factors, idx))
            for p in indexer.decode(mask):
                edges.add((tile, p))
        maps[out.id] = init_map(out, factors, op.id, indexer)
    return TileGraph(edges, tiles)


def to_dot(tg: TileGraph, graph: WorkloadGraph | None = None) -> str:
    """DOT text of the tile graph (producer -> consumer)."""

    def name(t: TileId) -> str:
        label = graph.tensors[graph.ops[t.op].outputs[0]].name if graph else f"op{t.op}"
        return f'"{label}[{",".join(map(str, t.index))}]"'

    lines = ["digraph tiles {"]
    for t in tg.tiles:
        lines.append(f"  {name(t)};")
    for c, p in sorted(tg.edges):
        lines.append(f"  {name(p)} -> {name(c)};")
    lines.append("}")
    return "\n".join(lines) + "\n"
