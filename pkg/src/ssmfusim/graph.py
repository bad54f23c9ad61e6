"""Workload IR: tensors, operators and the operator DAG.

Dimensions are ``(label, extent)`` pairs.  Labels carry meaning: elementwise
and outer-product operators broadcast by label, and the dependency tracker
and simulator use labels to line up tiles across operators.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Sequence

from .errors import GraphError

Dim = tuple[str, int]

TENSOR_KINDS = ("weight", "activation", "state")
OP_CLASSES = ("projection", "attention", "state_update", "normalization", "elementwise", "activation")

UNARY_KINDS = frozenset({"Exp", "SiLU", "Sigmoid", "SoftPlus"})
EW_KINDS = frozenset({"EwAdd", "EwMul"})
MOVEMENT_KINDS = frozenset({"Slice", "Split", "Transpose", "Reshape", "Concat"})
COMPUTE_KINDS = frozenset(
    {"MatMul", "Einsum", "OuterProduct", "ReduceSum", "Conv1dDepthwise", "RMSNorm", "Softmax"}
) | UNARY_KINDS | EW_KINDS
OP_KINDS = COMPUTE_KINDS | MOVEMENT_KINDS


@dataclass(frozen=True)
class TensorSpec:
    id: int
    name: str
    dims: tuple[Dim, ...]
    element_bits: int = 32
    kind: str = "activation"
    # scheme-level identity ("dA", "h", ...); several tensors may share one
    role: str | None = None

    @cached_property
    def labels(self) -> tuple[str, ...]:
        return tuple(d[0] for d in self.dims)

    @cached_property
    def shape(self) -> tuple[int, ...]:
        return tuple(d[1] for d in self.dims)

    @cached_property
    def numel(self) -> int:
        return math.prod(self.shape)

    def extent(self, label: str) -> int | None:
        for lab, ext in self.dims:
            if lab == label:
                return ext
        return None


@dataclass(frozen=True)
class OpNode:
    id: int
    kind: str
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    op_class: str = "elementwise"
    attrs: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def output(self) -> int:
        if len(self.outputs) != 1:
            raise GraphError(f"op {self.id} ({self.kind}) has {len(self.outputs)} outputs")
        return self.outputs[0]

    @property
    def is_movement(self) -> bool:
        return self.kind in MOVEMENT_KINDS


@dataclass
class WorkloadGraph:
    tensors: dict[int, TensorSpec]
    ops: dict[int, OpNode]
    stage: str = "prefill"
    outputs: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        self._producer: dict[int, int] | None = None
        self._consumers: dict[int, list[int]] | None = None

    def _index(self) -> None:
        prod: dict[int, int] = {}
        cons: dict[int, list[int]] = {t: [] for t in self.tensors}
        for op in sorted(self.ops.values(), key=lambda o: o.id):
            for t in op.outputs:
                prod.setdefault(t, op.id)
            for t in op.inputs:
                cons.setdefault(t, []).append(op.id)
        self._producer, self._consumers = prod, cons

    def producer(self, tensor_id: int) -> int | None:
        if self._producer is None:
            self._index()
        return self._producer.get(tensor_id)

    def consumers(self, tensor_id: int) -> list[int]:
        if self._consumers is None:
            self._index()
        return self._consumers.get(tensor_id, [])

    def inputs(self) -> list[int]:
        """Tensors with no producing op, sorted by id."""
        return sorted(t for t in self.tensors if self.producer(t) is None)

    def tensor(self, tensor_id: int) -> TensorSpec:
        try:
            return self.tensors[tensor_id]
        except KeyError:
            raise GraphError(f"unknown tensor id {tensor_id}") from None

    def by_role(self, role: str) -> list[TensorSpec]:
        return [t for t in self.tensors.values() if t.role == role]


@dataclass(frozen=True)
class Violation:
    node: str
    rule: str
    message: str


def tensor_bytes(t: TensorSpec) -> int:
    return t.numel * t.element_bits // 8


# ---------------------------------------------------------------------------
# shape rules
# ---------------------------------------------------------------------------

def _label_broadcast(node: OpNode, ins: Sequence[TensorSpec]) -> tuple[Dim, ...]:
    full = max(ins, key=lambda t: len(t.dims))
    ext = dict(full.dims)
    for t in ins:
        for lab, e in t.dims:
            if lab not in ext:
                raise GraphError(f"dim mismatch: label {lab!r} of tensor {t.id} absent from broadcast target")
            if ext[lab] != e:
                raise GraphError(f"dim mismatch: {lab} extent {e} vs {ext[lab]}")
    return full.dims


def expected_output_dims(node: OpNode, ins: Sequence[TensorSpec],
                         outs: Sequence[TensorSpec]) -> list[tuple[Dim, ...]]:
    """Output dims implied by ``node.kind`` and its inputs.

    Raises GraphError with a message starting with the violated rule.
    """
    k, a = node.kind, node.attrs
    if k not in OP_KINDS:
        raise GraphError(f"unknown kind: {k}")
    if k in UNARY_KINDS:
        return [ins[0].dims]
    if k in EW_KINDS:
        return [_label_broadcast(node, ins)]
    if k == "OuterProduct":
        dims = list(ins[0].dims)
        ext = dict(dims)
        for t in ins[1:]:
            for lab, e in t.dims:
                if lab in ext:
                    if ext[lab] != e:
                        raise GraphError(f"dim mismatch: {lab} extent {e} vs {ext[lab]}")
                else:
                    ext[lab] = e
                    dims.append((lab, e))
        return [tuple(dims)]
    if k == "Einsum":
        ext: dict[str, int] = {}
        for t in ins:
            for lab, e in t.dims:
                if ext.setdefault(lab, e) != e:
                    raise GraphError(f"dim mismatch: {lab} extent {e} vs {ext[lab]}")
        for lab, e in outs[0].dims:
            if ext.get(lab) != e:
                raise GraphError(f"dim mismatch: output label {lab} not provided by inputs")
        return [outs[0].dims]
    if k == "MatMul":
        left, right = ins
        if not left.dims or not right.dims:
            raise GraphError("dim mismatch: MatMul operands must have rank >= 1")
        if left.dims[-1][1] != right.dims[0][1]:
            raise GraphError(
                f"dim mismatch: MatMul contracts {left.dims[-1][1]} vs {right.dims[0][1]}")
        return [left.dims[:-1] + right.dims[1:]]
    if k in ("ReduceSum", "Slice"):
        ax = a["axis"]
        if not 0 <= ax < len(ins[0].dims):
            raise GraphError(f"bad axis: {ax}")
        if k == "Slice" and not 0 <= a["index"] < ins[0].dims[ax][1]:
            raise GraphError(f"bad index: {a['index']}")
        return [ins[0].dims[:ax] + ins[0].dims[ax + 1:]]
    if k == "Softmax":
        if not 0 <= a["axis"] < len(ins[0].dims):
            raise GraphError(f"bad axis: {a['axis']}")
        return [ins[0].dims]
    if k == "RMSNorm":
        if len(ins) > 1 and ins[1].dims != ins[0].dims[-1:]:
            raise GraphError("dim mismatch: RMSNorm weight must match last dim")
        return [ins[0].dims]
    if k == "Conv1dDepthwise":
        x, w = ins
        kern = a["kernel"]
        if w.shape != (x.shape[-1], kern):
            raise GraphError(f"dim mismatch: conv weight {w.shape} vs ({x.shape[-1]}, {kern})")
        return [x.dims]
    if k == "Split":
        ax, sizes = a["axis"], list(a["sizes"])
        lab, ext = ins[0].dims[ax]
        if sum(sizes) != ext or any(s < 1 for s in sizes):
            raise GraphError(f"dim mismatch: split sizes {sizes} vs extent {ext}")
        labels = a.get("labels") or [lab] * len(sizes)
        return [ins[0].dims[:ax] + ((labels[j], s),) + ins[0].dims[ax + 1:] for j, s in enumerate(sizes)]
    if k == "Transpose":
        perm = list(a["perm"])
        if sorted(perm) != list(range(len(ins[0].dims))):
            raise GraphError(f"bad perm: {perm}")
        return [tuple(ins[0].dims[p] for p in perm)]
    if k == "Reshape":
        if math.prod(outs[0].shape) != ins[0].numel:
            raise GraphError("dim mismatch: reshape changes element count")
        return [outs[0].dims]
    if k == "Concat":
        ax = a["axis"]
        base = ins[0].dims
        total = 0
        for t in ins:
            if len(t.dims) != len(base) or any(
                    i != ax and t.dims[i] != base[i] for i in range(len(base))):
                raise GraphError("dim mismatch: concat operands differ off-axis")
            total += t.dims[ax][1]
        return [base[:ax] + ((base[ax][0], total),) + base[ax + 1:]]
    raise GraphError(f"unknown kind: {k}")  # pragma: no cover


def op_count(node: OpNode, tensors: dict[int, TensorSpec]) -> int:
    """Scalar operations performed by ``node``; a MAC counts as two."""
    ins = [tensors[i] for i in node.inputs]
    outs = [tensors[o] for o in node.outputs]
    expected_output_dims(node, ins, outs)
    k = node.kind
    if k in MOVEMENT_KINDS:
        return 0
    if k == "MatMul":
        left, right = ins
        return 2 * left.numel * right.numel // left.dims[-1][1]
    if k == "Einsum":
        ext = dict(d for t in ins for d in t.dims)
        contracted = set(ext) - set(outs[0].labels)
        return math.prod(ext.values()) * (2 if contracted else 1)
    if k == "ReduceSum":
        e = ins[0].numel
        return e - e // ins[0].dims[node.attrs["axis"]][1]
    if k == "Softmax":
        return 5 * ins[0].numel
    if k == "RMSNorm":
        return 4 * ins[0].numel
    if k == "Conv1dDepthwise":
        return 2 * outs[0].numel * node.attrs["kernel"]
    return outs[0].numel


# ---------------------------------------------------------------------------
# ordering and validation
# ---------------------------------------------------------------------------

def _op_edges(graph: WorkloadGraph) -> dict[int, set[int]]:
    succ: dict[int, set[int]] = {o: set() for o in graph.ops}
    for op in graph.ops.values():
        for t in op.inputs:
            p = graph.producer(t)
            if p is not None and p in succ:
                succ[p].add(op.id)
    return succ


def _kahn(graph: WorkloadGraph) -> tuple[list[int], set[int]]:
    succ = _op_edges(graph)
    indeg = {o: 0 for o in graph.ops}
    for s in succ.values():
        for o in s:
            indeg[o] += 1
    heap = [o for o, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        o = heapq.heappop(heap)
        order.append(o)
        for s in succ[o]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(heap, s)
    return order, set(graph.ops) - set(order)


def topo_order(graph: WorkloadGraph) -> list[OpNode]:
    """Producers before consumers; ties broken by ascending op id."""
    order, rest = _kahn(graph)
    if rest:
        raise GraphError(f"cycle among ops {sorted(rest)}")
    return [graph.ops[o] for o in order]


def _cycle_members(graph: WorkloadGraph, rest: set[int]) -> list[int]:
    # peel nodes downstream of a cycle; what remains lies on a cycle
    succ = _op_edges(graph)
    rest = set(rest)
    changed = True
    while changed:
        changed = False
        for o in list(rest):
            if not (succ[o] & rest):
                rest.discard(o)
                changed = True
    return sorted(rest)


def validate(graph: WorkloadGraph) -> list[Violation]:
    out: list[Violation] = []

    def bad(node: str, rule: str, msg: str) -> None:
        out.append(Violation(node, rule, msg))

    for t in graph.tensors.values():
        if t.element_bits <= 0 or t.element_bits % 8:
            bad(f"tensor {t.id}", "bits", f"element_bits {t.element_bits} not a positive multiple of 8")
        if any(e < 1 for _, e in t.dims):
            bad(f"tensor {t.id}", "extent", f"non-positive extent in {t.dims}")
        if t.kind not in TENSOR_KINDS:
            bad(f"tensor {t.id}", "kind", f"unknown tensor kind {t.kind!r}")
        if t.kind == "state" and "L" in t.labels:
            bad(f"tensor {t.id}", "state", "state tensors carry no L dimension")

    producers: dict[int, list[int]] = {}
    for op in graph.ops.values():
        missing = [t for t in op.inputs + op.outputs if t not in graph.tensors]
        if missing:
            bad(f"op {op.id}", "missing tensor", f"references unknown tensors {missing}")
            continue
        if op.op_class not in OP_CLASSES:
            bad(f"op {op.id}", "class", f"unknown op class {op.op_class!r}")
        for t in op.outputs:
            producers.setdefault(t, []).append(op.id)
        ins = [graph.tensors[i] for i in op.inputs]
        outs = [graph.tensors[o] for o in op.outputs]
        try:
            want = expected_output_dims(op, ins, outs)
        except (GraphError, KeyError, IndexError, TypeError) as exc:
            msg = str(exc)
            rule = "dim mismatch" if msg.startswith("dim mismatch") else "shape"
            bad(f"op {op.id}", rule, msg)
            continue
        if len(want) != len(outs):
            bad(f"op {op.id}", "arity", f"expected {len(want)} outputs, got {len(outs)}")
            continue
        for w, o in zip(want, outs):
            if tuple(w) != o.dims:
                bad(f"op {op.id}", "dim mismatch", f"output {o.id} dims {o.dims} != expected {tuple(w)}")

    for t, ps in producers.items():
        if len(ps) > 1:
            bad(f"tensor {t}", "multiple producers", f"produced by ops {sorted(ps)}")
    consumed = {t for op in graph.ops.values() for t in op.inputs}
    for t in graph.tensors:
        if t not in consumed and t not in graph.outputs:
            bad(f"tensor {t}", "unconsumed", "tensor neither consumed nor marked as output")

    _, rest = _kahn(graph)
    if rest:
        members = _cycle_members(graph, rest)
        bad("ops " + ",".join(map(str, members)), "cycle", f"cycle through ops {members}")
    return out


# ---------------------------------------------------------------------------
# construction helper and JSON
# ---------------------------------------------------------------------------

class GraphBuilder:
    """Allocates ids in creation order, so identical call sequences give identical graphs."""

    def __init__(self, stage: str = "prefill"):
        self.stage = stage
        self.tensors: dict[int, TensorSpec] = {}
        self.ops: dict[int, OpNode] = {}
        self.outputs: set[int] = set()
        self._next_t = 0
        self._next_op = 0

    def tensor(self, name: str, dims: Iterable[Dim], kind: str = "activation",
               bits: int = 32, role: str | None = None) -> int:
        tid = self._next_t
        self._next_t += 1
        self.tensors[tid] = TensorSpec(tid, name, tuple((str(l), int(e)) for l, e in dims), bits, kind, role)
        return tid

    def op(self, kind: str, inputs: Sequence[int], op_class: str, name: str,
           out_dims: Iterable[Dim] | None = None, role: str | None = None,
           **attrs: Any) -> int:
        """Add an op with a single output whose dims are inferred unless given."""
        oid = self._next_op
        self._next_op += 1
        ins = [self.tensors[i] for i in inputs]
        probe = OpNode(oid, kind, tuple(inputs), (), op_class, attrs)
        if out_dims is None:
            out_dims = expected_output_dims(probe, ins, [])[0]
        bits = ins[0].element_bits if ins else 32
        out = self.tensor(name, out_dims, "activation", bits, role)
        self.ops[oid] = OpNode(oid, kind, tuple(inputs), (out,), op_class, attrs)
        return out

    def split(self, inp: int, axis: int, sizes: Sequence[int], names: Sequence[str],
              op_class: str = "elementwise", labels: Sequence[str] | None = None) -> list[int]:
        oid = self._next_op
        self._next_op += 1
        attrs: dict[str, Any] = {"axis": axis, "sizes": list(sizes)}
        if labels:
            attrs["labels"] = list(labels)
        src = self.tensors[inp]
        dims = expected_output_dims(OpNode(oid, "Split", (inp,), (), op_class, attrs), [src], [])
        outs = [self.tensor(n, d, "activation", src.element_bits) for n, d in zip(names, dims)]
        self.ops[oid] = OpNode(oid, "Split", (inp,), tuple(outs), op_class, attrs)
        return outs

    def build(self) -> WorkloadGraph:
        return WorkloadGraph(dict(self.tensors), dict(self.ops), self.stage, frozenset(self.outputs))


def graph_to_dict(graph: WorkloadGraph) -> dict[str, Any]:
    tensors = []
    for t in sorted(graph.tensors.values(), key=lambda t: t.id):
        d: dict[str, Any] = {"id": t.id, "name": t.name, "dims": [list(x) for x in t.dims],
                             "bits": t.element_bits, "kind": t.kind}
        if t.role:
            d["role"] = t.role
        tensors.append(d)
    ops = []
    for o in sorted(graph.ops.values(), key=lambda o: o.id):
        ops.append({"id": o.id, "kind": o.kind, "attrs": dict(o.attrs), "inputs": list(o.inputs),
                    "output": o.outputs[0] if len(o.outputs) == 1 else list(o.outputs),
                    "class": o.op_class})
    return {"tensors": tensors, "ops": ops, "stage": graph.stage, "outputs": sorted(graph.outputs)}


def graph_from_dict(data: dict[str, Any]) -> WorkloadGraph:
    try:
        tensors = {}
        for t in data["tensors"]:
            dims = tuple((str(l), int(e)) for l, e in t["dims"])
            tensors[int(t["id"])] = TensorSpec(int(t["id"]), t.get("name", f"t{t['id']}"), dims,
                                               int(t.get("bits", 32)), t.get("kind", "activation"),
                                               t.get("role"))
        ops = {}
        for o in data["ops"]:
            out = o["output"]
            outs = tuple(out) if isinstance(out, list) else (out,)
            ops[int(o["id"])] = OpNode(int(o["id"]), o["kind"], tuple(o["inputs"]), outs,
                                       o.get("class", "elementwise"), dict(o.get("attrs") or {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed workload JSON: {exc}") from None
    if "outputs" in data:
        outputs = frozenset(int(t) for t in data["outputs"])
    else:
        # no explicit outputs: every produced-but-unconsumed tensor is one
        consumed = {t for o in ops.values() for t in o.inputs}
        outputs = frozenset(t for o in ops.values() for t in o.outputs if t not in consumed)
    return WorkloadGraph(tensors, ops, data.get("stage", "prefill"), outputs)


def dumps_graph(graph: WorkloadGraph) -> str:
    return json.dumps(graph_to_dict(graph), sort_keys=True, indent=1)
