"""Workload builders for the Mamba block and a transformer operator summary."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .graph import GraphBuilder, WorkloadGraph, op_count, tensor_bytes

STAGES = ("prefill", "decode")


@dataclass(frozen=True)
class MambaConfig:
    d_model: int = 2560
    expand: int = 2
    N: int = 64
    dt_rank: int = 160
    conv_kernel: int = 4
    n_layers: int = 64
    L: int = 1024
    stage: str = "prefill"
    element_bits: int = 32
    include_lm_head: bool = False
    vocab: int = 50280

    @property
    def D(self) -> int:
        return self.d_model * self.expand

    @property
    def tokens(self) -> int:
        """L-extent of activation tensors (1 while decoding)."""
        return 1 if self.stage == "decode" else self.L

    def validate(self) -> None:
        for name in ("d_model", "expand", "N", "dt_rank", "conv_kernel", "n_layers", "vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.L < 1:
            raise ConfigError("L must be ≥ 1")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.element_bits % 8:
            raise ConfigError("element_bits must be a multiple of 8")


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 2560
    n_heads: int = 32
    d_ff: int = 10240
    n_layers: int = 32
    L: int = 2048
    stage: str = "prefill"
    kv_cache: bool = True
    element_bits: int = 32

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "d_ff", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.L < 1:
            raise ConfigError("L must be ≥ 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")


MAMBA_2_8B = MambaConfig()
OPT_2_7B = TransformerConfig()
MODEL_PRESETS = {"mamba-2.8b": MAMBA_2_8B, "opt-2.7b": OPT_2_7B}
_MODEL_TYPES = {"mamba": MambaConfig, "transformer": TransformerConfig}


def model_from_dict(data: dict):
    """Model config from JSON data: ``{"type": "mamba" | "transformer", <fields>}``."""
    if not isinstance(data, dict):
        raise ConfigError("model config must be a JSON object")
    data = dict(data)
    kind = data.pop("type", "mamba")
    cls = _MODEL_TYPES.get(str(kind).lower())
    if cls is None:
        raise ConfigError(f"unknown model type {kind!r}")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"unknown model field(s): {', '.join(extra)}")
    cfg = cls(**data)
    cfg.validate()
    return cfg


def load_model(ref: str):
    """A preset name or a path to a model JSON file."""
    if ref.lower() in MODEL_PRESETS:
        return MODEL_PRESETS[ref.lower()]
    try:
        with open(ref) as fh:
            return model_from_dict(json.load(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read model config {ref!r}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {ref!r}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"bad model config {ref!r}: {exc}") from None


@dataclass(frozen=True)
class OpDescriptor:
    """Per-layer operator summary under layer-by-layer execution."""
    name: str
    op_class: str
    ops: int
    bytes: int


# ---------------------------------------------------------------------------
# Mamba
# ---------------------------------------------------------------------------

def _ssm_subgraph(b: GraphBuilder, cfg: MambaConfig, delta: int, A: int, B: int, C: int,
                  x: int, Dbar: int, h0: int) -> tuple[int, int]:
    """Emit the state update; returns (y, final state)."""
    L = cfg.tokens
    su = "state_update"
    dA = b.op("OuterProduct", [delta, A], su, "dA", role="dA")
    exp_dA = b.op("Exp", [dA], su, "exp_dA", role="exp_dA")
    dB = b.op("OuterProduct", [delta, B], su, "dB", role="dB")
    dBx = b.op("EwMul", [dB, x], su, "dBx", role="dBx")

    h = h0
    parts = []
    for t in range(L):
        e_t = b.op("Slice", [exp_dA], su, f"exp_dA.{t}", axis=0, index=t, step=t)
        b_t = b.op("Slice", [dBx], su, f"dBx.{t}", axis=0, index=t, step=t)
        c_t = b.op("Slice", [C], su, f"C.{t}", axis=0, index=t, step=t)
        hm = b.op("EwMul", [e_t, h], su, f"h_mul.{t}", role="h_mul", step=t)
        h = b.op("EwAdd", [hm, b_t], su, f"h.{t}", role="h", step=t)
        ch = b.op("EwMul", [h, c_t], su, f"ch.{t}", role="ch", step=t)
        yp_t = b.op("ReduceSum", [ch], su, f"y_prime.{t}", role="y_prime", axis=1, step=t)
        parts.append(b.op("Reshape", [yp_t], su, f"y_prime_row.{t}",
                          out_dims=[("L", 1), ("D", cfg.D)], step=t))
    yp = parts[0] if L == 1 else b.op("Concat", parts, su, "y_prime", axis=0)
    # the skip path sits outside the per-timestep state update
    dx = b.op("EwMul", [x, Dbar], "elementwise", "Dx")
    y = b.op("EwAdd", [yp, dx], "elementwise", "y")
    return y, h


def _ssm_inputs(b: GraphBuilder, cfg: MambaConfig) -> dict[str, int]:
    D, N, bits = cfg.D, cfg.N, cfg.element_bits
    return {
        "A": b.tensor("A", [("D", D), ("N", N)], "weight", bits, role="A"),
        "Dbar": b.tensor("Dbar", [("D", D)], "weight", bits, role="Dbar"),
        "h0": b.tensor("h0", [("D", D), ("N", N)], "state", bits, role="h"),
    }


def expand_ssm_operator(cfg: MambaConfig) -> WorkloadGraph:
    """Standalone state-update subgraph with delta, B, C, x, A, Dbar and h0 as inputs."""
    cfg.validate()
    b = GraphBuilder(cfg.stage)
    L, D, N, bits = cfg.tokens, cfg.D, cfg.N, cfg.element_bits
    delta = b.tensor("delta", [("L", L), ("D", D)], bits=bits, role="delta")
    B = b.tensor("B", [("L", L), ("N", N)], bits=bits, role="B")
    C = b.tensor("C", [("L", L), ("N", N)], bits=bits, role="C")
    x = b.tensor("x", [("L", L), ("D", D)], bits=bits, role="x")
    w = _ssm_inputs(b, cfg)
    y, h_last = _ssm_subgraph(b, cfg, delta, w["A"], B, C, x, w["Dbar"], w["h0"])
    b.outputs.update({y, h_last})
    return b.build()


def build_mamba_block(cfg: MambaConfig = MAMBA_2_8B) -> WorkloadGraph:
    """One pre-norm Mamba residual block (optionally followed by the LM head)."""
    cfg.validate()
    b = GraphBuilder(cfg.stage)
    L, D, N, R, Dm, K, bits = (cfg.tokens, cfg.D, cfg.N, cfg.dt_rank, cfg.d_model,
                               cfg.conv_kernel, cfg.element_bits)

    u = b.tensor("u", [("L", L), ("Dm", Dm)], bits=bits)
    norm_w = b.tensor("norm_w", [("Dm", Dm)], "weight", bits)
    w_in = b.tensor("W_in", [("Dm", Dm), ("E", 2 * D)], "weight", bits)
    conv_w = b.tensor("conv_w", [("D", D), ("K", K)], "weight", bits)
    w_x = b.tensor("W_x", [("D", D), ("P", R + 2 * N)], "weight", bits)
    w_dt = b.tensor("W_dt", [("R", R), ("D", D)], "weight", bits)
    w_out = b.tensor("W_out", [("D", D), ("Dm", Dm)], "weight", bits)
    ssm_w = _ssm_inputs(b, cfg)

    un = b.op("RMSNorm", [u, norm_w], "normalization", "u_norm")
    xz = b.op("MatMul", [un, w_in], "projection", "xz")
    x0, z = b.split(xz, 1, [D, D], ["x_in", "z"], labels=["D", "D"])
    xc = b.op("Conv1dDepthwise", [x0, conv_w], "elementwise", "x_conv", kernel=K, sub="conv")
    x = b.op("SiLU", [xc], "activation", "x", role="x")
    dbc = b.op("MatMul", [x, w_x], "projection", "dbc")
    dt, B, C = b.split(dbc, 1, [R, N, N], ["dt", "B", "C"], labels=["R", "N", "N"])
    dt_raw = b.op("MatMul", [dt, w_dt], "projection", "dt_raw")
    delta = b.op("SoftPlus", [dt_raw], "activation", "delta", role="delta")

    y, h_last = _ssm_subgraph(b, cfg, delta, ssm_w["A"], B, C, x, ssm_w["Dbar"], ssm_w["h0"])

    zs = b.op("SiLU", [z], "activation", "z_act")
    g = b.op("EwMul", [y, zs], "elementwise", "gated")
    o = b.op("MatMul", [g, w_out], "projection", "out_proj")
    out = b.op("EwAdd", [o, u], "elementwise", "residual")
    b.outputs.update({h_last})
    if cfg.include_lm_head:
        w_head = b.tensor("W_head", [("Dm", Dm), ("V", cfg.vocab)], "weight", bits)
        b.outputs.add(b.op("MatMul", [out, w_head], "projection", "logits"))
    else:
        b.outputs.add(out)
    return b.build()


_STEP_SUFFIX = re.compile(r"\.\d+$")

# partial products of the h update and of the C·h contraction; never leave the chip
TRANSIENT_ROLES = frozenset({"h_mul", "ch"})


def graph_descriptors(graph: WorkloadGraph) -> list[OpDescriptor]:
    """Aggregate compute ops of ``graph`` into per-operator descriptors.

    Bytes follow layer-by-layer execution: each operator reads every input
    and writes its output off-chip.  Data-movement ops are views and cost
    nothing; transient partial products are not counted as traffic.
    """
    acc: dict[tuple[str, str], list[int]] = {}
    for op in sorted(graph.ops.values(), key=lambda o: o.id):
        if op.is_movement:
            continue
        touched = [graph.tensors[t] for t in op.inputs + op.outputs]
        nbytes = sum(tensor_bytes(t) for t in touched if t.role not in TRANSIENT_ROLES)
        name = _STEP_SUFFIX.sub("", graph.tensors[op.outputs[0]].name)
        slot = acc.setdefault((name, op.op_class), [0, 0])
        slot[0] += op_count(op, graph.tensors)
        slot[1] += nbytes
    return [OpDescriptor(n, c, v[0], v[1]) for (n, c), v in acc.items()]


def build_mamba_descriptor(cfg: MambaConfig = MAMBA_2_8B) -> list[OpDescriptor]:
    return graph_descriptors(build_mamba_block(cfg))


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------

def build_transformer_descriptor(cfg: TransformerConfig = OPT_2_7B) -> list[OpDescriptor]:
    """Per-layer operator descriptors of a decoder-only transformer.

    Prefill (and decode without a KV cache) processes all L tokens; decode
    with a KV cache processes one new token against L cached keys/values.
    """
    cfg.validate()
    d, H, F, b = cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.element_bits // 8
    L = cfg.L
    T = 1 if (cfg.stage == "decode" and cfg.kv_cache) else L

    def desc(name: str, cls: str, ops: int, elems: int) -> OpDescriptor:
        return OpDescriptor(name, cls, ops, elems * b)

    return [
        desc("ln_attn", "normalization", 4 * T * d, 2 * T * d + d),
        desc("qkv_proj", "projection", 2 * T * d * 3 * d, T * d + 3 * d * d + 3 * T * d),
        desc("qk", "attention", 2 * T * L * d, T * d + L * d + H * T * L),
        desc("softmax", "attention", 5 * H * T * L, 2 * H * T * L),
        desc("av", "attention", 2 * T * L * d, H * T * L + L * d + T * d),
        desc("out_proj", "projection", 2 * T * d * d, 2 * T * d + d * d),
        desc("residual_attn", "elementwise", T * d, 3 * T * d),
        desc("ln_ffn", "normalization", 4 * T * d, 2 * T * d + d),
        desc("ffn_up", "projection", 2 * T * d * F, T * d + d * F + T * F),
        desc("relu", "activation", T * F, 2 * T * F),
        desc("ffn_down", "projection", 2 * T * F * d, T * F + F * d + T * d),
        desc("residual_ffn", "elementwise", T * d, 3 * T * d),
    ]


def with_L(cfg, L: int, stage: str | None = None):
    """Copy of a model config at another sequence length (and stage)."""
    return replace(cfg, L=L, stage=stage or cfg.stage)
