"""Operator-class roofline analysis under layer-by-layer execution."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from .hardware import AcceleratorConfig, peak_ops_per_s
from .models import (MambaConfig, OpDescriptor, TransformerConfig, build_mamba_descriptor,
                     build_transformer_descriptor, with_L)

CSV_HEADER = ["model", "stage", "L", "class", "ops", "bytes", "oi", "perf_gops", "latency_s"]


@dataclass(frozen=True)
class ClassProfile:
    op_class: str
    ops: int
    dram_bytes: int

    @property
    def oi(self) -> float:
        return self.ops / self.dram_bytes if self.dram_bytes else float("inf")

    def perf(self, cfg: AcceleratorConfig) -> float:
        return roofline_perf(self.oi, cfg)

    def latency_s(self, cfg: AcceleratorConfig) -> float:
        return self.ops / self.perf(cfg) if self.ops else 0.0


def roofline_perf(oi: float, cfg: AcceleratorConfig) -> float:
    """Attainable ops/s: min(peak, bandwidth × OI)."""
    if oi < 0:
        raise ValueError("operational intensity must be >= 0")
    return min(peak_ops_per_s(cfg), cfg.offchip_Bps * oi)


def class_profiles(descs: Iterable[OpDescriptor], n_layers: int = 1) -> list[ClassProfile]:
    """Aggregate per-layer descriptors by op class, scaled to ``n_layers``."""
    acc: dict[str, list[int]] = {}
    for d in descs:
        slot = acc.setdefault(d.op_class, [0, 0])
        slot[0] += d.ops * n_layers
        slot[1] += d.bytes * n_layers
    return [ClassProfile(c, v[0], v[1]) for c, v in acc.items()]


@dataclass(frozen=True)
class ModelProfile:
    model: str
    stage: str
    L: int
    classes: list[ClassProfile]
    latency_s: float

    @property
    def dominant_class(self) -> str:
        return max(self.classes, key=lambda c: c.ops).op_class


def _descriptor(model_cfg) -> tuple[str, list[OpDescriptor], int]:
    if isinstance(model_cfg, MambaConfig):
        return "mamba", build_mamba_descriptor(model_cfg), model_cfg.n_layers
    if isinstance(model_cfg, TransformerConfig):
        return "transformer", build_transformer_descriptor(model_cfg), model_cfg.n_layers
    raise TypeError(f"unsupported model config {type(model_cfg).__name__}")


def profile_model(model_cfg, cfg: AcceleratorConfig, name: str | None = None) -> ModelProfile:
    """Per-class ops, bytes and roofline latency for the whole model."""
    kind, descs, layers = _descriptor(model_cfg)
    classes = class_profiles(descs, layers)
    # each operator runs at its own intensity; class rows aggregate them
    lat = sum(ClassProfile(d.op_class, d.ops, d.bytes).latency_s(cfg) for d in descs) * layers
    return ModelProfile(name or kind, model_cfg.stage, model_cfg.L, classes, lat)


def compare_models(tcfg: TransformerConfig, scfg: MambaConfig, stages: Sequence[str],
                   Ls: Sequence[int], cfg: AcceleratorConfig) -> list[ModelProfile]:
    out = []
    for stage in stages:
        for L in Ls:
            out.append(profile_model(with_L(tcfg, L, stage), cfg, "opt-2.7b"))
            out.append(profile_model(with_L(scfg, L, stage), cfg, "mamba-2.8b"))
    return out


def roofline_csv(profiles: Iterable[ModelProfile], cfg: AcceleratorConfig) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in profiles:
        for c in sorted(p.classes, key=lambda c: c.op_class):
            w.writerow([p.model, p.stage, p.L, c.op_class, c.ops, c.dram_bytes, f"{c.oi:.6g}",
                        f"{c.perf(cfg) / 1e9:.6g}", f"{c.latency_s(cfg):.6g}"])
    return buf.getvalue()
