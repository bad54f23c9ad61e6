"""Parameterized accelerator description and the area model used for sweeps."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Mapping

from .errors import ConfigError

MiB = 1 << 20
GB = 10 ** 9

MARCA_AREA_MM2 = 222.0
MARCA_BW = 256 * GB
MARCA_PES = 8192
MARCA_ONCHIP = 24 * MiB

_MULTI_CYCLE = {"Exp": 4, "SiLU": 4, "Sigmoid": 4}


def _default_cpo() -> dict[str, int]:
    return dict(_MULTI_CYCLE)


@dataclass(frozen=True)
class AcceleratorConfig:
    pe_count: int = MARCA_PES
    clock_hz: float = 1e9
    onchip_bytes: int = MARCA_ONCHIP
    offchip_Bps: float = MARCA_BW
    # kinds missing from the table cost one cycle per operation
    cpo: Mapping[str, int] = field(default_factory=_default_cpo, compare=False)
    macs_per_pe_per_cycle: Fraction = Fraction(1)

    def cycles_per_op(self, kind: str) -> int:
        return self.cpo.get(kind, 1)

    @property
    def bytes_per_cycle(self) -> float:
        return self.offchip_Bps / self.clock_hz

    @property
    def ops_per_cycle(self) -> Fraction:
        return self.pe_count * Fraction(self.macs_per_pe_per_cycle)

    def key(self) -> tuple:
        return (self.pe_count, self.clock_hz, self.onchip_bytes, self.offchip_Bps,
                tuple(sorted(self.cpo.items())), self.macs_per_pe_per_cycle)

    def validate(self) -> None:
        if self.pe_count < 1:
            raise ConfigError("pe_count must be >= 1")
        if self.clock_hz <= 0 or self.offchip_Bps <= 0:
            raise ConfigError("clock and bandwidth must be positive")
        if self.onchip_bytes < 0:
            raise ConfigError("onchip_bytes must be >= 0")
        if any(v < 1 for v in self.cpo.values()):
            raise ConfigError("cycles per operation must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {"pe_count": self.pe_count, "clock_hz": self.clock_hz,
                "onchip_bytes": self.onchip_bytes, "offchip_gbps": self.offchip_Bps / GB,
                "cpo": {k.lower(): v for k, v in sorted(self.cpo.items())},
                "macs_per_pe_per_cycle": str(self.macs_per_pe_per_cycle)}


MARCA = AcceleratorConfig()
PRESETS = {"marca": MARCA}

_KIND_NAMES = {k.lower(): k for k in (
    "MatMul", "Einsum", "EwAdd", "EwMul", "Exp", "SiLU", "Sigmoid", "SoftPlus", "OuterProduct",
    "ReduceSum", "Conv1dDepthwise", "RMSNorm", "Softmax")}


def accelerator_from_dict(data: Mapping[str, Any]) -> AcceleratorConfig:
    """Parse the accelerator JSON format; unspecified fields take MARCA values."""
    try:
        cpo = _default_cpo()
        for name, v in (data.get("cpo") or {}).items():
            kind = _KIND_NAMES.get(str(name).lower())
            if kind is None:
                raise ConfigError(f"unknown op kind in cpo table: {name!r}")
            cpo[kind] = int(v)
        cfg = AcceleratorConfig(
            pe_count=int(data.get("pe_count", MARCA_PES)),
            clock_hz=float(data.get("clock_hz", 1e9)),
            onchip_bytes=int(data.get("onchip_bytes", MARCA_ONCHIP)),
            offchip_Bps=float(data.get("offchip_gbps", MARCA_BW / GB)) * GB,
            cpo=cpo,
            macs_per_pe_per_cycle=Fraction(str(data.get("macs_per_pe_per_cycle", 1))),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed accelerator config: {exc}") from None
    cfg.validate()
    return cfg


def load_accelerator(ref: str) -> AcceleratorConfig:
    """A preset name or a path to an accelerator JSON file."""
    if ref.lower() in PRESETS:
        return PRESETS[ref.lower()]
    try:
        with open(ref) as fh:
            return accelerator_from_dict(json.load(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read accelerator config {ref!r}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {ref!r}: {exc}") from None


def peak_ops_per_s(cfg: AcceleratorConfig) -> float:
    return float(cfg.pe_count * cfg.clock_hz * cfg.macs_per_pe_per_cycle)


# ---------------------------------------------------------------------------
# area model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AreaModel:
    area_per_pe: float
    area_per_byte: float
    anchor_area: float = MARCA_AREA_MM2
    anchor_bw: float = MARCA_BW

    @classmethod
    def from_split(cls, mem_fraction: float = 0.8, area: float = MARCA_AREA_MM2,
                   pe_count: int = MARCA_PES, onchip_bytes: int = MARCA_ONCHIP) -> "AreaModel":
        """Coefficients that put ``mem_fraction`` of ``area`` into memory."""
        return cls(area * (1 - mem_fraction) / pe_count, area * mem_fraction / onchip_bytes, area)

    @classmethod
    def from_anchors(cls, a: tuple[int, int], b: tuple[int, int],
                     area: float = MARCA_AREA_MM2) -> "AreaModel":
        """Coefficients such that both (pe_count, onchip_bytes) points cost ``area``."""
        (p1, m1), (p2, m2) = a, b
        det = p1 * m2 - p2 * m1
        if det == 0:
            raise ConfigError("anchor points are collinear")
        return cls(area * (m2 - m1) / det, area * (p1 - p2) / det, area)


DEFAULT_AREA = AreaModel.from_split()
# the iso-area optimum reported for L=1024 (32768 PEs, 10.5 MiB) also costs 222 mm^2
CALIBRATED_AREA = AreaModel.from_anchors((MARCA_PES, MARCA_ONCHIP), (32768, int(10.5 * MiB)))


def bw_from_area(total_area: float, model: AreaModel = DEFAULT_AREA) -> float:
    """Off-chip bandwidth grows with the die perimeter, i.e. with sqrt(area)."""
    if total_area <= 0:
        raise ConfigError("total_area must be positive")
    return model.anchor_bw * math.sqrt(total_area / model.anchor_area)


def area_of(cfg: AcceleratorConfig, model: AreaModel = DEFAULT_AREA) -> tuple[float, float]:
    """(total area, memory fraction) of a configuration."""
    mem = cfg.onchip_bytes * model.area_per_byte
    total = mem + cfg.pe_count * model.area_per_pe
    return total, mem / total


def config_from_area(total_area: float, mem_fraction: float, model: AreaModel = DEFAULT_AREA,
                     base: AcceleratorConfig = MARCA) -> AcceleratorConfig:
    if not 0 <= mem_fraction <= 1:
        raise ConfigError("mem_fraction must lie in [0, 1]")
    # round before flooring so anchor points survive float noise
    pes = math.floor(round((1 - mem_fraction) * total_area / model.area_per_pe, 6))
    if pes < 1:
        raise ConfigError(f"zero PEs at area {total_area} mm^2, mem_fraction {mem_fraction}")
    onchip = math.floor(round(mem_fraction * total_area / model.area_per_byte, 3))
    return replace(base, pe_count=pes, onchip_bytes=onchip,
                   offchip_Bps=bw_from_area(total_area, model))
