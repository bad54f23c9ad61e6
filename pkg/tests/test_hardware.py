import json
import math

import pytest

from ssmfusim.errors import ConfigError
from ssmfusim.hardware import (DEFAULT_AREA, GB, MARCA, CALIBRATED_AREA, MiB, AcceleratorConfig,
                               accelerator_from_dict, area_of, bw_from_area, config_from_area,
                               load_accelerator, peak_ops_per_s)


def test_peak():
    assert peak_ops_per_s(MARCA) == 8192e9
    assert peak_ops_per_s(AcceleratorConfig(pe_count=32768)) == 32768e9
    assert peak_ops_per_s(AcceleratorConfig(pe_count=0)) == 0
    with pytest.raises(ConfigError):
        AcceleratorConfig(pe_count=0).validate()


def test_bw_from_area():
    assert bw_from_area(222) == pytest.approx(256 * GB)
    assert bw_from_area(55.5) == pytest.approx(128 * GB)
    assert bw_from_area(277.5) / GB == pytest.approx(286.2, abs=0.05)
    with pytest.raises(ConfigError):
        bw_from_area(0)


def test_marca_anchor_round_trips():
    cfg = config_from_area(222, 0.8)
    assert cfg.pe_count == MARCA.pe_count and cfg.onchip_bytes == MARCA.onchip_bytes
    area, mf = area_of(MARCA)
    assert area == pytest.approx(222) and mf == pytest.approx(0.8)


def test_calibrated_area_puts_both_points_on_one_line():
    a1, _ = area_of(MARCA, CALIBRATED_AREA)
    a2, _ = area_of(AcceleratorConfig(pe_count=32768, onchip_bytes=int(10.5 * MiB)), CALIBRATED_AREA)
    assert a1 == pytest.approx(222) and a2 == pytest.approx(222)


def test_area_edges():
    with pytest.raises(ConfigError):
        config_from_area(222, 1.0)
    cfg = config_from_area(27.75, 0.5)
    assert cfg.pe_count == math.floor(0.5 * 27.75 / DEFAULT_AREA.area_per_pe)


def test_json_config(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps({"pe_count": 16, "offchip_gbps": 64, "cpo": {"exp": 8}}))
    cfg = load_accelerator(str(p))
    assert cfg.pe_count == 16 and cfg.offchip_Bps == 64 * GB
    assert cfg.cycles_per_op("Exp") == 8 and cfg.cycles_per_op("EwMul") == 1
    with pytest.raises(ConfigError):
        accelerator_from_dict({"cpo": {"frobnicate": 2}})
    with pytest.raises(ConfigError):
        accelerator_from_dict({"pe_count": "many"})
    assert load_accelerator("MARCA") is MARCA
