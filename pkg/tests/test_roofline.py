import csv
import io

import pytest

from ssmfusim.hardware import MARCA, AcceleratorConfig
from ssmfusim.models import MambaConfig, TransformerConfig, with_L
from ssmfusim.roofline import (CSV_HEADER, ClassProfile, class_profiles, compare_models,
                               profile_model, roofline_csv, roofline_perf)


def test_roofline_golden_points():
    # oracle: min(peak, bandwidth * OI) with 8192 GOPS and 256 GB/s
    assert roofline_perf(18.1, MARCA) / 1e9 == pytest.approx(min(8192, 256 * 18.1), rel=1e-9)
    assert roofline_perf(18.1, MARCA) / 1e9 == pytest.approx(4633.6, rel=1e-3)
    assert roofline_perf(0.17, MARCA) / 1e9 == pytest.approx(43.52, rel=1e-3)
    assert roofline_perf(100, MARCA) == 8192e9
    with pytest.raises(ValueError):
        roofline_perf(-1, MARCA)


def test_class_aggregation_scales_with_layers():
    from ssmfusim.models import OpDescriptor

    descs = [OpDescriptor("a", "projection", 10, 4), OpDescriptor("b", "projection", 6, 4),
             OpDescriptor("c", "elementwise", 1, 8)]
    got = {c.op_class: c for c in class_profiles(descs, n_layers=3)}
    assert got["projection"] == ClassProfile("projection", 48, 24)
    assert got["elementwise"].oi == pytest.approx(1 / 8)


def test_attention_vs_state_update_oi():
    opt = profile_model(TransformerConfig(L=2048), MARCA)
    ssm = profile_model(MambaConfig(L=2048), MARCA)
    att = {c.op_class: c for c in opt.classes}["attention"]
    su = {c.op_class: c for c in ssm.classes}["state_update"]
    assert 80 <= att.oi / su.oi <= 120
    assert att.oi == pytest.approx(18.1, rel=0.2)
    assert su.oi == pytest.approx(0.17, rel=0.2)


def test_ssm_decode_latency_flat_transformer_grows():
    ssm = [profile_model(with_L(MambaConfig(), L, "decode"), MARCA).latency_s for L in (512, 2048)]
    opt = [profile_model(with_L(TransformerConfig(), L, "decode"), MARCA).latency_s for L in (512, 2048)]
    assert ssm[0] == pytest.approx(ssm[1])
    assert opt[1] > opt[0]


def test_roofline_csv_schema():
    profs = compare_models(TransformerConfig(), MambaConfig(), ["prefill"], [64], MARCA)
    rows = list(csv.reader(io.StringIO(roofline_csv(profs, MARCA))))
    assert rows[0] == CSV_HEADER
    assert {r[0] for r in rows[1:]} == {"opt-2.7b", "mamba-2.8b"}


def test_faster_memory_never_slows_roofline():
    fast = AcceleratorConfig(offchip_Bps=2 * MARCA.offchip_Bps)
    for m in (MambaConfig(L=128), TransformerConfig(L=128)):
        assert profile_model(m, fast).latency_s <= profile_model(m, MARCA).latency_s
