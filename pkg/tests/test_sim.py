import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from ssmfusim.errors import InfeasibleError
from ssmfusim.fusion import Schedule, generate_schedule, scheme
from ssmfusim.graph import GraphBuilder
from ssmfusim.hardware import MARCA, AcceleratorConfig
from ssmfusim.models import MambaConfig, build_mamba_block
from ssmfusim.sim import (matmul_traffic, memory_sweep, schedule_for, simulate,
                          tile_compute_cycles)


def test_tile_compute_cycles():
    assert tile_compute_cycles(327_680, 327_680, "EwMul", MARCA) == 40
    assert tile_compute_cycles(327_680, 327_680, "Exp", MARCA) == 160
    assert tile_compute_cycles(16, 16, "EwMul", MARCA) == 1


def one_ewmul(pe=16, bw_per_cycle=64):
    b = GraphBuilder()
    x = b.tensor("x", [("D", 16)])
    y = b.tensor("y", [("D", 16)])
    z = b.op("EwMul", [x, y], "elementwise", "z")
    b.outputs.add(z)
    g = b.build()
    cfg = AcceleratorConfig(pe_count=pe, clock_hz=1e9, offchip_Bps=bw_per_cycle * 1e9, onchip_bytes=4096)
    return g, cfg


def test_hand_trace_single_ewmul():
    g, cfg = one_ewmul()
    r = simulate(generate_schedule(g, scheme("UF")), cfg)
    # fetch 128 B at 64 B/cycle (2) overlaps compute (1); writeback 64 B (1)
    assert r.total_cycles == 3
    assert r.offchip_bytes_read == 128 and r.offchip_bytes_written == 64


def test_empty_schedule():
    g, cfg = one_ewmul()
    r = simulate(Schedule(g, scheme("UF"), []), cfg)
    assert r.total_cycles == 0 and r.offchip_bytes == 0


SMALL = MambaConfig(d_model=16, N=4, dt_rank=4, L=6)


def test_fused_intermediates_stay_on_chip():
    g = build_mamba_block(SMALL)
    uf = simulate(generate_schedule(g, scheme("UF")), MARCA)
    al = simulate(generate_schedule(g, scheme("All")), MARCA)
    for role in ("dA", "exp_dA", "dB", "dBx"):
        assert uf.offchip_bytes_by_role.get(role, 0) > 0
        assert al.offchip_bytes_by_role.get(role, 0) == 0
    assert al.total_cycles < uf.total_cycles


def test_report_is_deterministic():
    g = build_mamba_block(SMALL)
    a = simulate(generate_schedule(g, scheme("All")), MARCA)
    b = simulate(generate_schedule(build_mamba_block(SMALL), scheme("All")), MARCA)
    assert a.to_json(timeline=True) == b.to_json(timeline=True)
    assert a.timeline_csv() == b.timeline_csv()
    assert a.timeline_csv().splitlines()[0] == "tile,start_cycle,end_cycle,class,offchip_bytes"


def test_timeline_is_contiguous():
    g = build_mamba_block(SMALL)
    r = simulate(generate_schedule(g, scheme("AS")), MARCA)
    assert r.timeline[0].start_cycle == 0
    assert r.timeline[-1].end_cycle <= r.total_cycles
    assert all(e.end_cycle >= e.start_cycle for e in r.timeline)


def test_memory_sweep_below_one_slice_is_infeasible():
    g = build_mamba_block(SMALL)
    one_slice = (5 * SMALL.N + 1) * 4
    with pytest.raises(InfeasibleError):
        memory_sweep(g, "MA-All", MARCA, [one_slice - 1])


def test_matmul_traffic_fits_reads_once():
    assert matmul_traffic(8, 16, 4, 4, 10 ** 9) == (8 * 16 * 4, 16 * 4 * 4)
    with pytest.raises(InfeasibleError):
        matmul_traffic(8, 16, 4, 4, 8)


@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(12, 40000))
def test_matmul_traffic_monotone_in_space(M, K, P, free):
    try:
        small = sum(matmul_traffic(M, K, P, 4, free))
    except InfeasibleError:
        return
    assert sum(matmul_traffic(M, K, P, 4, free * 2)) <= small
    assert small >= (M * K + K * P) * 4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32), st.sampled_from(["UF", "AS", "All", "MA-All"]))
def test_cycles_monotone_in_capacity_and_bandwidth(seed, name):
    rng = random.Random(seed)
    g = build_mamba_block(SMALL)
    cap = rng.randint(2000, 40000)
    bw = rng.uniform(1, 64) * 1e9
    cfg = AcceleratorConfig(pe_count=rng.randint(1, 512), onchip_bytes=cap, offchip_Bps=bw)

    def cycles(c):
        try:
            return simulate(schedule_for(g, name, c.onchip_bytes), c, timeline=False).total_cycles
        except InfeasibleError:
            return float("inf")

    base = cycles(cfg)
    assert cycles(replace(cfg, onchip_bytes=cap * 2)) <= base
    assert cycles(replace(cfg, offchip_Bps=bw * 2)) <= base
