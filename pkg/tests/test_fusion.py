import pytest

from ssmfusim.errors import ConfigError, GraphError, InfeasibleError
from ssmfusim.fusion import (SCHEME_NAMES, FusionScheme, check_schedule, compute_d_splits,
                             fused_tile_counts, generate_schedule, parse_scheme_name,
                             required_bytes, scheme, scheme_table)
from ssmfusim.hardware import MiB
from ssmfusim.models import MambaConfig, build_mamba_block, expand_ssm_operator

MAMBA = MambaConfig()
# independent arithmetic: four (D, N) fused tensors, two states, one D-vector
REQ = (4 * 5120 * 64 + 5120 * 64 + 5120) * 4


def test_required_bytes():
    assert REQ == 6_574_080
    assert required_bytes(5120, 64, 32) == REQ
    assert required_bytes(1, 1, 32) == 24


@pytest.mark.parametrize("mem,n", [(24 * MiB, 1), (1 * MiB, 7), (REQ, 1), (REQ - 1, 2)])
def test_compute_d_splits(mem, n):
    assert compute_d_splits(5120, 64, 32, mem) == n
    assert n == -(-REQ // mem)


def test_d_split_infeasible():
    with pytest.raises(InfeasibleError):
        compute_d_splits(5120, 64, 32, 0)
    with pytest.raises(InfeasibleError):
        compute_d_splits(5120, 64, 32, required_bytes(1, 64) - 1)


def test_scheme_lookup():
    uf = scheme("uf")
    assert uf.local_tensors == () and uf.tiles_label() == "None"
    assert scheme("ALL").tiles_label() == "L"
    ma = scheme("MA-All", MAMBA, 1 * MiB)
    assert ma.d_split_factor == 7 and ma.tiles_label() == "nL"
    with pytest.raises(ConfigError):
        parse_scheme_name("fuse-everything")
    with pytest.raises(ConfigError):
        scheme("MA-All")


def test_scheme_table_rows():
    rows = scheme_table()
    assert [r[1] for r in rows] == list(SCHEME_NAMES)
    assert dict((r[1], r[2]) for r in rows)["All"] == "ΔA, Exp(ΔA), ΔB, ΔBx, h (×2)"
    assert all(r[3] == ("None" if r[1] == "UF" else "nL" if r[1] == "MA-All" else "L") for r in rows)


def small(L=3):
    return MambaConfig(d_model=4, N=2, dt_rank=2, L=L)


def test_all_tiles_per_tensor_equal_L():
    g = build_mamba_block(small(5))
    counts = fused_tile_counts(generate_schedule(g, scheme("All")))
    assert counts and all(v == 5 for v in counts.values())
    assert {"dA", "exp_dA", "dB", "dBx"} <= set(counts)


def test_ma_all_ordering_d_outer():
    g = expand_ssm_operator(small(2))
    sch = generate_schedule(g, FusionScheme("MA-All", scheme("All").local_tensors, True, 2))
    fused = [s for s in sch.steps if s.fused]
    assert len({s.group for s in fused}) == 4
    d_of = []
    for s in fused:
        if s.tile.index:
            d_of.append(s.tile.index[-1])
    assert d_of == sorted(d_of)
    check_schedule(sch)


@pytest.mark.parametrize("name", SCHEME_NAMES)
def test_every_scheme_respects_dependencies(name):
    g = build_mamba_block(small(3))
    sch = scheme(name, small(3), 10 ** 6) if name == "MA-All" else scheme(name)
    check_schedule(generate_schedule(g, sch))


def test_check_schedule_catches_reordering():
    g = build_mamba_block(small(2))
    sch = generate_schedule(g, scheme("All"))
    sch.steps = list(reversed(sch.steps))
    with pytest.raises(GraphError):
        check_schedule(sch)
