import os
import sys

import pytest

# graphgen.py (random graphs + the brute-force dependency oracle) lives here
sys.path.insert(0, os.path.dirname(__file__))

from ssmfusim.models import MambaConfig, build_mamba_block, with_L  # noqa: E402


@pytest.fixture(scope="session")
def mamba_graphs():
    """Full Mamba-2.8B block graphs, built once per sequence length."""
    cache = {}

    def get(L: int, stage: str = "prefill"):
        key = (L, stage)
        if key not in cache:
            cache[key] = build_mamba_block(with_L(MambaConfig(), L, stage))
        return cache[key]

    return get


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts, one line per criterion, after the run."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
