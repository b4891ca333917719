import numpy as np
import pytest

from msfem_topopt.config import parse_config


def small_config(Mx=2, My=4, n=4, preset="doubleclamped-single", overrides=(), **doc):
    """Preset with a small grid; L is chosen so coarse cells stay square."""
    base = {"preset": preset, "geometry": {"Mx": Mx, "My": My, "n": n, "B": 1.0, "L": My / Mx}}
    for k, v in doc.items():
        base.setdefault(k, {})
        if isinstance(v, dict):
            base[k].update(v)
        else:
            base[k] = v
    if preset.startswith("doubleclamped") and "loads" not in doc:
        base["loads"] = [{"kind": "point", "location": [My / Mx / 2, 0.5], "component": 1, "magnitude": -0.01}]
    return parse_config(base, list(overrides))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
