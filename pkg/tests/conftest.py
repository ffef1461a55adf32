import sys

import numpy as np
import pytest

from tentmtp.hypersys import advection_system, wave_system
from tentmtp.mesh import build_interval_mesh, build_peterson_mesh, build_uniform_square_mesh
from tentmtp.pitch import build_tent_slab


def _slab_cases():
    m1 = build_interval_mesh(6)
    m2 = build_uniform_square_mesh(3)
    m3 = build_peterson_mesh(4, 0.75)
    return [
        ("adv1d", advection_system(m1, [1.0]), 0.6),
        ("wave1d", wave_system(m1, "dirichlet"), 0.6),
        ("adv2d", advection_system(m2, [0.6, 0.8], lambda x: np.sin(3 * x[:, 0])[:, None]), 0.4),
        ("wave2d", wave_system(m2, "neumann"), 0.3),
        ("peterson", advection_system(m3, [0.0, 1.0], lambda x: x[:, :1] ** 2), 0.4),
    ]


@pytest.fixture(scope="session")
def slab_cases():
    """(label, system, slab) triples covering interval, square and Peterson meshes."""
    return [(name, sys, build_tent_slab(sys.mesh, sys, T, gamma=0.9)) for name, sys, T in _slab_cases()]


@pytest.fixture(scope="session")
def all_tents(slab_cases):
    """Every tent of every fixture slab as (system, tent)."""
    return [(sys, t) for _, sys, slab in slab_cases for t in slab.tents()]


def pick_tents(pool, n, seed):
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    return [pool[i] for i in idx]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
