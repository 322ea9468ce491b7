import sys

import pytest

from netdx.netmodel import load_reference_topology
from netdx.simkernel import Network


@pytest.fixture(scope="session")
def ref_topo():
    return load_reference_topology()


@pytest.fixture
def ref_net(ref_topo):
    net = Network(ref_topo, seed=7)
    net.converge()
    return net


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    lines = sorted(getattr(mod, "LINES", []), key=lambda l: l.split("criterion ")[1])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
