import numpy as np
import pytest

from peerfx.estimate import PeerData
from peerfx.model import CutPointSpec, Theta
from peerfx.network import build_design, build_network

ACCEPTANCE_LINES = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_network(rng, n, M=1, S=1, p=0.3):
    subnet = np.sort(rng.integers(0, S, size=n)) if S > 1 else np.zeros(n, int)
    groups = rng.integers(0, M, size=n)
    edges = [(i, j) for i in range(n) for j in range(n)
             if i != j and subnet[i] == subnet[j] and rng.random() < p]
    return build_network(np.array(edges, dtype=int).reshape(-1, 2), groups, subnet, M=M)


def random_theta(rng, M, K, R, switch=None, alpha_scale=0.1):
    switch = int(rng.integers(1, R + 1)) if switch is None else switch
    n_free = min(switch, R) - 1
    cuts = CutPointSpec(R=R, M=M, switch=switch,
                        deltas=rng.uniform(0.4, 1.5, size=(M, n_free)),
                        tail=rng.uniform(0.4, 1.5, size=M))
    return Theta(alpha=rng.uniform(-alpha_scale, alpha_scale, size=(M, M)) + alpha_scale,
                 beta=rng.normal(scale=0.7, size=1 + 2 * K), cuts=cuts)


def random_instance(rng, n=8, M=1, K=2, R=5, S=1, switch=None):
    net = random_network(rng, n, M=M, S=S)
    X = rng.normal(size=(n, K))
    design = build_design(net, X)
    theta = random_theta(rng, M, K, R, switch)
    return net, design, theta


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def chain():
    """Three agents i1 -> i2 -> i3."""
    return build_network([(0, 1), (1, 2)], [0, 0, 0])


def make_data(net, design, y):
    return PeerData(net, design, np.asarray(y))
