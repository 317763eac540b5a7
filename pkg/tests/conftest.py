import numpy as np
import pytest

from poslc.environment import Environment
from poslc.headertree import GlobalHeaderSet
from poslc.lottery import Execution
from poslc.node import NodeState
from poslc.rules import LocalView


def leader_execution(leaders: dict[int, tuple[int, ...]], horizon: int, corrupted=()) -> Execution:
    """Execution with explicit leader sets; counts are derived from them."""
    bad = frozenset(corrupted)
    h = np.zeros(horizon, dtype=np.int64)
    a = np.zeros(horizon, dtype=np.int64)
    for t, ids in leaders.items():
        h[t - 1] = sum(1 for i in ids if i not in bad)
        a[t - 1] = sum(1 for i in ids if i in bad)
    return Execution(h, a, corrupted=bad, leaders={t: tuple(sorted(v)) for t, v in leaders.items()})


class World:
    """A hand-built header set with one environment and some honest nodes."""

    def __init__(self, leaders, horizon=20, num_nodes=4, corrupted=(), rule="freshest", budget=4, t_conf=2):
        self.execution = leader_execution(leaders, horizon, corrupted)
        self.gs = GlobalHeaderSet(self.execution, num_nodes)
        self.env = Environment(self.gs, num_nodes, budget)
        self.nodes = {}
        for i in range(num_nodes):
            if i in set(corrupted):
                continue
            node = NodeState(i, LocalView(self.gs, rule), self.env, rule, t_conf)
            self.env.attach(node)
            self.nodes[i] = node

    def content(self, valid=True):
        return self.env.registry.new(valid)


@pytest.fixture
def world():
    return World


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
