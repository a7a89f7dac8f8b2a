import numpy as np
import pytest

from baim import numcore as nc
from baim.composer import compose
from baim.learner import LearnerSpec, build_learner
from baim.numcore import RngStream

# one "criterion N ... PASS|FAIL" line per acceptance check, echoed after the run
ACCEPTANCE: list[str] = []


def random_specs(rng: np.random.Generator, n: int, S: int, d: int = 10, tasks=None):
    specs = []
    for l in range(n):
        L = int(rng.integers(1, S - 1))
        widths = [int(w) for w in rng.integers(2, 7, S - 1)]
        widths[L] = int(rng.integers(2, 5))
        t = 0 if tasks is None else tasks[l]
        specs.append(LearnerSpec(l, t, d, tuple(widths), widths[L], L))
    return specs


def make_graph(seed=0, n=4, S=4, h=2, K=2, d=10, tasks=None, edge_scale=0.3):
    """A small composed graph with random (nonzero) edge weights."""
    rng = np.random.default_rng(seed)
    specs = random_specs(rng, n, S, d, tasks)
    stream = RngStream(seed)
    learners = [build_learner(s, stream.child("learner")) for s in specs]
    graph = compose(learners, None, h, stream.child("compose"), K)
    for e in graph.edges:
        e.W.value = (stream.child("edge", e.edge_id).normal(e.W.shape) * edge_scale).astype(nc.get_dtype())
    return graph


@pytest.fixture
def fp64():
    with nc.precision("fp64"):
        yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
