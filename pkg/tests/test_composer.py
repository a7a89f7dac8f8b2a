import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from baim import numcore as nc
from baim.composer import (
    BaimGraph,
    ProjectionEdge,
    add_learner,
    baim_forward,
    candidate_edges,
    compose,
    edge_score,
    prune_step,
    topological_order,
    upstream_closure,
    learner_nodes,
    validate_acyclic,
)
from baim.errors import ConfigError, CycleError, IdError, RangeError
from baim.learner import LearnerSpec, build_learner
from baim.numcore import Parameter, RngStream

from conftest import make_graph, random_specs

pytestmark = pytest.mark.usefixtures("fp64")


def brute_force_edges(specs, h):
    """Every (a, i, b, j) tuple filtered by the connection rules, written out longhand."""
    found = set()
    for a, b in itertools.product(specs, specs):
        for i, j in itertools.product(range(a.n_stages), range(b.n_stages)):
            if a.learner_id == b.learner_id or j == b.stage_of_latent:
                continue
            if j < i or j - i > h:
                continue
            if i == j and not a.learner_id < b.learner_id:
                continue
            found.add(((a.learner_id, i), (b.learner_id, j)))
    return found


@pytest.mark.parametrize("N,S,h", [(n, s, h) for n in (1, 2, 3, 5) for s in (3, 4, 6) for h in (0, 1, 3)])
def test_candidate_edges_match_enumeration(N, S, h):
    specs = random_specs(np.random.default_rng(N * 100 + S * 10 + h), N, S)
    got = candidate_edges(specs, h)
    assert len(got) == len(set(got))
    assert set(got) == brute_force_edges(specs, h)


def test_two_learners_three_stages_h1():
    specs = [LearnerSpec(0, 0, 4, (3, 2), 2, 1), LearnerSpec(1, 0, 4, (3, 2), 2, 1)]
    got = set(candidate_edges(specs, 1))
    # dst stage 1 is latent and takes nothing; dst stage 0 only from same-depth lower id;
    # dst stage 2 from stage 1 or 2 of the other learner (same depth only 0 -> 1).
    expected = {((0, 0), (1, 0)), ((0, 1), (1, 2)), ((1, 1), (0, 2)), ((0, 2), (1, 2))}
    assert got == expected


def test_compose_basic_graph():
    graph = make_graph(seed=1, n=3, S=4, h=2)
    assert len(graph.edges) == len(brute_force_edges([l.spec for l in graph.learners.values()], 2))
    for e in graph.edges:
        assert e.W.shape == (graph.learners[e.dst[0]].spec.in_dim(e.dst[1]), graph.learners[e.src[0]].spec.out_dim(e.src[1]))
    validate_acyclic(graph)


def test_compose_edges_start_at_zero():
    specs = random_specs(np.random.default_rng(0), 3, 4)
    graph = compose([build_learner(s, RngStream(0)) for s in specs], h=2)
    assert all(not e.W.value.any() for e in graph.edges)


def test_compose_rejects_bad_input():
    specs = random_specs(np.random.default_rng(0), 2, 4)
    lrs = [build_learner(s, RngStream(0)) for s in specs]
    with pytest.raises(ConfigError):
        compose(lrs, h=-1)
    with pytest.raises(IdError):
        compose([lrs[0], lrs[0]])
    odd = build_learner(LearnerSpec(5, 0, 7, (3, 2, 3), 2, 1), RngStream(0))
    with pytest.raises(ConfigError):
        compose([lrs[0], odd])


def test_cycle_is_rejected_with_report():
    nodes = [(0, 0), (1, 0), (2, 0)]
    arcs = [((0, 0), (1, 0)), ((1, 0), (2, 0)), ((2, 0), (0, 0))]
    with pytest.raises(CycleError) as info:
        topological_order(nodes, arcs)
    assert set(info.value.cycle) >= set(nodes)


def test_hand_built_backward_edge_is_cycle():
    graph = make_graph(seed=2, n=2, S=4, h=1)
    a, b = graph.learners[0].spec, graph.learners[1].spec
    # same-depth edge in the forbidden direction closes a loop with its legal twin
    bad = ProjectionEdge(len(graph.edges), (1, 0), (0, 0), Parameter("bad", np.zeros((a.in_dim(0), b.out_dim(0)))))
    graph.edges.append(bad)
    with pytest.raises(CycleError):
        graph.refresh()


def test_topological_order_tiebreak():
    order = topological_order([(1, 0), (0, 1), (0, 0), (1, 1)], [((0, 0), (0, 1)), ((1, 0), (1, 1))])
    assert order == [(0, 0), (1, 0), (0, 1), (1, 1)]


def reachability_closure(graph, targets):
    """Transitive closure by repeated boolean matrix squaring over all (learner, stage) nodes."""
    nodes = [(l, s) for l, lr in graph.learners.items() for s in range(lr.spec.n_stages)]
    idx = {n: k for k, n in enumerate(nodes)}
    R = np.eye(len(nodes), dtype=bool)
    for l, s in nodes:
        if s > 0:
            R[idx[(l, s)], idx[(l, s - 1)]] = True
    for e in graph.edges:
        if e.active:
            R[idx[e.dst], idx[e.src]] = True
    for _ in range(len(nodes)):
        R = R | (R.astype(int) @ R.astype(int) > 0)
    rows = [idx[t] for t in targets]
    return {nodes[k] for k in np.flatnonzero(R[rows].any(axis=0))}


@pytest.mark.parametrize("seed", range(5))
def test_upstream_closure_matches_reachability(seed):
    graph = make_graph(seed=seed, n=4, S=4, h=2, tasks=[0, 0, 1, 1])
    prune_step(graph, 0.5)
    targets = learner_nodes(graph.learners, graph.squads[1])
    assert upstream_closure(targets, graph.learners, graph.incoming) == reachability_closure(graph, targets)


def test_baim_forward_single_and_batch_agree():
    graph = make_graph(seed=3, n=4, S=4, h=2, tasks=[0, 0, 1, 1])
    x = np.random.default_rng(0).uniform(0, 1, (5, 10))
    Y, traces = baim_forward(graph, x)
    for k in range(5):
        y, tr = baim_forward(graph, x[k])
        np.testing.assert_allclose(y.data, Y.data[k], rtol=1e-12, atol=1e-14)
        assert tr.route.task == traces[k].route.task
        assert tr.route.dense.sum() == pytest.approx(1.0)


def test_trace_reports_executed_stages_only():
    graph = make_graph(seed=4, n=4, S=4, h=1, K=1)
    for e in graph.edges:
        e.active = False
    graph.refresh()
    y, tr = baim_forward(graph, np.full(10, 0.5))
    (chosen,) = [l for l, _ in tr.route.selected]
    assert tr.executed == frozenset(learner_nodes(graph.learners, [chosen]))
    assert tr.edge_hits == frozenset()


def test_task_override_and_range():
    graph = make_graph(seed=5, n=4, S=4, tasks=[0, 0, 1, 1])
    x = np.full(10, 0.3)
    _, tr = baim_forward(graph, x, task_override=1)
    assert tr.route.task == 1
    assert set(l for l, _ in tr.route.selected) <= {2, 3}
    with pytest.raises(RangeError):
        baim_forward(graph, x, task_override=2)


def test_zero_edges_reduce_to_gated_learner_mix():
    specs = random_specs(np.random.default_rng(7), 3, 4)
    lrs = [build_learner(s, RngStream(7)) for s in specs]
    graph = compose(lrs, h=2, K=2)
    x = np.random.default_rng(1).uniform(0, 1, 10)
    y, tr = baim_forward(graph, x)
    from baim.learner import vae_forward

    expected = sum(w * vae_forward(graph.learners[l], x[None]).x_hat.data[0] for l, w in tr.route.selected)
    np.testing.assert_allclose(y.data, expected, rtol=1e-12)


def test_edge_score_formula():
    e = ProjectionEdge(0, (0, 0), (1, 0), Parameter("w", np.array([[3.0, 4.0], [0.0, 0.0]])))
    assert edge_score(e) == pytest.approx(5.0 / 2.0)


def test_prune_arithmetic_and_tiebreak():
    graph = make_graph(seed=6, n=3, S=4, h=2)
    n = len(graph.edges)
    for e in graph.edges:
        e.W.value[:] = 1.0 if e.edge_id % 2 else 0.0
    prune_step(graph, 0.5)
    dropped = [e.edge_id for e in graph.edges if not e.active]
    assert len(dropped) == int(np.ceil(n / 2))
    assert dropped == [e.edge_id for e in graph.edges if e.edge_id % 2 == 0]
    assert all(not e.W.trainable for e in graph.edges if not e.active)


def test_prune_sequence_14_7_4():
    graph = make_graph(seed=0, n=2, S=5, h=2)
    for e in graph.edges[14:]:
        e.active = False
    graph.refresh()
    assert len(graph.active_edges()) == 14
    prune_step(graph, 0.5)
    assert len(graph.active_edges()) == 7
    prune_step(graph, 0.5)
    assert len(graph.active_edges()) == 3


def test_prune_with_no_edges_is_noop():
    graph = make_graph(seed=0, n=1, S=4)
    assert prune_step(graph, 0.5) is graph
    with pytest.raises(ConfigError):
        prune_step(graph, 1.0)


def test_add_learner_new_squad():
    graph = make_graph(seed=8, n=3, S=4, h=2)
    before = len(graph.edges)
    spec = LearnerSpec(3, 1, 10, (4, 3, 5), 3, 1)
    add_learner(graph, build_learner(spec, RngStream(1)))
    assert graph.squads[-1] == [3]
    assert graph.tsgate.n_tasks == 2
    new = graph.edges[before:]
    assert all(3 in (e.src[0], e.dst[0]) for e in new)
    assert [e.edge_id for e in new] == list(range(before, len(graph.edges)))
    assert len(graph.edges) == len(brute_force_edges([l.spec for l in graph.learners.values()], 2))
    with pytest.raises(IdError):
        add_learner(graph, build_learner(spec, RngStream(1)))
