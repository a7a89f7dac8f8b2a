import numpy as np
import pytest

from baim import numcore as nc
from baim.composer import routed_elbo, squad_pass
from baim.errors import ConfigError, NumericError
from baim.numcore import Parameter, RngStream
from baim.training import (
    METRICS_HEADER,
    AdamState,
    EpochMetrics,
    Strategy,
    TaskDataset,
    TrainConfig,
    default_prune_schedule,
    evaluate,
    metrics_csv,
    objective,
    optimizer_step,
    train_baim,
    train_gates,
    trainable_set,
)

from conftest import make_graph

pytestmark = pytest.mark.usefixtures("fp64")


def blobs(params):
    return {p.id: p.value.tobytes() for p in params}


def dataset(graph, n=48, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, graph.input_dim))
    return TaskDataset(x, rng.integers(0, graph.n_tasks, n))


def test_adam_first_two_steps_closed_form():
    p = Parameter("w", np.array([1.0, -2.0, 0.5]))
    state = AdamState()
    g1 = np.array([0.3, -0.1, 0.0])
    p.grad[:] = g1
    optimizer_step([p], state, 0.01)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.value, [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 0.1 / (0.1 + 1e-8), 0.5],
                               rtol=1e-12)
    x1 = p.value.copy()
    g2 = np.array([-0.2, -0.1, 0.4])
    p.grad[:] = g2
    optimizer_step([p], state, 0.01)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    expected = x1 - 0.01 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    np.testing.assert_allclose(p.value, expected, rtol=1e-12)


def test_adam_state_survives_layout_change():
    a, b = Parameter("a", np.zeros(2)), Parameter("b", np.zeros(3))
    state = AdamState()
    a.grad[:] = 1.0
    b.grad[:] = 1.0
    optimizer_step([a, b], state, 0.1)
    state.forget({"a"})
    c = Parameter("c", np.zeros(1))
    a.grad[:] = 1.0
    c.grad[:] = 1.0
    optimizer_step([a, c], state, 0.1)
    assert state.t == {"a": 2, "c": 1}
    np.testing.assert_allclose(c.value, [-0.1], rtol=1e-6)
    np.testing.assert_allclose(a.value, [-0.2, -0.2], rtol=1e-6)


def test_default_prune_schedule():
    assert default_prune_schedule(30) == [(12, 0.5), (21, 0.5)]
    assert default_prune_schedule(10) == [(4, 0.5), (7, 0.5)]
    assert default_prune_schedule(2) == []


@pytest.mark.parametrize(
    "kw",
    [dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0), dict(prune_schedule=[(5, 0.5), (3, 0.5)]),
     dict(prune_schedule=[(3, 1.0)]), dict(prune_schedule="weekly"), dict(strategy="distill")],
)
def test_train_config_rejects(kw):
    with pytest.raises((ConfigError, ValueError)):
        TrainConfig(**kw)


def test_metrics_csv_format():
    rows = [EpochMetrics(0, "finetune", 1.5, 2.25, 10, 1.0)]
    text = metrics_csv(rows)
    assert text.splitlines()[0] == METRICS_HEADER
    assert text.splitlines()[1] == "0,finetune,1.500000,2.250000,10,1.000000"


def test_trainable_sets():
    g = make_graph(seed=0, n=3, S=4, tasks=[0, 0, 1])
    learner_ids = {p.id for p in g.learner_parameters()}
    gate_ids = {p.id for p in g.gate_parameters()}
    edge_ids = {p.id for p in g.edge_parameters()}
    assert trainable_set(g, Strategy.FREEZE) == gate_ids | edge_ids
    assert trainable_set(g, Strategy.FINETUNE) == gate_ids | edge_ids | learner_ids
    g.edges[0].active = False
    g.refresh()
    assert g.edges[0].W.id not in trainable_set(g, "finetune")


def test_scratch_reinitializes_nearly_everything():
    g = make_graph(seed=1, n=3, S=4, tasks=[0, 0, 1])
    for p in g.parameters():
        # stand-in for a trained state: biases start at zero and would re-draw to zero
        p.value += np.random.default_rng(0).normal(0, 0.01, p.shape)
    before = {p.id: p.value.copy() for p in g.parameters()}
    trainable_set(g, "scratch", RngStream(3))
    same = sum(int((before[p.id] == p.value).sum()) for p in g.parameters())
    total = sum(p.size for p in g.parameters())
    assert same / total < 0.01


def test_objective_is_per_task_mean_summed_plus_ce():
    g = make_graph(seed=2, n=4, S=4, tasks=[0, 0, 1, 1])
    data = dataset(g, 10)
    with nc.no_grad():
        got = objective(g, data.x, data.task, "eval", None, 1.0).item()
        total = 0.0
        for t in (0, 1):
            rows = data.task == t
            sp = squad_pass(g, t, data.x[rows])
            total += routed_elbo(data.x[rows], sp, g.squads[t], 1.0).data.mean()
        logits = data.x @ g.tsgate.W.value.T + g.tsgate.b.value
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        total += -logp[np.arange(10), data.task].mean()
    assert got == pytest.approx(total, rel=1e-12)


def test_freeze_leaves_learners_byte_identical():
    g = make_graph(seed=3, n=3, S=4, tasks=[0, 0, 1])
    data = dataset(g)
    before = blobs(g.learner_parameters())
    _, metrics = train_baim(g, data, data, TrainConfig("freeze", epochs=2, batch_size=16, prune_schedule=[]))
    assert blobs(g.learner_parameters()) == before
    assert [m.epoch for m in metrics] == [0, 1, 2]


def test_finetune_lowers_loss_and_prunes():
    g = make_graph(seed=4, n=3, S=4, tasks=[0, 0, 1], edge_scale=0.05)
    data = dataset(g, 96)
    _, metrics = train_baim(g, data, data, TrainConfig("finetune", epochs=5, batch_size=16, learning_rate=1e-2))
    assert metrics[-1].test_loss < metrics[0].test_loss
    n = len(g.edges)
    after_first = n - int(np.ceil(n / 2))
    assert [m.active_edges for m in metrics] == [n, n, n, after_first, after_first,
                                                 after_first - int(np.ceil(after_first / 2))]


def test_pruned_edges_stop_updating():
    g = make_graph(seed=5, n=3, S=4, tasks=[0, 0, 0])
    data = dataset(g)
    train_baim(g, data, data, TrainConfig("finetune", epochs=3, batch_size=16, prune_schedule=[(1, 0.5)]))
    pruned = {e.edge_id: e.W.value.copy() for e in g.edges if not e.active}
    train_baim(g, data, data, TrainConfig("freeze", epochs=1, batch_size=16, prune_schedule=[]))
    assert all(np.array_equal(pruned[e.edge_id], e.W.value) for e in g.edges if e.edge_id in pruned)


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        g = make_graph(seed=6, n=3, S=4, tasks=[0, 1, 1])
        data = dataset(g)
        _, m = train_baim(g, data, data, TrainConfig("finetune", epochs=2, batch_size=16, prune_schedule=[(1, 0.5)]))
        runs.append((metrics_csv(m), b"".join(p.value.tobytes() for p in g.parameters())))
    assert runs[0] == runs[1]


def test_huge_learning_rate_aborts_with_diagnostic():
    g = make_graph(seed=7, n=2, S=4)
    data = dataset(g)
    with pytest.raises(NumericError, match="learning rate"):
        train_baim(g, data, data, TrainConfig("finetune", epochs=3, batch_size=8, learning_rate=1e200))


def test_unknown_task_in_data_is_rejected():
    g = make_graph(seed=8, n=2, S=4)
    data = TaskDataset(np.full((4, g.input_dim), 0.5), np.array([0, 1, 0, 1]))
    with pytest.raises(ConfigError):
        train_baim(g, data, data, TrainConfig(epochs=1))


def test_evaluate_routing_accuracy_with_forced_gate():
    g = make_graph(seed=9, n=2, S=4, tasks=[0, 1])
    g.tsgate.W.value[:] = 0
    g.tsgate.b.value[:] = [1.0, 0.0]
    data = TaskDataset(np.full((4, g.input_dim), 0.5), np.array([0, 0, 0, 1]))
    _, acc = evaluate(g, data)
    assert acc == 0.75


def test_train_gates_touches_only_named_gates():
    g = make_graph(seed=10, n=4, S=4, tasks=[0, 0, 1, 1])
    data = dataset(g, 64)
    others = g.learner_parameters() + g.edge_parameters() + g.lsgates[0].parameters()
    before = blobs(others)
    ts, ls1 = g.tsgate.W.value.copy(), g.lsgates[1].W.value.copy()
    metrics = train_gates(g, data, data, epochs=2, lr=1e-2, batch_size=16, lsgate_tasks=[1])
    assert blobs(others) == before
    assert not np.array_equal(ts, g.tsgate.W.value)
    assert not np.array_equal(ls1, g.lsgates[1].W.value)
    assert [m.epoch for m in metrics] == [0, 1, 2]
    with pytest.raises(ConfigError):
        train_gates(g, data, data, epochs=1, lsgate_tasks=[5])
