"""Cloud-side training of the composed graph under the three strategies."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .composer import BaimGraph, prune_step, routed_elbo, squad_pass
from .errors import ConfigError, NumericError
from .gating import init_lsgate, init_tsgate, route_tasks
from .learner import Learner, init_learner_params, vae_forward, elbo_loss
from .numcore import Parameter, RngStream, Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,strategy,train_loss,test_loss,active_edges,routing_accuracy"
EVAL_BATCH = 512


class Strategy(str, Enum):
    FINETUNE = "finetune"
    FREEZE = "freeze"
    SCRATCH = "scratch"


def default_prune_schedule(epochs: int) -> list[tuple[int, float]]:
    """Halve the active edges at 40% and again at 70% of training (keep ratio 0.25)."""
    first, second = round(0.4 * epochs), round(0.7 * epochs)
    if epochs < 3 or not 0 < first < second < epochs:
        return []
    return [(first, 0.5), (second, 0.5)]


@dataclass
class TrainConfig:
    strategy: Strategy = Strategy.FINETUNE
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta: float = 1.0
    prune_schedule: list[tuple[int, float]] | str = "default"
    balance_coeff: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.beta < 0 or self.balance_coeff < 0:
            raise ConfigError("batch_size, learning_rate, beta and balance_coeff must be positive")
        if isinstance(self.prune_schedule, str):
            if self.prune_schedule != "default":
                raise ConfigError(f"unknown prune schedule {self.prune_schedule!r}")
            self.prune_schedule = default_prune_schedule(self.epochs)
        self.prune_schedule = [(int(e), float(f)) for e, f in self.prune_schedule]
        epochs = [e for e, _ in self.prune_schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])) or any(not 0 <= e < self.epochs for e in epochs):
            raise ConfigError("prune schedule epochs must be strictly increasing and < epochs")
        if any(not 0 < f < 1 for _, f in self.prune_schedule):
            raise ConfigError("prune fractions must lie in (0, 1)")


@dataclass
class EpochMetrics:
    epoch: int
    strategy: str
    train_loss: float
    test_loss: float
    active_edges: int
    routing_accuracy: float

    def csv(self) -> str:
        return (
            f"{self.epoch},{self.strategy},{self.train_loss:.6f},{self.test_loss:.6f},"
            f"{self.active_edges},{self.routing_accuracy:.6f}"
        )


def metrics_csv(metrics: Sequence[EpochMetrics]) -> str:
    return "\n".join([METRICS_HEADER] + [m.csv() for m in metrics]) + "\n"


@dataclass
class TaskDataset:
    """Flattened images in [0, 1] with the task each row belongs to."""

    x: np.ndarray
    task: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.task = np.asarray(self.task, dtype=np.int64)
        if self.x.ndim != 2 or self.task.shape != (self.x.shape[0],):
            raise ConfigError(f"dataset shapes x{self.x.shape} / task{self.task.shape} do not match")

    def __len__(self) -> int:
        return self.x.shape[0]

    @classmethod
    def concat(cls, parts: Sequence["TaskDataset"]) -> "TaskDataset":
        return cls(np.concatenate([p.x for p in parts]), np.concatenate([p.task for p in parts]))

    def subset(self, rows) -> "TaskDataset":
        return TaskDataset(self.x[rows], self.task[rows])


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments kept in one flat buffer per parameter layout; ``m``/``v`` hold per-id views."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    _layout: tuple = ()
    _flat: tuple = ()

    def forget(self, keep_ids) -> None:
        for d in (self.m, self.v, self.t):
            for k in [k for k in d if k not in keep_ids]:
                del d[k]
        self._layout = ()

    def _bind(self, params: Sequence[Parameter]) -> None:
        layout = tuple((p.id, p.grad.shape) for p in params)
        if layout == self._layout:
            return
        parts_m, parts_v = [], []
        for p in params:
            m = self.m.get(p.id)
            if m is None or m.shape != p.grad.shape:
                m = np.zeros_like(p.grad)
                self.v[p.id] = np.zeros_like(p.grad)
                self.t[p.id] = 0
            parts_m.append(m.reshape(-1))
            parts_v.append(self.v[p.id].reshape(-1))
        fm, fv = np.concatenate(parts_m), np.concatenate(parts_v)
        offset = 0
        for p in params:
            n = p.grad.size
            self.m[p.id] = fm[offset : offset + n].reshape(p.grad.shape)
            self.v[p.id] = fv[offset : offset + n].reshape(p.grad.shape)
            offset += n
        self._layout, self._flat = layout, (fm, fv)


def optimizer_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update using each parameter's accumulated ``grad``."""
    params = list(params)
    if not params:
        return
    b1, b2 = state.beta1, state.beta2
    state._bind(params)
    m, v = state._flat
    g = np.concatenate([p.grad.reshape(-1) for p in params])
    for p in params:
        state.t[p.id] += 1
    ts = [state.t[p.id] for p in params]
    if min(ts) == max(ts):
        c1, c2 = 1 - b1 ** ts[0], 1 - b2 ** ts[0]
    else:
        sizes = [p.grad.size for p in params]
        tv = np.repeat(np.asarray(ts, dtype=np.float64), sizes)
        c1, c2 = (1 - b1**tv).astype(m.dtype), (1 - b2**tv).astype(m.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = v / c2
        np.sqrt(step, out=step)
        step += state.eps
        np.divide(m, step, out=step)
        step *= lr
        step /= c1
    offset = 0
    for p in params:
        n = p.value.size
        p.value -= step[offset : offset + n].reshape(p.value.shape)
        offset += n


def run_epoch(
    params: Sequence[Parameter],
    n: int,
    batch_size: int,
    lr: float,
    state: AdamState,
    rng: RngStream,
    batch_loss: Callable[[np.ndarray, RngStream], Tensor],
    context: str = "",
) -> float:
    """Shuffle, step through minibatches, return the mean batch loss."""
    perm = rng.child("shuffle").permutation(n)
    losses = []
    for b, start in enumerate(range(0, n, batch_size)):
        rows = np.sort(perm[start : start + batch_size])
        for p in params:
            p.zero_grad()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = batch_loss(rows, rng.child("noise", b))
        except NumericError as exc:
            raise NumericError(f"{context}batch {b}: {exc}; the learning rate ({lr}) is probably too high") from exc
        nc.backward(loss)
        optimizer_step(params, state, lr)
        losses.append(loss.item())
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# strategies


def reinitialize(graph: BaimGraph, rng: RngStream) -> None:
    """Draw every parameter afresh: learners, gates and all projection edges."""
    for lid, lr in graph.learners.items():
        stage_params, mu, logvar = init_learner_params(lr.spec, rng, tag="scratch-init")
        for s, (W, b) in lr.stage_params.items():
            W.value, b.value = stage_params[s][0].value, stage_params[s][1].value
        if lr.mu_head is not None:
            for old, new in zip(lr.mu_head + lr.logvar_head, mu + logvar):
                old.value = new.value
    ts = init_tsgate(graph.n_tasks, graph.input_dim, rng.child("scratch-gates"))
    graph.tsgate.W.value, graph.tsgate.b.value = ts.W.value, ts.b.value
    for g in graph.lsgates:
        new = init_lsgate(g.squad_id, g.n_learners, graph.input_dim, g.K, rng.child("scratch-gates"))
        g.W.value, g.b.value = new.W.value, new.b.value
    edge_rng = rng.child("scratch-edges")
    for e in graph.edges:
        rows, cols = e.W.shape
        a = np.sqrt(6.0 / (rows + cols))
        e.W.value = edge_rng.child(e.edge_id).uniform(-a, a, (rows, cols))
    for p in graph.parameters():
        p.zero_grad()


def trainable_set(graph: BaimGraph, strategy: Strategy | str, rng: RngStream | None = None) -> set[str]:
    """Select (and flag) the parameters a strategy updates.  Scratch re-initializes first."""
    strategy = Strategy(strategy)
    if strategy is Strategy.SCRATCH:
        reinitialize(graph, rng if rng is not None else RngStream(graph.seed).child("scratch"))
    if strategy is Strategy.FREEZE:
        chosen = graph.gate_parameters() + graph.edge_parameters(active_only=True)
    else:
        chosen = graph.gate_parameters() + graph.learner_parameters() + graph.edge_parameters(active_only=True)
    ids = {p.id for p in chosen}
    for p in graph.parameters():
        p.trainable = p.id in ids
    return ids


def objective(
    graph: BaimGraph,
    x: np.ndarray,
    tasks: np.ndarray,
    mode: str,
    rng: RngStream | None,
    beta: float,
    balance_coeff: float = 0.0,
) -> Tensor:
    """Teacher-forced loss: per-task mean routed ELBO summed over tasks, plus routing cross-entropy."""
    terms = []
    for t in np.unique(tasks):
        rows = np.flatnonzero(tasks == t)
        sp = squad_pass(graph, int(t), x[rows], mode, rng)
        terms.append(nc.mean(routed_elbo(x[rows], sp, graph.squads[int(t)], beta)))
        if balance_coeff > 0:
            terms.append(nc.scale(nc.importance_cv2(sp.weights), balance_coeff))
    if graph.n_tasks > 1:
        terms.append(nc.cross_entropy(graph.tsgate.logits(nc.constant(x)), tasks))
    return nc.add_scalars(*terms)


def evaluate(graph: BaimGraph, data: TaskDataset, beta: float = 1.0) -> tuple[float, float]:
    """Eval-mode (per-task mean ELBO summed over tasks, TSGate routing accuracy)."""
    x = data.x.astype(nc.get_dtype(), copy=False)
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    correct = 0
    with nc.no_grad():
        for start in range(0, len(data), EVAL_BATCH):
            xb = x[start : start + EVAL_BATCH]
            tb = data.task[start : start + EVAL_BATCH]
            for t in np.unique(tb):
                rows = np.flatnonzero(tb == t)
                sp = squad_pass(graph, int(t), xb[rows], "eval")
                per = routed_elbo(xb[rows], sp, graph.squads[int(t)], beta)
                sums[int(t)] = sums.get(int(t), 0.0) + float(per.data.astype(np.float64).sum())
                counts[int(t)] = counts.get(int(t), 0) + len(rows)
            correct += int((route_tasks(graph.tsgate, xb) == tb).sum())
    loss = sum(sums[t] / counts[t] for t in sorted(sums))
    return loss, correct / len(data)


def _objective_value(graph, data, cfg) -> float:
    loss, _ = evaluate(graph, data, cfg.beta)
    if graph.n_tasks == 1:
        return loss
    x = data.x.astype(nc.get_dtype(), copy=False)
    with nc.no_grad():
        ce = nc.cross_entropy(graph.tsgate.logits(nc.constant(x)), data.task).item()
    return loss + ce


def train_baim(
    graph: BaimGraph,
    common_train: TaskDataset,
    common_test: TaskDataset,
    cfg: TrainConfig,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> tuple[BaimGraph, list[EpochMetrics]]:
    """Train in place.  Metrics row 0 is the untrained state; row e follows epoch e.

    Row 0 reports the full train-split objective; later rows report the mean
    minibatch objective of that epoch, which costs nothing extra.
    """
    tasks_present = set(np.unique(common_train.task).tolist())
    if not tasks_present <= set(range(graph.n_tasks)):
        raise ConfigError(f"training data names tasks {sorted(tasks_present)} but the graph has {graph.n_tasks}")
    rng = RngStream(cfg.seed).child("cloud-train", cfg.strategy.value)
    trainable_set(graph, cfg.strategy, rng.child("scratch"))
    schedule = dict(cfg.prune_schedule)
    x = common_train.x.astype(nc.get_dtype(), copy=False)
    state = AdamState()
    metrics = []

    def record(epoch, train_loss):
        test_loss, acc = evaluate(graph, common_test, cfg.beta)
        m = EpochMetrics(epoch, cfg.strategy.value, train_loss, test_loss, len(graph.active_edges()), acc)
        metrics.append(m)
        log.info("%s", m.csv())
        if on_epoch:
            on_epoch(m)

    record(0, _objective_value(graph, common_train, cfg))
    for epoch in range(cfg.epochs):
        if epoch in schedule:
            prune_step(graph, schedule[epoch])
            state.forget({p.id for p in graph.parameters() if p.trainable})
        params = [p for p in graph.parameters() if p.trainable]

        def batch_loss(rows, noise_rng):
            return objective(graph, x[rows], common_train.task[rows], "train", noise_rng, cfg.beta, cfg.balance_coeff)

        train_loss = run_epoch(params, len(x), cfg.batch_size, cfg.learning_rate, state, rng.child("epoch", epoch),
                               batch_loss, context=f"{cfg.strategy.value} epoch {epoch + 1} ")
        record(epoch + 1, train_loss)
    return graph, metrics


def train_gates(
    graph: BaimGraph,
    train: TaskDataset,
    test: TaskDataset,
    epochs: int,
    lr: float = 1e-2,
    batch_size: int = 128,
    seed: int = 0,
    lsgate_tasks: Sequence[int] = (),
    beta: float = 1.0,
) -> list[EpochMetrics]:
    """Fit the task gate (and the local gates of ``lsgate_tasks``) with everything else held fixed.

    Used after ``add_learner``: learners, edges and the other squads' gates keep
    their bytes, so outputs for pre-existing tasks under a task override do not move.
    """
    if epochs < 1 or batch_size < 1 or not lr > 0:
        raise ConfigError("train_gates needs epochs >= 1, batch_size >= 1 and lr > 0")
    tasks_present = set(np.unique(train.task).tolist())
    if not tasks_present <= set(range(graph.n_tasks)) or not set(lsgate_tasks) <= set(range(graph.n_tasks)):
        raise ConfigError(f"train_gates: tasks outside 0..{graph.n_tasks - 1}")
    chosen = [graph.tsgate.W, graph.tsgate.b]
    for t in sorted(set(lsgate_tasks)):
        chosen += [graph.lsgates[t].W, graph.lsgates[t].b]
    ids = {p.id for p in chosen}
    for p in graph.parameters():
        p.trainable = p.id in ids
    rng = RngStream(seed).child("gate-train")
    x = train.x.astype(nc.get_dtype(), copy=False)
    state = AdamState()
    metrics = []

    def record(epoch, train_loss):
        test_loss, acc = evaluate(graph, test, beta)
        metrics.append(EpochMetrics(epoch, "gates", train_loss, test_loss, len(graph.active_edges()), acc))

    def batch_loss(rows, noise_rng):
        if not lsgate_tasks:
            return nc.cross_entropy(graph.tsgate.logits(nc.constant(x[rows])), train.task[rows])
        return objective(graph, x[rows], train.task[rows], "train", noise_rng, beta)

    with nc.no_grad():
        record(0, batch_loss(np.arange(len(x)), rng.child("initial")).item())
    for epoch in range(epochs):
        loss = run_epoch(chosen, len(x), batch_size, lr, state, rng.child("epoch", epoch), batch_loss,
                         context=f"gate epoch {epoch + 1} ")
        record(epoch + 1, loss)
    return metrics


def train_learner(
    learner: Learner,
    x_train: np.ndarray,
    x_test: np.ndarray,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    beta: float = 1.0,
    seed: int = 0,
) -> list[float]:
    """Local ELBO training of one learner; returns eval-mode test loss before and after each epoch."""
    params = learner.parameters()
    for p in params:
        p.trainable = True
    rng = RngStream(seed).child("edge-train", learner.learner_id)
    xt = x_train.astype(nc.get_dtype(), copy=False)
    state = AdamState()

    def test_loss():
        with nc.no_grad():
            return elbo_loss(x_test, vae_forward(learner, x_test), beta).item()

    curve = [test_loss()]
    for epoch in range(epochs):

        def batch_loss(rows, noise_rng):
            return elbo_loss(xt[rows], vae_forward(learner, xt[rows], "train", noise_rng), beta)

        run_epoch(params, len(xt), batch_size, lr, state, rng.child("epoch", epoch), batch_loss,
                  context=f"edge learner {learner.learner_id} epoch {epoch + 1} ")
        curve.append(test_loss())
    return curve
