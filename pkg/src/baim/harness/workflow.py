"""Edge-cloud lifecycle: local training, upload, composition, cloud training,
extraction and download, personalization, evaluation.

Every payload that crosses the edge-cloud boundary is a serialized container,
and the byte counters add up exactly those container lengths.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .. import numcore as nc
from ..composer import BaimGraph, compose
from ..deployment import TaskModel, Toolbox, deserialize, extract_task_model, serialize, task_loss, task_pass
from ..errors import BaimError, ConfigError, NumericError, PhaseError
from ..learner import Learner, LearnerSpec, build_learner, elbo_loss, vae_forward
from ..training import AdamState, EpochMetrics, Strategy, TaskDataset, TrainConfig, run_epoch, train_baim, train_learner
from .data import FAMILIES, SyntheticTaskSpec, gen_dataset
from .metrics import frechet_proxy

log = logging.getLogger(__name__)

PHASES = ("init", "edge", "upload", "compose", "cloud", "deploy", "personalize", "evaluate")


@dataclass
class WorkflowConfig:
    seed: int = 0
    n_nodes: int = 10
    families: list[str] = field(default_factory=lambda: ["blobs"])
    node_tasks: list[int] | None = None
    image_side: int = 16
    n_stages: int = 5
    latent_stage: int = 2
    train_per_node: int = 2000
    test_per_node: int = 500
    common_ratio: float = 0.25
    edge_epochs: int = 20
    cloud_epochs: int = 30
    personalize_epochs: int = 5
    learning_rate: float = 1e-3
    personalize_lr: float = 5e-4
    batch_size: int = 64
    cloud_batch_size: int = 128
    beta: float = 1.0
    h: int = 2
    K: int = 2
    strategies: list[str] = field(default_factory=lambda: ["finetune", "freeze", "scratch"])
    deploy_strategy: str = "finetune"
    prune_schedule: Any = "default"
    balance_coeff: float = 0.0
    precision: str = "fp32"
    workers: int = 1

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ConfigError("n_nodes must be >= 1")
        for f in self.families:
            if f not in FAMILIES:
                raise ConfigError(f"unknown family {f!r}")
        if self.node_tasks is None:
            self.node_tasks = [i % len(self.families) for i in range(self.n_nodes)]
        self.node_tasks = [int(t) for t in self.node_tasks]
        if len(self.node_tasks) != self.n_nodes or set(self.node_tasks) != set(range(len(self.families))):
            raise ConfigError("node_tasks must give every node a task and every task a node")
        self.strategies = [Strategy(s).value for s in self.strategies]
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        self.deploy_strategy = Strategy(self.deploy_strategy).value
        if self.deploy_strategy not in self.strategies:
            raise ConfigError(f"deploy_strategy {self.deploy_strategy!r} is not among the trained strategies")
        if not 0 < self.common_ratio <= 1:
            raise ConfigError("common_ratio must lie in (0, 1]")
        if self.precision not in ("fp32", "fp64"):
            raise ConfigError("precision must be fp32 or fp64")
        if self.n_stages < 3 or not 0 < self.latent_stage < self.n_stages - 1:
            raise ConfigError("need n_stages >= 3 and 0 < latent_stage < n_stages - 1")

    @property
    def n_tasks(self) -> int:
        return len(self.families)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkflowConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "WorkflowConfig":
        try:
            text = Path(path).read_text()
            d = yaml.safe_load(text) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(d)

    def train_config(self, strategy: str) -> TrainConfig:
        return TrainConfig(
            strategy=strategy,
            epochs=self.cloud_epochs,
            batch_size=self.cloud_batch_size,
            learning_rate=self.learning_rate,
            beta=self.beta,
            prune_schedule=self.prune_schedule,
            balance_coeff=self.balance_coeff,
            seed=self.seed,
        )

    def task_spec(self, task: int) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(task, self.families[task], self.image_side)


def node_learner_spec(cfg: WorkflowConfig, node_id: int) -> LearnerSpec:
    """Heterogeneous architecture for a node: widths and latent size vary with the node id."""
    d = cfg.image_side**2
    first = (24, 32, 40)[node_id % 3]
    latent = (6, 8, 10, 12)[node_id % 4]
    mid = (16, 20, 24)[(node_id // 3) % 3]
    L = cfg.latent_stage
    enc = list(np.linspace(first, mid, L).round().astype(int)) if L > 1 else [first]
    n_dec = cfg.n_stages - 2 - L
    dec_w = (16, 20, 24)[(node_id + 1) % 3]
    dec = list(np.linspace(dec_w, max(dec_w, first), n_dec).round().astype(int)) if n_dec > 0 else []
    return LearnerSpec(node_id, cfg.node_tasks[node_id], d, tuple(int(w) for w in enc + [latent] + dec), latent, L)


@dataclass(eq=False)
class EdgeNode:
    node_id: int
    task_id: int
    local_train: TaskDataset
    local_test: TaskDataset
    learner: Learner
    seed: int
    toolbox: Toolbox = field(default_factory=Toolbox)
    initial_learner: Learner | None = None
    task_model: TaskModel | None = None


def node_datasets(cfg: WorkflowConfig, node_id: int) -> tuple[TaskDataset, TaskDataset]:
    spec = cfg.task_spec(cfg.node_tasks[node_id])
    return (
        gen_dataset(spec, node_id, cfg.train_per_node, cfg.seed, "train"),
        gen_dataset(spec, node_id, cfg.test_per_node, cfg.seed, "test"),
    )


def common_datasets(cfg: WorkflowConfig) -> tuple[TaskDataset, TaskDataset]:
    """Cloud-held pool: fresh held-out draws from every node's distribution."""
    n_train = max(1, round(cfg.common_ratio * cfg.train_per_node))
    n_test = max(1, round(cfg.common_ratio * cfg.test_per_node))
    train, test = [], []
    for node in range(cfg.n_nodes):
        spec = cfg.task_spec(cfg.node_tasks[node])
        train.append(gen_dataset(spec, node, n_train, cfg.seed, "common-train"))
        test.append(gen_dataset(spec, node, n_test, cfg.seed, "common-test"))
    return TaskDataset.concat(train), TaskDataset.concat(test)


def make_node(cfg: WorkflowConfig, node_id: int) -> EdgeNode:
    train, test = node_datasets(cfg, node_id)
    learner = build_learner(node_learner_spec(cfg, node_id), nc.RngStream(cfg.seed).child("node", node_id))
    return EdgeNode(node_id, cfg.node_tasks[node_id], train, test, learner, cfg.seed)


def edge_train(node: EdgeNode, epochs: int, lr: float, batch_size: int = 64, beta: float = 1.0):
    """Local ELBO training; the curve holds the test loss before and after each epoch."""
    curve = train_learner(node.learner, node.local_train.x, node.local_test.x, epochs, lr, batch_size, beta, node.seed)
    return node, curve


def reconstructions(model, x: np.ndarray) -> np.ndarray:
    with nc.no_grad():
        if isinstance(model, Learner):
            return vae_forward(model, x).x_hat.data
        return task_pass(model, x.astype(nc.get_dtype(), copy=False)).y.data


def personalize(node: EdgeNode, task_model: TaskModel, epochs: int, lr: float, batch_size: int = 64, beta: float = 1.0):
    """Fine-tune every task-model parameter on the node's local data."""
    if task_model.task_id != node.task_id:
        raise ConfigError(f"node {node.node_id} serves task {node.task_id}, got a model for task {task_model.task_id}")
    params = task_model.parameters()
    for p in params:
        p.trainable = True
    x = node.local_train.x.astype(nc.get_dtype(), copy=False)
    xt = node.local_test.x.astype(nc.get_dtype(), copy=False)

    def test_loss():
        with nc.no_grad():
            return task_loss(task_model, xt, "eval", None, beta).item()

    before = test_loss()
    rng = nc.RngStream(node.seed).child("personalize", node.node_id)
    state = AdamState()
    for epoch in range(epochs):
        run_epoch(params, len(x), batch_size, lr, state, rng.child("epoch", epoch),
                  lambda rows, r: task_loss(task_model, x[rows], "train", r, beta),
                  context=f"personalize node {node.node_id} epoch {epoch + 1} ")
    metrics = {
        "test_loss_before": before,
        "test_loss_after": test_loss(),
        "frechet": frechet_proxy(node.local_test.x, reconstructions(task_model, xt)),
    }
    return task_model, metrics


def _train_node_job(args):
    cfg_dict, node_id = args
    cfg = WorkflowConfig.from_dict(cfg_dict)
    with nc.precision(cfg.precision):
        node = make_node(cfg, node_id)
        _, curve = edge_train(node, cfg.edge_epochs, cfg.learning_rate, cfg.batch_size, cfg.beta)
        return node_id, serialize(node.learner), curve


@dataclass
class WorkflowReport:
    config: dict
    edge_losses: dict[int, list[float]] = field(default_factory=dict)
    upload_bytes: dict[int, int] = field(default_factory=dict)
    bytes_uploaded: int = 0
    candidate_edges: int = 0
    full_graph_params: int = 0
    baim_metrics: dict[str, list[dict]] = field(default_factory=dict)
    strategy_frechet: dict[str, float] = field(default_factory=dict)
    task_model_params: dict[int, int] = field(default_factory=dict)
    download_bytes: dict[int, int] = field(default_factory=dict)
    bytes_downloaded: int = 0
    personalization: dict[int, dict] = field(default_factory=dict)
    frechet_before: dict[int, float] = field(default_factory=dict)
    frechet_after: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    def metrics_csv(self) -> str:
        from ..training import METRICS_HEADER

        lines = [METRICS_HEADER]
        for strat in sorted(self.baim_metrics):
            lines.extend(EpochMetrics(**m).csv() for m in self.baim_metrics[strat])
        return "\n".join(lines) + "\n"

    def improved_nodes(self) -> int:
        return sum(self.frechet_after[n] <= self.frechet_before[n] for n in self.frechet_before)


class Workflow:
    """Phase-by-phase driver; each phase asserts that its predecessor ran."""

    def __init__(self, cfg: WorkflowConfig):
        self.cfg = cfg
        self.phase = "init"
        self.report = WorkflowReport(config=asdict(cfg))
        self.nodes: list[EdgeNode] = []
        self.uploaded: list[Learner] = []
        self.graph: BaimGraph | None = None
        self.trained: dict[str, BaimGraph] = {}
        self.common_train, self.common_test = None, None

    def _advance(self, phase: str) -> None:
        expected = PHASES[PHASES.index(phase) - 1]
        if self.phase != expected:
            raise PhaseError(phase, f"cannot run before phase {expected!r} (current phase: {self.phase!r})")
        self.phase = phase

    def run(self) -> WorkflowReport:
        for phase in PHASES[1:]:
            try:
                with nc.precision(self.cfg.precision):
                    getattr(self, f"{phase}_phase")()
            except PhaseError:
                raise
            except NumericError as exc:
                raise NumericError(f"[{phase}] {exc}") from exc
            except BaimError as exc:
                raise PhaseError(phase, str(exc)) from exc
        return self.report

    def edge_phase(self) -> None:
        self._advance("edge")
        cfg = self.cfg
        self.nodes = [make_node(cfg, n) for n in range(cfg.n_nodes)]
        if cfg.workers > 1:
            jobs = [(asdict(cfg), n) for n in range(cfg.n_nodes)]
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                results = sorted(pool.map(_train_node_job, jobs))
            for node_id, data, curve in results:
                self.nodes[node_id].learner = deserialize(data)
                self.report.edge_losses[node_id] = curve
        else:
            for node in self.nodes:
                _, curve = edge_train(node, cfg.edge_epochs, cfg.learning_rate, cfg.batch_size, cfg.beta)
                self.report.edge_losses[node.node_id] = curve
        for node in self.nodes:
            node.initial_learner = node.learner.copy()

    def upload_phase(self) -> None:
        self._advance("upload")
        for node in self.nodes:
            data = serialize(node.learner)
            self.report.upload_bytes[node.node_id] = len(data)
            self.report.bytes_uploaded += len(data)
            self.uploaded.append(deserialize(data))

    def compose_phase(self) -> None:
        self._advance("compose")
        rng = nc.RngStream(self.cfg.seed).child("compose")
        self.graph = compose(self.uploaded, None, self.cfg.h, rng, self.cfg.K)
        self.report.candidate_edges = len(self.graph.edges)
        self.report.full_graph_params = self.graph.param_count()
        self.common_train, self.common_test = common_datasets(self.cfg)

    def cloud_phase(self) -> None:
        self._advance("cloud")
        snapshot = serialize(self.graph)
        for strat in self.cfg.strategies:
            graph = deserialize(snapshot)
            _, metrics = train_baim(graph, self.common_train, self.common_test, self.cfg.train_config(strat))
            self.trained[strat] = graph
            self.report.baim_metrics[strat] = [asdict(m) for m in metrics]
            self.report.strategy_frechet[strat] = graph_frechet(graph, self.common_test)

    def deploy_phase(self) -> None:
        self._advance("deploy")
        graph = self.trained[self.cfg.deploy_strategy]
        cloud_cache: dict[int, bytes] = {}
        for t in range(graph.n_tasks):
            cloud_cache[t] = serialize(extract_task_model(graph, t))
            self.report.task_model_params[t] = deserialize(cloud_cache[t]).param_count()
        for node in self.nodes:
            tm = node.toolbox.lookup(node.task_id)
            if tm is None:
                data = cloud_cache[node.task_id]
                self.report.download_bytes[node.node_id] = len(data)
                self.report.bytes_downloaded += len(data)
                node.toolbox.store(node.task_id, data)
                tm = node.toolbox.lookup(node.task_id)
            node.task_model = tm

    def personalize_phase(self) -> None:
        self._advance("personalize")
        for node in self.nodes:
            _, m = personalize(node, node.task_model, self.cfg.personalize_epochs, self.cfg.personalize_lr,
                               self.cfg.batch_size, self.cfg.beta)
            self.report.personalization[node.node_id] = m

    def evaluate_phase(self) -> None:
        self._advance("evaluate")
        for node in self.nodes:
            real = node.local_test.x
            self.report.frechet_before[node.node_id] = frechet_proxy(real, reconstructions(node.initial_learner, real))
            self.report.frechet_after[node.node_id] = self.report.personalization[node.node_id]["frechet"]


def graph_frechet(graph: BaimGraph, data: TaskDataset) -> float:
    """Fréchet proxy of task-forced reconstructions over a labelled pool."""
    from ..composer import squad_pass

    x = data.x.astype(nc.get_dtype(), copy=False)
    out = np.empty_like(x)
    with nc.no_grad():
        for t in np.unique(data.task):
            rows = np.flatnonzero(data.task == t)
            out[rows] = squad_pass(graph, int(t), x[rows]).y.data
    return frechet_proxy(data.x, out)


def run_workflow(config: WorkflowConfig | dict) -> WorkflowReport:
    cfg = config if isinstance(config, WorkflowConfig) else WorkflowConfig.from_dict(config)
    return Workflow(cfg).run()


def sample_rows(wf: Workflow, node_id: int = 0, n: int = 8) -> dict[str, np.ndarray]:
    """Real test images of one node next to its edge-model and personalized reconstructions."""
    node = wf.nodes[node_id]
    real = node.local_test.x[:n]
    rows = {"real": real}
    if node.initial_learner is not None:
        rows["edge model"] = reconstructions(node.initial_learner, real)
    if node.task_model is not None and wf.phase in ("personalize", "evaluate"):
        rows["personalized"] = reconstructions(node.task_model, real)
    return rows
