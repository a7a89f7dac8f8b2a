"""Bottom-up composition of edge learners into one sparsely activated graph.

Nodes of the projection graph are ``(learner_id, stage)`` pairs.  Each learner
contributes its own chain ``(l, s-1) -> (l, s)``; a projection edge adds
``W_e @ feature(src)`` to the input of ``dst``.  Edges only run from shallow
to deep (``0 <= j - i <= h``), same-depth edges only from lower to higher
learner id, and never into a latent stage, so the graph is acyclic by
construction and ``(stage, learner_id)`` order is always a valid schedule.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, CycleError, IdError, RangeError
from .gating import (
    LsGate,
    SparseRoute,
    TsGate,
    assemble_route,
    RouteSection,
    init_lsgate,
    init_tsgate,
    route_tasks,
)
from .learner import Learner, LearnerSpec, check_input, encode_latent, latent_noise, stage_forward
from .numcore import Parameter, RngStream, Tensor

log = logging.getLogger(__name__)

Node = tuple[int, int]


@dataclass(eq=False)
class ProjectionEdge:
    edge_id: int
    src: Node
    dst: Node
    W: Parameter
    active: bool = True
    score: float = 0.0

    def copy(self) -> "ProjectionEdge":
        return ProjectionEdge(self.edge_id, self.src, self.dst, self.W.copy(), self.active, self.score)


def edge_allowed(a: LearnerSpec, i: int, b: LearnerSpec, j: int, h: int) -> bool:
    if a.learner_id == b.learner_id:
        return False
    if not (0 <= i < a.n_stages and 0 <= j < b.n_stages):
        return False
    if not 0 <= j - i <= h:
        return False
    if j == i and a.learner_id > b.learner_id:
        return False
    return j != b.stage_of_latent


def candidate_edges(specs: list[LearnerSpec], h: int, involving: int | None = None) -> list[tuple[Node, Node]]:
    """All (src, dst) pairs permitted by the connection rules, ordered by (dst, src).

    ``involving`` restricts the result to pairs touching that learner id.
    """
    by_id = sorted(specs, key=lambda s: s.learner_id)
    out = []
    for b in by_id:
        for j in range(b.n_stages):
            if j == b.stage_of_latent:
                continue
            for a in by_id:
                if involving is not None and involving not in (a.learner_id, b.learner_id):
                    continue
                for i in range(max(0, j - h), min(j, a.n_stages - 1) + 1):
                    if edge_allowed(a, i, b, j, h):
                        out.append(((a.learner_id, i), (b.learner_id, j)))
    return out


@dataclass(frozen=True)
class ActivationTrace:
    route: SparseRoute
    executed: frozenset
    edge_hits: frozenset


@dataclass(eq=False)
class BaimGraph:
    learners: dict[int, Learner]
    squads: list[list[int]]
    tsgate: TsGate
    lsgates: list[LsGate]
    edges: list[ProjectionEdge]
    h: int
    seed: int = 0
    order: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self.refresh()

    @property
    def n_tasks(self) -> int:
        return len(self.squads)

    @property
    def n_learners(self) -> int:
        return len(self.learners)

    @property
    def input_dim(self) -> int:
        return self.tsgate.W.shape[1]

    def refresh(self) -> None:
        """Recompute cached lookups after a structural change."""
        self.incoming = incoming_map(self.edges)
        self.order = validate_acyclic(self)

    def learner_parameters(self) -> list[Parameter]:
        return [p for lid in sorted(self.learners) for p in self.learners[lid].parameters()]

    def gate_parameters(self) -> list[Parameter]:
        out = self.tsgate.parameters()
        for g in self.lsgates:
            out.extend(g.parameters())
        return out

    def edge_parameters(self, active_only: bool = False) -> list[Parameter]:
        return [e.W for e in self.edges if e.active or not active_only]

    def parameters(self) -> list[Parameter]:
        """Canonical order: gates, learners by id, edges by id."""
        return self.gate_parameters() + self.learner_parameters() + self.edge_parameters()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def active_edges(self) -> list[ProjectionEdge]:
        return [e for e in self.edges if e.active]

    def squad_of(self, learner_id: int) -> int:
        for t, sq in enumerate(self.squads):
            if learner_id in sq:
                return t
        raise IdError(f"learner {learner_id} is in no squad")


def incoming_map(edges) -> dict[Node, list[ProjectionEdge]]:
    out: dict[Node, list[ProjectionEdge]] = {}
    for e in sorted(edges, key=lambda e: e.edge_id):
        if e.active:
            out.setdefault(e.dst, []).append(e)
    return out


def compose(
    learners: list[Learner],
    squads: list[list[int]] | None = None,
    h: int = 2,
    rng: RngStream | None = None,
    K: int = 2,
) -> BaimGraph:
    """Group learners into squads, attach gates and create every candidate edge at zero weight."""
    if h < 0:
        raise ConfigError("connection height h must be >= 0")
    if not learners:
        raise ConfigError("need at least one learner")
    rng = rng or RngStream(0)
    by_id = {}
    for lr in learners:
        if lr.learner_id in by_id:
            raise IdError(f"duplicate learner id {lr.learner_id}")
        lr.spec.validate()
        by_id[lr.learner_id] = lr
    input_dims = {lr.spec.input_dim for lr in learners}
    if len(input_dims) != 1:
        raise ConfigError(f"learners must share one input space, got input dims {sorted(input_dims)}")
    input_dim = input_dims.pop()
    if squads is None:
        n_tasks = max(lr.spec.task_id for lr in learners) + 1
        squads = [sorted(l for l, lr in by_id.items() if lr.spec.task_id == t) for t in range(n_tasks)]
    squads = [list(sq) for sq in squads]
    for t, sq in enumerate(squads):
        if not sq:
            raise ConfigError(f"squad {t} is empty")
        for lid in sq:
            if lid not in by_id:
                raise IdError(f"squad {t} names unknown learner {lid}")
            if by_id[lid].spec.task_id != t:
                raise ConfigError(f"learner {lid} has task_id {by_id[lid].spec.task_id} but sits in squad {t}")
    flat = [l for sq in squads for l in sq]
    if sorted(flat) != sorted(by_id):
        raise ConfigError("squads must partition the learner ids")
    dtype = nc.get_dtype()
    edges = []
    for src, dst in candidate_edges([lr.spec for lr in learners], h):
        edges.append(_zero_edge(len(edges), src, dst, by_id, dtype))
    tsgate = init_tsgate(len(squads), input_dim, rng)
    lsgates = [init_lsgate(t, len(sq), input_dim, min(K, len(sq)), rng) for t, sq in enumerate(squads)]
    return BaimGraph(dict(sorted(by_id.items())), squads, tsgate, lsgates, edges, h, seed=rng.seed)


def _zero_edge(edge_id, src, dst, by_id, dtype) -> ProjectionEdge:
    rows = by_id[dst[0]].spec.in_dim(dst[1])
    cols = by_id[src[0]].spec.out_dim(src[1])
    W = Parameter(f"edge{edge_id}.L{src[0]}s{src[1]}-L{dst[0]}s{dst[1]}.W", np.zeros((rows, cols), dtype=dtype))
    return ProjectionEdge(edge_id, src, dst, W)


def topological_order(nodes, arcs) -> list[Node]:
    """Kahn's algorithm, smallest ``(stage, learner)`` first; raises :class:`CycleError`."""
    succ: dict = {n: [] for n in nodes}
    indeg = {n: 0 for n in nodes}
    for u, v in arcs:
        succ[u].append(v)
        indeg[v] += 1
    heap = [(n[1], n[0]) for n in nodes if indeg[n] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        s, l = heapq.heappop(heap)
        n = (l, s)
        order.append(n)
        for v in succ[n]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, (v[1], v[0]))
    if len(order) < len(nodes):
        raise CycleError(_find_cycle({n for n in nodes if indeg[n] > 0}, succ))
    return order


def _find_cycle(remaining, succ) -> list[Node]:
    """Walk predecessors inside the unsorted remainder; every such node has one, so the walk must loop."""
    pred: dict = {n: [] for n in remaining}
    for u, vs in succ.items():
        if u in remaining:
            for v in vs:
                if v in remaining:
                    pred[v].append(u)
    path, pos = [], {}
    node = min(remaining)
    while node not in pos:
        pos[node] = len(path)
        path.append(node)
        node = min(pred[node])
    cycle = path[pos[node] :] + [node]
    return cycle[::-1]


def graph_arcs(learners: dict[int, Learner], edges) -> tuple[list[Node], list[tuple[Node, Node]]]:
    nodes, arcs = [], []
    for lid, lr in learners.items():
        for s in range(lr.kept):
            nodes.append((lid, s))
            if s > 0:
                arcs.append(((lid, s - 1), (lid, s)))
    arcs.extend((e.src, e.dst) for e in edges)
    return nodes, arcs


def validate_acyclic(graph) -> list[Node]:
    """Topological order over (learner, stage) nodes including every edge, active or not."""
    nodes, arcs = graph_arcs(graph.learners, graph.edges)
    return topological_order(nodes, arcs)


def upstream_closure(targets, learners: dict[int, Learner], incoming) -> set[Node]:
    seen = set()
    stack = list(targets)
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        l, s = node
        if s > 0:
            stack.append((l, s - 1))
        for e in incoming.get(node, ()):
            stack.append(e.src)
    return seen


def learner_nodes(learners: dict[int, Learner], ids) -> list[Node]:
    return [(l, s) for l in ids for s in range(learners[l].spec.n_stages)]


@dataclass
class SquadPass:
    y: Tensor
    weights: Tensor
    selected: np.ndarray
    features: dict
    latents: dict
    executed: set


def run_squad(
    learners: dict[int, Learner],
    incoming: dict,
    order: list[Node],
    lsgate: LsGate,
    members: list[int],
    x: np.ndarray,
    mode: str = "eval",
    rng: RngStream | None = None,
) -> SquadPass:
    """Sparse forward of one squad on a batch ``x`` of shape (B, input_dim).

    Stages outside the upstream closure of the learners selected by any row
    are never executed.  Shared by the full graph and by extracted task models,
    which is what makes their outputs bit-identical.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an RngStream")
    xc = nc.constant(x)
    weights, idx = nc.topk_softmax(lsgate.logits(xc), lsgate.K)
    chosen = sorted({members[i] for i in np.unique(idx)})
    needed = upstream_closure(learner_nodes(learners, chosen), learners, incoming)
    feats: dict[Node, Tensor] = {}
    z: dict[int, Tensor] = {}
    latents = {}
    for node in order:
        if node not in needed:
            continue
        l, s = node
        lr = learners[l]
        L = lr.spec.stage_of_latent
        if s == 0:
            inp = xc
        elif s - 1 == L:
            inp = z[l]
        else:
            inp = feats[(l, s - 1)]
        if s == L:
            mu, logvar = encode_latent(lr, inp)
            if mode == "train":
                z[l] = nc.reparameterize(mu, logvar, latent_noise(rng, l, mu.shape))
            else:
                z[l] = mu
            feats[node] = mu
            latents[l] = (mu, logvar)
            continue
        edges = incoming.get(node)
        inj = None
        if edges:
            inj = nc.multi_linear([feats[e.src] for e in edges], [e.W.leaf() for e in edges])
        feats[node] = stage_forward(lr, s, inp, inj)
    parts = [feats[(l, learners[l].spec.output_stage)] if l in chosen else None for l in members]
    y = nc.mix(weights, parts)
    return SquadPass(y, weights, idx, feats, latents, needed)


def routed_elbo(x: np.ndarray, sp: SquadPass, members: list[int], beta: float) -> Tensor:
    """Per-row loss of a routed output: BCE(x, y) + beta * gate-weighted KL of the selected learners."""
    rec = nc.bce_sum(x, sp.y)
    if beta == 0:
        return rec
    kls = []
    for l in members:
        if l in sp.latents:
            kl = nc.kl_normal(*sp.latents[l])
            kls.append(nc.reshape(kl, (kl.shape[0], 1)))
        else:
            kls.append(None)
    kl_mix = nc.mix(sp.weights, kls)
    return nc.add(rec, nc.scale(nc.reshape(kl_mix, (kl_mix.shape[0],)), beta))


def squad_pass(graph: BaimGraph, task: int, x: np.ndarray, mode: str = "eval", rng: RngStream | None = None) -> SquadPass:
    return run_squad(graph.learners, graph.incoming, graph.order, graph.lsgates[task], graph.squads[task], x, mode, rng)


class _TraceBuilder:
    def __init__(self, learners, incoming, squads):
        self.learners, self.incoming, self.squads = learners, incoming, squads
        self._cache = {}

    def __call__(self, task: int, local: tuple[int, ...], weights: tuple[float, ...]) -> ActivationTrace:
        route = assemble_route(task, RouteSection(task, local, weights), self.squads)
        key = frozenset(l for l, _ in route.selected)
        if key not in self._cache:
            executed = frozenset(upstream_closure(learner_nodes(self.learners, sorted(key)), self.learners, self.incoming))
            hits = frozenset(e.edge_id for es in self.incoming.values() for e in es if e.dst in executed)
            self._cache[key] = (executed, hits)
        executed, hits = self._cache[key]
        return ActivationTrace(route, executed, hits)


def build_traces(learners, incoming, squads, task, sp: SquadPass, tb=None) -> list[ActivationTrace]:
    tb = tb or _TraceBuilder(learners, incoming, squads)
    w = sp.weights.data
    out = []
    for r in range(w.shape[0]):
        local = tuple(int(i) for i in sp.selected[r])
        out.append(tb(task, local, tuple(float(w[r, i]) for i in local)))
    return out


def baim_forward(
    graph: BaimGraph,
    x,
    mode: str = "eval",
    task_override: int | None = None,
    rng: RngStream | None = None,
):
    """Route, sparsely execute and mix.

    A single input vector returns ``(y, ActivationTrace)``; a (B, d) batch
    returns ``(Y, [ActivationTrace per row])``.
    """
    xd = check_input(x, graph.input_dim)
    single = xd.ndim == 1
    xb = xd[None, :] if single else xd
    if task_override is not None:
        if not 0 <= task_override < graph.n_tasks:
            raise RangeError(f"task override {task_override} outside [0, {graph.n_tasks})")
        tasks = np.full(xb.shape[0], task_override)
    else:
        tasks = route_tasks(graph.tsgate, xb)
    tb = _TraceBuilder(graph.learners, graph.incoming, graph.squads)
    traces: list = [None] * xb.shape[0]
    parts, rows = [], []
    for t in np.unique(tasks):
        r = np.flatnonzero(tasks == t)
        sp = squad_pass(graph, int(t), xb[r], mode, rng)
        for k, tr in zip(r, build_traces(graph.learners, graph.incoming, graph.squads, int(t), sp, tb)):
            traces[k] = tr
        parts.append(sp.y)
        rows.append(r)
    if len(parts) == 1:
        y = parts[0]
    else:
        y = nc.scatter_rows(parts, rows, xb.shape[0])
    if single:
        return nc.reshape(y, (y.shape[1],)), traces[0]
    return y, traces


def edge_score(e: ProjectionEdge) -> float:
    rows, cols = e.W.shape
    return float(np.linalg.norm(e.W.value.astype(np.float64)) / math.sqrt(rows * cols))


def prune_step(graph: BaimGraph, fraction: float) -> BaimGraph:
    """Deactivate the ceil(fraction * active) weakest active edges."""
    if not 0 < fraction < 1:
        raise ConfigError(f"prune fraction must lie in (0, 1), got {fraction}")
    active = graph.active_edges()
    if not active:
        log.warning("prune_step: no active edges left; nothing to prune")
        return graph
    for e in active:
        e.score = edge_score(e)
    n_drop = math.ceil(fraction * len(active))
    for e in sorted(active, key=lambda e: (e.score, e.edge_id))[:n_drop]:
        e.active = False
        e.W.trainable = False
    graph.refresh()
    return graph


def add_learner(
    graph: BaimGraph,
    learner: Learner,
    task_id: int | None = None,
    rng: RngStream | None = None,
    K: int | None = None,
) -> BaimGraph:
    """Append a learner to squad ``task_id``, or to a new squad when ``task_id`` is None.

    New edges start at zero and pre-existing parameter values are left as they are.
    """
    lid = learner.learner_id
    if lid in graph.learners:
        raise IdError(f"learner id {lid} already present")
    learner.spec.validate()
    if learner.spec.input_dim != graph.input_dim:
        raise ConfigError("new learner does not share the graph's input space")
    rng = rng or RngStream(graph.seed).child("add-learner", lid)
    new_task = task_id is None
    t = graph.n_tasks if new_task else task_id
    if not 0 <= t <= graph.n_tasks or (not new_task and t == graph.n_tasks):
        raise ConfigError(f"task {task_id} does not exist")
    if learner.spec.task_id != t:
        raise ConfigError(f"learner {lid} declares task {learner.spec.task_id}, expected {t}")
    dtype = nc.get_dtype()
    graph.learners[lid] = learner
    graph.learners = dict(sorted(graph.learners.items()))
    if new_task:
        graph.squads.append([lid])
        row = init_tsgate(1, graph.input_dim, rng.child("ts-row")).W.value
        graph.tsgate.W.value = np.vstack([graph.tsgate.W.value, row]).astype(dtype)
        graph.tsgate.b.value = np.append(graph.tsgate.b.value, dtype(0)).astype(dtype)
        graph.tsgate.W.zero_grad()
        graph.tsgate.b.zero_grad()
        k = 1 if K is None else K
        graph.lsgates.append(init_lsgate(t, 1, graph.input_dim, min(k, 1), rng))
    else:
        graph.squads[t].append(lid)
        gate = graph.lsgates[t]
        row = init_lsgate(t, 1, graph.input_dim, 1, rng.child("ls-row")).W.value
        gate.W.value = np.vstack([gate.W.value, row]).astype(dtype)
        gate.b.value = np.append(gate.b.value, dtype(0)).astype(dtype)
        gate.W.zero_grad()
        gate.b.zero_grad()
        if K is not None:
            gate.K = min(K, gate.n_learners)
    next_id = max((e.edge_id for e in graph.edges), default=-1) + 1
    for src, dst in candidate_edges([lr.spec for lr in graph.learners.values()], graph.h, involving=lid):
        graph.edges.append(_zero_edge(next_id, src, dst, graph.learners, dtype))
        next_id += 1
    graph.refresh()
    return graph
