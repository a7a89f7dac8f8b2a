"""Task-oriented partitioning, the ``.baim`` container format and the edge toolbox.

Container layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"BAIMFORG"
    offset 8   u32       format version
    offset 12  u32       manifest length in bytes (m)
    offset 16  m bytes   manifest, UTF-8 JSON with sorted keys
    16+m       u64       blob length in bytes
    24+m       ...       parameter values, IEEE-754 little-endian, manifest order

The manifest lists every parameter as ``[id, shape]``; the blob holds exactly
those values back to back at 4 (fp32) or 8 (fp64) bytes each.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .composer import (
    BaimGraph,
    Node,
    ProjectionEdge,
    SquadPass,
    incoming_map,
    learner_nodes,
    routed_elbo,
    run_squad,
    topological_order,
    graph_arcs,
    upstream_closure,
)
from .errors import FormatError, RangeError
from .gating import LsGate, TsGate
from .learner import Learner, LearnerSpec, check_input
from .numcore import Parameter, RngStream, Tensor

MAGIC = b"BAIMFORG"
VERSION = 1
_WIDTH = {"fp32": 4, "fp64": 8}
_LE = {"fp32": "<f4", "fp64": "<f8"}


@dataclass(eq=False)
class TaskModel:
    """Self-contained per-task model: one LSGate, its squad and the foreign stages feeding it."""

    task_id: int
    lsgate: LsGate
    members: list[int]
    learners: dict[int, Learner]
    edges: list[ProjectionEdge]
    order: list[Node]

    def __post_init__(self):
        self.incoming = incoming_map(self.edges)

    @property
    def input_dim(self) -> int:
        return self.lsgate.W.shape[1]

    @property
    def own_learners(self) -> list[Learner]:
        return [self.learners[l] for l in self.members]

    @property
    def foreign_fragments(self) -> list[Learner]:
        return [lr for l, lr in self.learners.items() if l not in self.members]

    def parameters(self) -> list[Parameter]:
        out = self.lsgate.parameters()
        for lid in sorted(self.learners):
            out.extend(self.learners[lid].parameters())
        out.extend(e.W for e in sorted(self.edges, key=lambda e: e.edge_id))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def extract_task_model(graph: BaimGraph, t: int) -> TaskModel:
    """Copy out squad ``t`` plus the upstream closure of its learners through active edges."""
    if not 0 <= t < graph.n_tasks:
        raise RangeError(f"task {t} outside [0, {graph.n_tasks})")
    members = list(graph.squads[t])
    closure = upstream_closure(learner_nodes(graph.learners, members), graph.learners, graph.incoming)
    depth: dict[int, int] = {}
    for l, s in closure:
        depth[l] = max(depth.get(l, -1), s)
    learners = {l: graph.learners[l].truncated(depth[l]) for l in sorted(depth)}
    edges = [e.copy() for e in graph.edges if e.active and e.dst in closure]
    order = [n for n in graph.order if n in closure]
    return TaskModel(t, graph.lsgates[t].copy(), members, learners, edges, order)


def task_pass(tm: TaskModel, x: np.ndarray, mode: str = "eval", rng: RngStream | None = None) -> SquadPass:
    return run_squad(tm.learners, tm.incoming, tm.order, tm.lsgate, tm.members, x, mode, rng)


def taskmodel_forward(tm: TaskModel, x, mode: str = "eval", rng: RngStream | None = None) -> Tensor:
    xd = check_input(x, tm.input_dim)
    if xd.ndim == 1:
        y = task_pass(tm, xd[None, :], mode, rng).y
        return nc.reshape(y, (y.shape[1],))
    return task_pass(tm, xd, mode, rng).y


def task_loss(tm: TaskModel, x: np.ndarray, mode: str, rng: RngStream | None, beta: float = 1.0) -> Tensor:
    sp = task_pass(tm, x, mode, rng)
    return nc.mean(routed_elbo(x, sp, tm.members, beta))


# ---------------------------------------------------------------------------
# serialization


def _learner_entry(lr: Learner) -> dict:
    return {"spec": lr.spec.to_dict(), "kept": lr.kept}


def _edge_entry(e: ProjectionEdge, with_mask: bool) -> dict:
    d = {"id": e.edge_id, "src": list(e.src), "dst": list(e.dst)}
    if with_mask:
        d["active"] = bool(e.active)
    return d


def _precision_of(params: list[Parameter]) -> str:
    dtypes = {p.value.dtype for p in params}
    if dtypes == {np.dtype(np.float64)}:
        return "fp64"
    if dtypes <= {np.dtype(np.float32)}:
        return "fp32"
    raise FormatError(f"mixed parameter precisions {sorted(map(str, dtypes))}", 0)


def _manifest(model) -> tuple[dict, list[Parameter]]:
    if isinstance(model, Learner):
        params = model.parameters()
        body = {"kind": "learner", "learner": _learner_entry(model)}
    elif isinstance(model, BaimGraph):
        params = model.parameters()
        body = {
            "kind": "graph",
            "h": model.h,
            "seed": model.seed,
            "squads": [list(sq) for sq in model.squads],
            "K": [g.K for g in model.lsgates],
            "learners": [_learner_entry(model.learners[l]) for l in sorted(model.learners)],
            "edges": [_edge_entry(e, True) for e in sorted(model.edges, key=lambda e: e.edge_id)],
            "order": [list(n) for n in model.order],
        }
    elif isinstance(model, TaskModel):
        params = model.parameters()
        body = {
            "kind": "task_model",
            "task_id": model.task_id,
            "members": list(model.members),
            "K": model.lsgate.K,
            "learners": [_learner_entry(model.learners[l]) for l in sorted(model.learners)],
            "edges": [_edge_entry(e, False) for e in sorted(model.edges, key=lambda e: e.edge_id)],
            "order": [list(n) for n in model.order],
        }
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    body["precision"] = _precision_of(params)
    body["params"] = [[p.id, list(p.shape)] for p in params]
    return body, params


def serialize(model) -> bytes:
    """Encode a Learner, BaimGraph or TaskModel as a container."""
    body, params = _manifest(model)
    manifest = json.dumps(body, sort_keys=True, indent=1).encode("utf-8")
    le = _LE[body["precision"]]
    blob = b"".join(p.value.astype(le).tobytes() for p in params)
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(manifest)), manifest, struct.pack("<Q", len(blob)), blob])


def container_size(model) -> int:
    return len(serialize(model))


def save(model, path) -> int:
    data = serialize(model)
    Path(path).write_bytes(data)
    return len(data)


def load(path):
    return deserialize(Path(path).read_bytes())


def _bare_learner(entry: dict) -> Learner:
    spec = LearnerSpec.from_dict(entry["spec"])
    spec.validate()
    kept = int(entry["kept"])
    dt = nc.get_dtype()
    lid, L = spec.learner_id, spec.stage_of_latent

    def pair(name, rows, cols):
        return (Parameter(f"L{lid}.{name}.W", np.zeros((rows, cols), dt)), Parameter(f"L{lid}.{name}.b", np.zeros(rows, dt)))

    stage_params = {s: pair(f"s{s}", spec.out_dim(s), spec.in_dim(s)) for s in range(kept) if s != L}
    heads = kept > L
    mu = pair("mu", spec.latent_dim, spec.in_dim(L)) if heads else None
    logvar = pair("logvar", spec.latent_dim, spec.in_dim(L)) if heads else None
    return Learner(spec, stage_params, mu, logvar, kept=kept)


def _bare_edge(entry: dict, learners: dict[int, Learner]) -> ProjectionEdge:
    src, dst = tuple(entry["src"]), tuple(entry["dst"])
    rows = learners[dst[0]].spec.in_dim(dst[1])
    cols = learners[src[0]].spec.out_dim(src[1])
    eid = int(entry["id"])
    W = Parameter(f"edge{eid}.L{src[0]}s{src[1]}-L{dst[0]}s{dst[1]}.W", np.zeros((rows, cols), nc.get_dtype()))
    active = bool(entry.get("active", True))
    W.trainable = active
    return ProjectionEdge(eid, src, dst, W, active)


def deserialize(data: bytes):
    """Inverse of :func:`serialize`; raises :class:`FormatError` naming the failing offset."""
    data = bytes(data)
    if len(data) < 16:
        raise FormatError("container truncated before the header ends", len(data))
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}", 0)
    version, mlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    if len(data) < 16 + mlen + 8:
        raise FormatError("container truncated inside the manifest", len(data))
    try:
        body = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", 16) from None
    (blen,) = struct.unpack_from("<Q", data, 16 + mlen)
    blob_at = 24 + mlen
    try:
        prec = body["precision"]
        width = _WIDTH[prec]
        table = [(str(pid), tuple(int(d) for d in shape)) for pid, shape in body["params"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest field invalid: {exc!r}", 16) from None
    expected = sum(int(np.prod(shape)) for _, shape in table) * width
    if blen != expected:
        raise FormatError(f"blob length {blen} does not match manifest ({expected})", 16 + mlen)
    if len(data) != blob_at + blen:
        raise FormatError(f"expected {blob_at + blen} bytes, found {len(data)}", min(len(data), blob_at + blen))
    with nc.precision(prec):
        try:
            model, params = _rebuild(body)
        except FormatError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise FormatError(f"manifest field invalid: {exc!r}", 16) from None
    if [(p.id, p.shape) for p in params] != table:
        raise FormatError("manifest parameter table does not match the declared topology", 16)
    off = blob_at
    for p in params:
        n = p.size * width
        p.value = np.frombuffer(data, dtype=_LE[prec], count=p.size, offset=off).astype(p.value.dtype).reshape(p.shape)
        if not np.all(np.isfinite(p.value)):
            raise FormatError(f"parameter {p.id} holds non-finite values", off)
        p.zero_grad()
        off += n
    return model


def _rebuild(body: dict):
    kind = body["kind"]
    if kind == "learner":
        lr = _bare_learner(body["learner"])
        return lr, lr.parameters()
    learners = {}
    for entry in body["learners"]:
        lr = _bare_learner(entry)
        learners[lr.learner_id] = lr
    edges = [_bare_edge(e, learners) for e in body["edges"]]
    order = [tuple(n) for n in body["order"]]
    nodes, arcs = graph_arcs(learners, edges)
    if sorted(order) != sorted(nodes) or topological_order(nodes, arcs) != order:
        raise FormatError("stored execution order is not the topological order of the stored topology", 16)
    dt = nc.get_dtype()
    d = next(iter(learners.values())).spec.input_dim
    if kind == "graph":
        squads = [list(map(int, sq)) for sq in body["squads"]]
        M = len(squads)
        ts = TsGate(Parameter("gate.ts.W", np.zeros((M, d), dt)), Parameter("gate.ts.b", np.zeros(M, dt)))
        ls = [
            LsGate(t, Parameter(f"gate.ls{t}.W", np.zeros((len(sq), d), dt)),
                   Parameter(f"gate.ls{t}.b", np.zeros(len(sq), dt)), int(body["K"][t]))
            for t, sq in enumerate(squads)
        ]
        g = BaimGraph(learners, squads, ts, ls, edges, int(body["h"]), seed=int(body["seed"]))
        return g, g.parameters()
    if kind == "task_model":
        t = int(body["task_id"])
        members = list(map(int, body["members"]))
        gate = LsGate(t, Parameter(f"gate.ls{t}.W", np.zeros((len(members), d), dt)),
                      Parameter(f"gate.ls{t}.b", np.zeros(len(members), dt)), int(body["K"]))
        tm = TaskModel(t, gate, members, learners, edges, order)
        return tm, tm.parameters()
    raise FormatError(f"unknown container kind {kind!r}", 16)


# ---------------------------------------------------------------------------
# edge toolbox


class Toolbox:
    """Edge-side cache of serialized task models keyed by task id."""

    def __init__(self):
        self._models: dict[int, bytes] = {}

    def store(self, task_id: int, data: bytes) -> None:
        self._models[int(task_id)] = bytes(data)

    def __contains__(self, task_id: int) -> bool:
        return int(task_id) in self._models

    def lookup(self, task_id: int) -> TaskModel | None:
        data = self._models.get(int(task_id))
        return None if data is None else deserialize(data)

    def tasks(self) -> list[int]:
        return sorted(self._models)


def toolbox_lookup(toolbox: Toolbox, task_id: int) -> TaskModel | None:
    """Cached model for ``task_id``, or None when the cloud must be asked."""
    return toolbox.lookup(task_id)
