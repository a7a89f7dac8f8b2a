"""Hierarchical gating: a task-selecting gate over per-squad learner-selecting gates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError, RangeError
from .numcore import Parameter, RngStream, Tensor

GATE_SALT = "gate-init"


@dataclass(eq=False)
class TsGate:
    W: Parameter
    b: Parameter

    @property
    def n_tasks(self) -> int:
        return self.W.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]

    def logits(self, x: Tensor) -> Tensor:
        return nc.apply_linear(self.W.leaf(), self.b.leaf(), x)


@dataclass(eq=False)
class LsGate:
    squad_id: int
    W: Parameter
    b: Parameter
    K: int

    @property
    def n_learners(self) -> int:
        return self.W.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]

    def logits(self, x: Tensor) -> Tensor:
        return nc.apply_linear(self.W.leaf(), self.b.leaf(), x)

    def copy(self) -> "LsGate":
        return LsGate(self.squad_id, self.W.copy(), self.b.copy(), self.K)


@dataclass(frozen=True)
class RouteSection:
    """Top-K choice inside one squad: squad-local indices, highest logit first."""

    squad_id: int
    local: tuple[int, ...]
    weights: tuple[float, ...]


@dataclass(frozen=True)
class SparseRoute:
    task: int
    selected: tuple[tuple[int, float], ...]
    dense: np.ndarray

    @property
    def nonzero(self) -> np.ndarray:
        return np.flatnonzero(self.dense)


def _gate_rows(rng: RngStream, rows: int, input_dim: int) -> np.ndarray:
    a = np.sqrt(6.0 / (rows + input_dim))
    return rng.uniform(-a, a, (rows, input_dim))


def init_tsgate(n_tasks: int, input_dim: int, rng: RngStream) -> TsGate:
    if n_tasks < 1:
        raise ConfigError("need at least one task")
    W = _gate_rows(rng.child(GATE_SALT, "ts"), n_tasks, input_dim)
    return TsGate(Parameter("gate.ts.W", W), Parameter("gate.ts.b", np.zeros(n_tasks, dtype=nc.get_dtype())))


def init_lsgate(squad_id: int, n_learners: int, input_dim: int, K: int, rng: RngStream) -> LsGate:
    if not 1 <= K <= n_learners:
        raise ConfigError(f"squad {squad_id}: K={K} must lie in [1, {n_learners}]")
    W = _gate_rows(rng.child(GATE_SALT, "ls", squad_id), n_learners, input_dim)
    return LsGate(
        squad_id,
        Parameter(f"gate.ls{squad_id}.W", W),
        Parameter(f"gate.ls{squad_id}.b", np.zeros(n_learners, dtype=nc.get_dtype())),
        K,
    )


def _vector(x) -> Tensor:
    x = nc.as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"expected a single input vector, got shape {x.shape}")
    return x


def tsgate_route(gate: TsGate, x, override: int | None = None) -> tuple[int, np.ndarray]:
    x = _vector(x)
    if x.shape[0] != gate.W.shape[1]:
        raise DimensionError(f"TSGate expects {gate.W.shape[1]} inputs, got {x.shape[0]}")
    probs = nc.softmax(gate.logits(x).data)
    if override is not None:
        if not 0 <= override < gate.n_tasks:
            raise RangeError(f"task override {override} outside [0, {gate.n_tasks})")
        return int(override), probs
    return int(np.argmax(probs)), probs


def route_tasks(gate: TsGate, x: np.ndarray) -> np.ndarray:
    """Hard task choice for each row of a batch (argmax, lowest index on ties)."""
    return np.argmax(gate.logits(nc.constant(x)).data, axis=1)


def lsgate_select(gate: LsGate, x) -> RouteSection:
    x = _vector(x)
    if gate.K > gate.n_learners:
        raise ConfigError(f"squad {gate.squad_id}: K={gate.K} exceeds its {gate.n_learners} learners")
    if x.shape[0] != gate.W.shape[1]:
        raise DimensionError(f"LSGate expects {gate.W.shape[1]} inputs, got {x.shape[0]}")
    logits = gate.logits(x).data[None, :]
    dense, idx = nc.topk_softmax(nc.constant(logits), gate.K)
    local = tuple(int(i) for i in idx[0])
    return RouteSection(gate.squad_id, local, tuple(float(dense.data[0, i]) for i in local))


def squad_offsets(squads) -> list[int]:
    offs, total = [], 0
    for sq in squads:
        offs.append(total)
        total += len(sq)
    return offs


def assemble_route(task: int, section: RouteSection, squads) -> SparseRoute:
    """Lay the squad-local choice out on the N-dim route vector (squad-major order)."""
    if section.squad_id != task:
        raise ConfigError(f"section from squad {section.squad_id} cannot route task {task}")
    offset = squad_offsets(squads)[task]
    n = sum(len(sq) for sq in squads)
    dense = np.zeros(n)
    selected = []
    for i, w in zip(section.local, section.weights):
        dense[offset + i] = w
        selected.append((squads[task][i], w))
    return SparseRoute(task, tuple(selected), dense)
