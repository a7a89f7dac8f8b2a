"""Finite-difference check of analytic gradients through a whole composed graph."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import numcore as nc
from ..composer import compose
from ..learner import LearnerSpec, build_learner
from ..numcore import RngStream
from ..training import objective

REL_FLOOR = 1e-6


@dataclass
class GradcheckResult:
    seed: int
    n_checked: int
    max_rel_err: float
    worst: str
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck seed={self.seed} checked={self.n_checked} max_rel_err={self.max_rel_err:.3e} "
                f"worst={self.worst} time={self.seconds:.2f}s {status}")


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps vanishing gradients from dividing by ~0."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


def gradcheck_graph(
    seed: int = 0,
    n_learners: int = 3,
    n_stages: int = 4,
    h: int = 2,
    K: int = 2,
    input_dim: int = 10,
    batch: int = 6,
    n_samples: int = 120,
    tol: float = 1e-4,
    eps: float = 1e-5,
) -> GradcheckResult:
    """Compose a small heterogeneous graph, give every edge a random weight and compare
    backward() against central differences on ``n_samples`` parameter entries
    (at least one per parameter tensor)."""
    start = time.perf_counter()
    with nc.precision("fp64"):
        rng = RngStream(seed).child("gradcheck")
        L = 1 if n_stages == 3 else 2
        learners = []
        for l in range(n_learners):
            widths = [int(w) for w in rng.child("widths", l).integers(3, 8, n_stages - 1)]
            latent = widths[L]
            learners.append(build_learner(LearnerSpec(l, 0, input_dim, tuple(widths), latent, L), rng.child("learner")))
        graph = compose(learners, [list(range(n_learners))], h, rng.child("compose"), K)
        for e in graph.edges:
            e.W.value = rng.child("edge", e.edge_id).normal(e.W.shape) * 0.3
        x = rng.child("x").uniform(0.0, 1.0, (batch, input_dim))
        tasks = np.zeros(batch, dtype=np.int64)

        def loss():
            return objective(graph, x, tasks, "train", RngStream(seed).child("noise"), 1.0)

        params = graph.parameters()
        for p in params:
            p.trainable = True
            p.zero_grad()
        nc.backward(loss())
        f = lambda: loss().item()

        pick = rng.child("pick")
        chosen = {p.id: {int(pick.integers(0, p.size))} for p in params}
        total = sum(p.size for p in params)
        while sum(len(v) for v in chosen.values()) < min(n_samples, total):
            p = params[int(pick.integers(0, len(params)))]
            chosen[p.id].add(int(pick.integers(0, p.size)))
        worst, worst_id, checked = 0.0, "", 0
        for p in params:
            idx = sorted(chosen[p.id])
            numeric = nc.finite_diff_grad(f, p, idx, eps)
            err = rel_error(p.grad.reshape(-1)[idx], numeric)
            checked += len(idx)
            k = int(np.argmax(err))
            if err[k] > worst:
                worst, worst_id = float(err[k]), f"{p.id}[{idx[k]}]"
    return GradcheckResult(seed, checked, worst, worst_id, time.perf_counter() - start, tol)
