"""Staged VAE learners trained at the edge.

A learner with ``S`` stages maps ``x -> stage 0 -> ... -> stage S-1 -> x_hat``.
Stage ``stage_of_latent`` is the reparameterization stage: it owns the mu and
logvar heads instead of a stage weight and outputs ``z``.  Every other stage is
``act(W_s @ (input + injected) + b_s)`` with ReLU for hidden stages and a
sigmoid on the output stage, which maps back to ``input_dim``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import DimensionError, DomainError, SpecError
from .numcore import Parameter, RngStream, Tensor

NOISE_SALT = "latent-noise"
INIT_SALT = "learner-init"


@dataclass(frozen=True)
class LearnerSpec:
    learner_id: int
    task_id: int
    input_dim: int
    stage_widths: tuple[int, ...]
    latent_dim: int
    stage_of_latent: int

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))

    @property
    def n_stages(self) -> int:
        return len(self.stage_widths) + 1

    @property
    def output_stage(self) -> int:
        return self.n_stages - 1

    def out_dim(self, s: int) -> int:
        if s == self.output_stage:
            return self.input_dim
        return self.stage_widths[s]

    def in_dim(self, s: int) -> int:
        return self.input_dim if s == 0 else self.out_dim(s - 1)

    def validate(self) -> None:
        if self.learner_id < 0 or self.task_id < 0:
            raise SpecError(f"learner {self.learner_id}: ids must be non-negative")
        if self.input_dim <= 0 or self.latent_dim <= 0:
            raise SpecError(f"learner {self.learner_id}: dimensions must be positive")
        if self.n_stages < 3:
            raise SpecError(f"learner {self.learner_id}: needs at least 3 stages, got {self.n_stages}")
        if any(w <= 0 for w in self.stage_widths):
            raise SpecError(f"learner {self.learner_id}: stage widths must be positive")
        if not 0 < self.stage_of_latent < self.n_stages - 1:
            raise SpecError(
                f"learner {self.learner_id}: latent stage {self.stage_of_latent} must lie strictly "
                f"between 0 and {self.n_stages - 1}"
            )
        if self.stage_widths[self.stage_of_latent] != self.latent_dim:
            raise SpecError(
                f"learner {self.learner_id}: width of latent stage ({self.stage_widths[self.stage_of_latent]}) "
                f"must equal latent_dim ({self.latent_dim})"
            )

    def to_dict(self) -> dict:
        return {
            "learner_id": self.learner_id,
            "task_id": self.task_id,
            "input_dim": self.input_dim,
            "stage_widths": list(self.stage_widths),
            "latent_dim": self.latent_dim,
            "stage_of_latent": self.stage_of_latent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerSpec":
        return cls(
            int(d["learner_id"]),
            int(d["task_id"]),
            int(d["input_dim"]),
            tuple(d["stage_widths"]),
            int(d["latent_dim"]),
            int(d["stage_of_latent"]),
        )


@dataclass(eq=False)
class Learner:
    """Parameters of one VAE.  ``kept`` < ``n_stages`` marks a truncated fragment."""

    spec: LearnerSpec
    stage_params: dict[int, tuple[Parameter, Parameter]]
    mu_head: tuple[Parameter, Parameter] | None
    logvar_head: tuple[Parameter, Parameter] | None
    kept: int = field(default=-1)

    def __post_init__(self):
        if self.kept < 0:
            self.kept = self.spec.n_stages

    @property
    def learner_id(self) -> int:
        return self.spec.learner_id

    @property
    def is_fragment(self) -> bool:
        return self.kept < self.spec.n_stages

    def parameters(self) -> list[Parameter]:
        """Canonical order: stage by stage, latent heads in place of the latent stage."""
        out = []
        for s in range(self.kept):
            if s == self.spec.stage_of_latent:
                out.extend(self.mu_head)
                out.extend(self.logvar_head)
            else:
                out.extend(self.stage_params[s])
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def truncated(self, max_stage: int) -> "Learner":
        """Deep copy holding stages ``0..max_stage`` only."""
        keep = max_stage + 1
        L = self.spec.stage_of_latent
        return Learner(
            self.spec,
            {s: (w.copy(), b.copy()) for s, (w, b) in self.stage_params.items() if s < keep},
            tuple(p.copy() for p in self.mu_head) if keep > L else None,
            tuple(p.copy() for p in self.logvar_head) if keep > L else None,
            kept=keep,
        )

    def copy(self) -> "Learner":
        return self.truncated(self.kept - 1)


def _glorot(rng: RngStream, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, (fan_out, fan_in))


def init_learner_params(spec: LearnerSpec, rng: RngStream, tag: str = INIT_SALT):
    """Fresh Glorot-uniform weights and zero biases drawn from a stream salted by learner id."""
    dtype = nc.get_dtype()
    base = rng.child(tag, spec.learner_id)
    lid = spec.learner_id
    L = spec.stage_of_latent

    def pair(name, s, rows, cols):
        W = Parameter(f"L{lid}.{name}.W", _glorot(base.child(s, 0 if name != "logvar" else 1), rows, cols))
        b = Parameter(f"L{lid}.{name}.b", np.zeros(rows, dtype=dtype))
        return W, b

    stage_params = {}
    for s in range(spec.n_stages):
        if s == L:
            continue
        stage_params[s] = pair(f"s{s}", s, spec.out_dim(s), spec.in_dim(s))
    mu = pair("mu", L, spec.latent_dim, spec.in_dim(L))
    logvar = pair("logvar", L, spec.latent_dim, spec.in_dim(L))
    return stage_params, mu, logvar


def build_learner(spec: LearnerSpec, rng: RngStream) -> Learner:
    spec.validate()
    stage_params, mu, logvar = init_learner_params(spec, rng)
    return Learner(spec, stage_params, mu, logvar)


def latent_noise(rng: RngStream, learner_id: int, shape) -> np.ndarray:
    """Reparameterization noise for one learner; independent of draw order elsewhere."""
    return rng.child(NOISE_SALT, learner_id).normal(shape)


def encode_latent(learner: Learner, stage_input: Tensor) -> tuple[Tensor, Tensor]:
    L = learner.spec.stage_of_latent
    if stage_input.shape[-1] != learner.spec.in_dim(L):
        raise DimensionError(
            f"learner {learner.learner_id} latent stage expects {learner.spec.in_dim(L)} inputs, "
            f"got {stage_input.shape[-1]}"
        )
    mu = nc.apply_linear(learner.mu_head[0].leaf(), learner.mu_head[1].leaf(), stage_input)
    logvar = nc.apply_linear(learner.logvar_head[0].leaf(), learner.logvar_head[1].leaf(), stage_input)
    return mu, logvar


def stage_forward(
    learner: Learner,
    s: int,
    stage_input: Tensor,
    injected: Tensor | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Run stage ``s`` on ``stage_input + injected``.

    The latent stage rejects injections and returns ``z`` (``mu`` when
    ``noise`` is None).
    """
    spec = learner.spec
    if not 0 <= s < learner.kept:
        raise DimensionError(f"learner {learner.learner_id} has no stage {s}")
    stage_input = nc.as_tensor(stage_input)
    if stage_input.shape[-1] != spec.in_dim(s):
        raise DimensionError(
            f"learner {learner.learner_id} stage {s} expects {spec.in_dim(s)} inputs, got {stage_input.shape[-1]}"
        )
    if s == spec.stage_of_latent:
        if injected is not None:
            raise DimensionError("the latent stage accepts no injected features")
        mu, logvar = encode_latent(learner, stage_input)
        return mu if noise is None else nc.reparameterize(mu, logvar, noise)
    if injected is not None:
        stage_input = nc.add(stage_input, injected)
    W, b = learner.stage_params[s]
    pre = nc.apply_linear(W.leaf(), b.leaf(), stage_input)
    return nc.sigmoid(pre) if s == spec.output_stage else nc.relu(pre)


@dataclass
class VaeForward:
    x_hat: Tensor
    mu: Tensor
    logvar: Tensor
    z: Tensor
    stage_features: dict[int, Tensor]


def check_input(x, input_dim: int) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.shape[-1] != input_dim or x.ndim > 2:
        raise DimensionError(f"expected inputs of dimension {input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min(initial=0.0) < 0 or x.max(initial=0.0) > 1:
        raise DomainError("inputs must be finite values in [0, 1]")
    return x.astype(nc.get_dtype(), copy=False)


def vae_forward(learner: Learner, x, mode: str = "eval", rng: RngStream | None = None) -> VaeForward:
    """Plain single-learner pass.  ``mode='train'`` samples z with noise from ``rng``."""
    spec = learner.spec
    xd = check_input(x, spec.input_dim)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an RngStream")
    h = nc.constant(xd)
    feats = {}
    mu = logvar = z = None
    for s in range(spec.n_stages):
        if s == spec.stage_of_latent:
            mu, logvar = encode_latent(learner, h)
            if mode == "train":
                z = nc.reparameterize(mu, logvar, latent_noise(rng, spec.learner_id, mu.shape))
            else:
                z = mu
            feats[s] = mu
            h = z
        else:
            h = stage_forward(learner, s, h)
            feats[s] = h
    return VaeForward(h, mu, logvar, z, feats)


def elbo_terms(x, x_hat: Tensor, mu: Tensor, logvar: Tensor, beta: float = 1.0) -> Tensor:
    """Per-sample negative ELBO: summed BCE plus ``beta`` times the Gaussian KL."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    rec = nc.bce_sum(x, x_hat)
    if beta == 0:
        return rec
    return nc.add(rec, nc.scale(nc.kl_normal(mu, logvar), beta))


def elbo_loss(x, fwd: VaeForward, beta: float = 1.0) -> Tensor:
    """Mean negative ELBO over the batch (a scalar tensor)."""
    return nc.mean(elbo_terms(x, fwd.x_hat, fwd.mu, fwd.logvar, beta))
