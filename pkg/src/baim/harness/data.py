"""Procedural image families standing in for per-node photo collections.

Each family draws per-image generator parameters from intervals that depend on
the node, which gives every node its own distribution shift.  Families occupy
disjoint bands of mean pixel intensity, so any two of them are separable by a
threshold on the image mean (a linear function of the pixels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numcore as nc
from ..errors import ConfigError
from ..training import TaskDataset

FAMILIES = ("blobs", "stripes", "rectangles")

# mean-pixel band each family must stay inside
MEAN_BANDS = {
    "blobs": (0.0, 0.09),
    "rectangles": (0.09, 0.34),
    "stripes": (0.36, 0.64),
}

# generator parameter intervals for a 16-pixel side; positions scale with the side
BASE_RANGES = {
    "blobs": {"cx": (5.5, 9.5), "cy": (5.5, 9.5), "sigma": (1.2, 1.8)},
    "stripes": {"freq": (0.15, 0.3), "theta": (0.0, np.pi), "phase": (0.0, 2 * np.pi)},
    "rectangles": {"w": (5.0, 9.0), "h": (5.0, 9.0), "x0": (1.0, 6.0), "y0": (1.0, 6.0)},
}
# parameters that jitter per node; the rest use the full base interval
SHIFTED = {"blobs": ("cx", "cy"), "stripes": ("theta", "freq"), "rectangles": ("x0", "y0", "w")}


@dataclass
class SyntheticTaskSpec:
    task_id: int
    family: str
    image_side: int = 16
    node_param_ranges: dict[int, dict[str, tuple[float, float]]] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.image_side < 8:
            raise ConfigError("image_side must be at least 8")

    @property
    def input_dim(self) -> int:
        return self.image_side * self.image_side

    def ranges_for(self, node_id: int) -> dict[str, tuple[float, float]]:
        if node_id in self.node_param_ranges:
            ranges = dict(self.node_param_ranges[node_id])
        else:
            ranges = default_node_ranges(self.family, node_id)
        scale = self.image_side / 16
        out = {}
        for k, (lo, hi) in {**BASE_RANGES[self.family], **ranges}.items():
            if k in ("cx", "cy", "sigma", "w", "h", "x0", "y0"):
                lo, hi = lo * scale, hi * scale
            if k == "freq":
                lo, hi = lo / scale, hi / scale
            out[k] = (float(lo), float(hi))
        return out


def default_node_ranges(family: str, node_id: int) -> dict[str, tuple[float, float]]:
    """Half-width sub-intervals whose position cycles with the node id."""
    out = {}
    for j, name in enumerate(SHIFTED[family]):
        lo, hi = BASE_RANGES[family][name]
        pos = ((node_id + 2 * j) % 5) / 4
        start = lo + pos * (hi - lo) / 2
        out[name] = (start, start + (hi - lo) / 2)
    return out


def _draw(rng: nc.RngStream, ranges, n):
    return {k: lo + (hi - lo) * rng.child(k).random(n) for k, (lo, hi) in sorted(ranges.items())}


def render(family: str, side: int, params: dict[str, np.ndarray]) -> np.ndarray:
    """Images of shape (n, side, side) from per-image parameter arrays."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    yy, xx = yy[None] + 0.5, xx[None] + 0.5
    col = lambda a: np.asarray(a, dtype=np.float64)[:, None, None]
    if family == "blobs":
        d2 = (xx - col(params["cx"])) ** 2 + (yy - col(params["cy"])) ** 2
        img = np.exp(-d2 / (2 * col(params["sigma"]) ** 2))
    elif family == "stripes":
        th = col(params["theta"])
        u = xx * np.cos(th) + yy * np.sin(th)
        img = 0.5 + 0.5 * np.sin(2 * np.pi * col(params["freq"]) * u + col(params["phase"]))
    elif family == "rectangles":
        x0, y0 = col(params["x0"]), col(params["y0"])
        img = ((xx >= x0) & (xx < x0 + col(params["w"])) & (yy >= y0) & (yy < y0 + col(params["h"])))
        img = img.astype(np.float64)
    else:
        raise ConfigError(f"unknown family {family!r}")
    return np.clip(img, 0.0, 1.0)


def gen_dataset(spec: SyntheticTaskSpec, node_id: int, n: int, seed: int, split: str = "train") -> TaskDataset:
    """``n`` images of the node's shifted distribution; deterministic in all arguments."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got n={n}")
    ranges = spec.ranges_for(node_id)
    for k, (lo, hi) in ranges.items():
        if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
            raise ConfigError(f"invalid range for {k}: ({lo}, {hi})")
    rng = nc.RngStream(seed).child("data", spec.family, spec.task_id, node_id, split)
    imgs = render(spec.family, spec.image_side, _draw(rng, ranges, n))
    means = imgs.mean(axis=(1, 2))
    lo, hi = MEAN_BANDS[spec.family]
    if means.min() < lo or means.max() > hi:
        raise ConfigError(
            f"{spec.family} images for node {node_id} leave their mean-pixel band "
            f"[{lo}, {hi}] (observed {means.min():.3f}..{means.max():.3f}); narrow the parameter ranges"
        )
    x = imgs.reshape(n, -1).astype(nc.get_dtype())
    return TaskDataset(x, np.full(n, spec.task_id))


def mean_band_separable(datasets: dict[str, np.ndarray]) -> bool:
    """True when the families' mean-pixel ranges are pairwise disjoint."""
    spans = sorted((x.mean(axis=1).min(), x.mean(axis=1).max()) for x in datasets.values())
    return all(a[1] < b[0] for a, b in zip(spans, spans[1:]))
