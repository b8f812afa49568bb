"""Detection-difficulty metrics for human-object pairs.

Two ratios characterize a pair's difficulty: the area ratio, which is
small when the two boxes cover the enclosing region unevenly, and the
length ratio, which is small when the boxes are far apart relative to
their sizes. Both are dimensionless, so they survive translation and
uniform scaling of the scene. Values are binned into ten intervals for
corpus statistics and difficulty-stratified splits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError


@dataclass
class PairGeometry:
    """Absolute-pixel (x, y, w, h) boxes of one pair plus their tight
    enclosing box."""

    human_box: tuple[float, float, float, float]
    object_box: tuple[float, float, float, float]
    hoi_box: tuple[float, float, float, float]

    @classmethod
    def from_boxes(cls, human_box, object_box) -> "PairGeometry":
        hx, hy, hw, hh = human_box
        ox, oy, ow, oh = object_box
        x0 = min(hx, ox)
        y0 = min(hy, oy)
        x1 = max(hx + hw, ox + ow)
        y1 = max(hy + hh, oy + oh)
        return cls(human_box=tuple(map(float, human_box)),
                   object_box=tuple(map(float, object_box)),
                   hoi_box=(x0, y0, x1 - x0, y1 - y0))


def _area(box) -> float:
    return box[2] * box[3]


def _diagonal(box) -> float:
    return math.hypot(box[2], box[3])


def compute_ar(g: PairGeometry) -> float:
    """Area ratio: (area_h * area_o) / area_hoi^2, in (0, 1] for a tight
    enclosing box. Equals 1 only when both boxes fill the enclosing box."""
    a_h, a_o, a_hoi = _area(g.human_box), _area(g.object_box), _area(g.hoi_box)
    if a_h <= 0 or a_o <= 0 or a_hoi <= 0:
        raise ContractError(f"area ratio needs positive areas, got {a_h}, {a_o}, {a_hoi}")
    return (a_h * a_o) / (a_hoi * a_hoi)


def compute_lr(g: PairGeometry) -> float:
    """Length ratio: (L_h + L_o) / L_hoi with L the box diagonal. Equals 2
    at coincidence and shrinks as the pair separates."""
    l_hoi = _diagonal(g.hoi_box)
    if l_hoi <= 0:
        raise ContractError("length ratio needs a non-degenerate enclosing box")
    return (_diagonal(g.human_box) + _diagonal(g.object_box)) / l_hoi


# uniform default edges; the area ratio lives in (0, 1] and the length
# ratio in (0, 2] under the diagonal definition
DEFAULT_EDGES = {
    "ar": tuple(np.linspace(0.0, 1.0, 11)),
    "lr": tuple(np.linspace(0.0, 2.0, 11)),
}


@dataclass
class DifficultyHistogram:
    metric: str
    edges: tuple[float, ...]   # 11 ascending edges
    counts: tuple[int, ...]    # 10 bins

    def to_dict(self) -> dict:
        return {"metric": self.metric, "edges": list(self.edges),
                "counts": list(self.counts)}

    def to_csv(self) -> str:
        lines = ["bin,count"]
        lines += [f"{i},{c}" for i, c in enumerate(self.counts)]
        return "\n".join(lines) + "\n"


def bin_intervals(values, edges, metric: str = "ar") -> DifficultyHistogram:
    """Count values into ten half-open bins [e_i, e_{i+1}), last bin
    closed. Out-of-range values are clamped into the end bins."""
    edges = [float(e) for e in edges]
    if len(edges) != 11:
        raise ConfigError(f"need 11 edges for 10 intervals, got {len(edges)}")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigError(f"edges must be strictly ascending: {edges}")
    values = np.asarray(list(values), dtype=np.float64)
    idx = np.searchsorted(edges, values, side="right") - 1
    idx = np.clip(idx, 0, 9)
    counts = np.bincount(idx, minlength=10) if values.size else np.zeros(10, dtype=int)
    return DifficultyHistogram(metric=metric, edges=tuple(edges),
                               counts=tuple(int(c) for c in counts))


def interval_index(value: float, edges) -> int:
    """Bin index of one value under the same convention as bin_intervals."""
    i = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(i, 0), 9)
