"""Radius graphs and the nested multi-level Nyström hierarchy."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .random_fields import FieldSample

log = logging.getLogger(__name__)


class SamplingError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


@dataclass
class LevelSchedule:
    """Node counts and radii for each level, finest first.

    ``r_trans[l]`` is the radius used both for the down transition
    (level l -> l+1) and the up transition (l+1 -> l).
    """

    m: list[int]
    r_intra: list[float]
    r_trans: list[float]
    certificate_constant: float = 64.0

    def __post_init__(self):
        self.m = [int(x) for x in self.m]
        self.r_intra = [float(x) for x in self.r_intra]
        self.r_trans = [float(x) for x in self.r_trans]
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.m)

    def validate(self, dim: int = 2) -> None:
        L = len(self.m)
        if L < 1:
            raise ScheduleError("schedule needs at least one level")
        if len(self.r_intra) != L or len(self.r_trans) != L - 1:
            raise ScheduleError(
                f"need {L} intra radii and {L - 1} transition radii, "
                f"got {len(self.r_intra)} and {len(self.r_trans)}")
        if any(b >= a for a, b in zip(self.m, self.m[1:])) or min(self.m) < 1:
            raise ScheduleError(f"node counts must be strictly decreasing and positive: {self.m}")
        if min(self.r_intra + self.r_trans) <= 0:
            raise ScheduleError("all radii must be positive")
        cost = self.certificate(dim)
        if cost > self.certificate_constant * self.m[0]:
            log.warning("schedule %s breaks the linear-cost bound: sum m^2 r^d = %.1f > %.1f * m1",
                        self.m, cost, self.certificate_constant)

    def certificate(self, dim: int = 2) -> float:
        """``sum_l m_l^2 r_ll^d``, the expected intra-level edge budget up to a constant."""
        return float(sum(m * m * r ** dim for m, r in zip(self.m, self.r_intra)))

    def truncated(self, levels: int) -> "LevelSchedule":
        """Keep the finest ``levels`` levels with their radii unchanged."""
        return LevelSchedule(self.m[:levels], self.r_intra[:levels],
                             self.r_trans[:levels - 1], self.certificate_constant)

    @classmethod
    def multipole(cls, levels: int, coarsest: int = 25, radius_scale: float = 1.0) -> "LevelSchedule":
        """Schedule with four times as many nodes per finer level.

        ``m_l = coarsest * 4**(L-l)``, ``r_ll = 2**-(L-l)`` (``1/2`` on the
        coarsest level) and transition radii ``2**(-(L-l) + 1/2)``.
        ``radius_scale`` multiplies every radius except the coarsest one.
        """
        L = int(levels)
        m = [coarsest * 4 ** (L - l) for l in range(1, L + 1)]
        r_intra = [radius_scale * 2.0 ** -(L - l) for l in range(1, L)] + [0.5]
        r_trans = [radius_scale * 2.0 ** (-(L - l) + 0.5) for l in range(1, L)]
        return cls(m, r_intra, r_trans)

    def to_dict(self) -> dict:
        return {"m": list(self.m), "r_intra": list(self.r_intra), "r_trans": list(self.r_trans),
                "certificate_constant": self.certificate_constant}


def nystrom_sample(n: int, m: int, rng: np.random.Generator | int | None) -> np.ndarray:
    """Draw ``m`` distinct indices from ``range(n)`` uniformly without replacement."""
    if m > n:
        raise SamplingError(f"cannot draw {m} nodes from {n}")
    if m < 1:
        raise SamplingError("need at least one node")
    rng = np.random.default_rng(rng)
    return rng.permutation(n)[:m]


def radius_edges(src: np.ndarray, dst: np.ndarray, r: float) -> np.ndarray:
    """All pairs with ``|dst[j] - src[i]| <= r`` as a ``(2, E)`` array ``[i; j]``.

    Candidates come from a uniform bin grid with cell size ``r``; only the
    3**d neighbouring cells of each destination are inspected. Edges are
    sorted by destination, then source.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    src = np.atleast_2d(np.asarray(src, dtype=float))
    dst = np.atleast_2d(np.asarray(dst, dtype=float))
    if src.shape[1] != dst.shape[1]:
        raise ValueError(f"coordinate dimensions differ: {src.shape} vs {dst.shape}")
    d = src.shape[1]
    if len(src) == 0 or len(dst) == 0:
        return np.zeros((2, 0), dtype=np.int64)

    lo = np.minimum(src.min(axis=0), dst.min(axis=0))
    src_cell = np.floor((src - lo) / r).astype(np.int64)
    dst_cell = np.floor((dst - lo) / r).astype(np.int64)
    extent = np.maximum(src_cell.max(axis=0), dst_cell.max(axis=0)) + 3
    strides = np.cumprod(np.concatenate([[1], extent[:-1]]))

    src_key = (src_cell + 1) @ strides
    order = np.argsort(src_key, kind="stable")
    sorted_keys = src_key[order]

    rows, cols = [], []
    r2 = r * r
    for offset in np.ndindex(*([3] * d)):
        key = (dst_cell + np.asarray(offset)) @ strides
        start = np.searchsorted(sorted_keys, key, side="left")
        stop = np.searchsorted(sorted_keys, key, side="right")
        counts = stop - start
        total = int(counts.sum())
        if total == 0:
            continue
        j = np.repeat(np.arange(len(dst)), counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        i = order[np.repeat(start, counts) + within]
        diff = src[i] - dst[j]
        keep = np.einsum("ij,ij->i", diff, diff) <= r2
        rows.append(i[keep])
        cols.append(j[keep])
    if not rows:
        return np.zeros((2, 0), dtype=np.int64)
    key = np.concatenate(cols) * len(src) + np.concatenate(rows)
    key.sort()
    return np.stack([key % len(src), key // len(src)])


def nearest_edges(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    """Assign each fine node to its nearest coarse node; returns ``[coarse; fine]`` pairs."""
    fine = np.asarray(fine, dtype=float)
    coarse = np.asarray(coarse, dtype=float)
    # coarse levels hold at most a few thousand nodes; chunk to bound memory
    nearest = np.empty(len(fine), dtype=np.int64)
    step = max(1, 2_000_000 // max(len(coarse), 1))
    for s in range(0, len(fine), step):
        diff = fine[s:s + step, None, :] - coarse[None, :, :]
        nearest[s:s + step] = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
    return np.stack([nearest, np.arange(len(fine))])


@dataclass
class EdgeSet:
    """Directed edges ``index[0] -> index[1]`` between two node sets, with attributes."""

    index: np.ndarray
    attr: np.ndarray
    num_dst: int

    @property
    def size(self) -> int:
        return self.index.shape[1]


def edge_attributes(coords: np.ndarray, values: np.ndarray,
                    src_nodes: np.ndarray, dst_nodes: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Per-edge ``(x, y, a(x), a(y))`` with ``x`` the receiving and ``y`` the sending node."""
    x = dst_nodes[index[1]]
    y = src_nodes[index[0]]
    return np.concatenate([coords[x], coords[y], values[x, None], values[y, None]], axis=1)


@dataclass
class MultiLevelGraph:
    """Nested node sets (indices into the sample's points) and edges per level.

    ``intra[l]`` lives on level l; ``down[l]`` sends level l -> l+1 and
    ``up[l]`` sends level l+1 -> l.
    """

    nodes: list[np.ndarray]
    intra: list[EdgeSet]
    down: list[EdgeSet]
    up: list[EdgeSet]
    coords: np.ndarray
    mode: str = "general"
    meta: dict = field(default_factory=dict)

    @property
    def levels(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return sum(e.size for e in self.intra + self.down + self.up)

    def level_coords(self, level: int) -> np.ndarray:
        return self.coords[self.nodes[level]]


def build_graph_from_nodes(coords: np.ndarray, values: np.ndarray, nodes: list[np.ndarray],
                           sched: LevelSchedule, mode: str = "general",
                           attributes: bool = True) -> MultiLevelGraph:
    """Connect pre-chosen nested node sets according to ``sched``.

    ``attributes=False`` skips the per-edge feature arrays (edge counting only).
    """
    if mode not in ("general", "orthogonal"):
        raise ScheduleError(f"unknown transition mode {mode!r}")
    coords = np.asarray(coords, dtype=float)
    values = np.asarray(values, dtype=float)
    intra, down, up = [], [], []

    def attr(src_nodes, dst_nodes, idx):
        if not attributes:
            return np.zeros((idx.shape[1], 0))
        return edge_attributes(coords, values, src_nodes, dst_nodes, idx)

    for l, nl in enumerate(nodes):
        pts = coords[nl]
        idx = radius_edges(pts, pts, sched.r_intra[l])
        intra.append(EdgeSet(idx, attr(nl, nl, idx), len(nl)))
        if l + 1 == len(nodes):
            break
        nc = nodes[l + 1]
        if mode == "general":
            d_idx = radius_edges(pts, coords[nc], sched.r_trans[l])
            u_idx = radius_edges(coords[nc], pts, sched.r_trans[l])
        else:
            pairs = nearest_edges(pts, coords[nc])
            d_idx = pairs[::-1].copy()
            d_idx = d_idx[:, np.lexsort((d_idx[0], d_idx[1]))]
            u_idx = pairs
        down.append(EdgeSet(d_idx, attr(nl, nc, d_idx), len(nc)))
        up.append(EdgeSet(u_idx, attr(nc, nl, u_idx), len(nl)))
    return MultiLevelGraph(nodes, intra, down, up, coords, mode)


def build_hierarchy(sample: FieldSample, sched: LevelSchedule, seed, mode: str = "general",
                    values: np.ndarray | None = None, attributes: bool = True) -> MultiLevelGraph:
    """Sample nested Nyström levels from ``sample`` and connect them.

    ``values`` overrides the field values used in edge attributes (e.g. a
    normalised copy of ``sample.values``).
    """
    n = sample.coords.shape[0]
    if sched.m[0] > n:
        raise ScheduleError(f"schedule wants {sched.m[0]} nodes but the sample has {n}")
    rng = np.random.default_rng(seed)
    nodes = [nystrom_sample(n, sched.m[0], rng)]
    for m in sched.m[1:]:
        prev = nodes[-1]
        nodes.append(prev[rng.permutation(len(prev))[:m]])
    vals = sample.values if values is None else values
    graph = build_graph_from_nodes(sample.coords, vals, nodes, sched, mode, attributes)
    graph.meta["seed"] = seed
    return graph


def expected_pairs_within(r: float) -> float:
    """Probability that two uniform points in the unit square lie within ``r`` (r <= 1)."""
    return math.pi * r * r - 8.0 / 3.0 * r ** 3 + 0.5 * r ** 4
