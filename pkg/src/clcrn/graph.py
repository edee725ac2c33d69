"""K-nearest-neighbour graphs on the sphere and per-center neighbourhood geometry."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry as geo
from .errors import DegenerateMap, DuplicatePoints, EmptyNeighborhood, TooFewNodes

MAP_KINDS = ("horizon", "log", "fast")
TIE_DECIMALS = 12
VARPHI_NUDGE = 1e-9


@dataclass(frozen=True)
class SphericalGraph:
    """Directed K-NN graph. ``neighbors[i]`` starts with ``i`` itself followed by
    its ``k`` nearest other nodes, nearest first."""

    points: np.ndarray  # (N, 3)
    k: int
    neighbors: np.ndarray  # (N, k + 1) int

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class NeighborRecord:
    index: int
    local: geo.LocalCoord
    polar: geo.PolarCoord
    angle_scale: float


@dataclass(frozen=True)
class NeighborhoodGeometry:
    center_index: int
    center_position: np.ndarray
    records: tuple  # NeighborRecord, self-loop first


@dataclass(frozen=True)
class PackedGeometry:
    """Array form of a list of equally sized neighbourhoods, consumed by the kernel."""

    neighbors: np.ndarray  # (N, K1) int
    coords: np.ndarray  # (N, K1, 2) phi_rel, z_rel
    rho: np.ndarray  # (N, K1)
    varphi: np.ndarray  # (N, K1)
    angle_scale: np.ndarray  # (N, K1)
    centers: np.ndarray  # (N, 3)

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def width(self) -> int:
        return self.neighbors.shape[1]


def _as_points(points) -> np.ndarray:
    if len(points) and isinstance(points[0], geo.SpherePoint):
        return np.stack([p.v for p in points])
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    return geo.geodesic_distance_batch(points[:, None, :], points[None, :, :])


def knn_graph(points, k: int) -> SphericalGraph:
    """Exact K nearest neighbours by great-circle distance, plus a self-loop.

    Distances are compared after rounding to 12 decimals so that ties produced by
    floating-point noise resolve to the lower node index.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if n < k + 1:
        raise TooFewNodes(f"need at least k+1 = {k + 1} nodes, got {n}")
    d = pairwise_distances(pts)
    off = d[~np.eye(n, dtype=bool)]
    if off.size and off.min() <= 1e-9:
        i, j = np.argwhere((d <= 1e-9) & ~np.eye(n, dtype=bool))[0]
        raise DuplicatePoints(f"nodes {i} and {j} coincide")
    np.fill_diagonal(d, -1.0)  # self sorts first
    dr = np.round(d, TIE_DECIMALS)
    idx = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((idx, dr), axis=1)
    return SphericalGraph(points=pts, k=k, neighbors=order[:, : k + 1].copy())


def angle_scales(varphis: Sequence[float]) -> np.ndarray:
    """Fraction of the full turn owned by each direction.

    Directions are sorted, a bisector is placed halfway along each counter-clockwise
    gap between consecutive directions (circularly), and each direction owns the
    wedge between its two flanking bisectors. The result sums to one.
    """
    a = np.asarray(varphis, dtype=np.float64).copy()
    m = a.size
    if m == 0:
        raise EmptyNeighborhood("no neighbours to partition")
    if m == 1:
        return np.ones(1)
    a = np.mod(a, geo.TWO_PI)
    # nudge later duplicates so no wedge has zero width
    for j in range(1, m):
        while np.any(np.abs(a[:j] - a[j]) < VARPHI_NUDGE / 2):
            a[j] += VARPHI_NUDGE
    order = np.argsort(a, kind="stable")
    s = a[order]
    gap_next = np.diff(np.append(s, s[0] + geo.TWO_PI))
    gap_prev = np.roll(gap_next, 1)
    wedge = 0.5 * (gap_prev + gap_next)
    out = np.empty(m)
    out[order] = wedge / geo.TWO_PI
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


def distance_scale(rho, tau_raw):
    """exp(-rho^2 / tau) with tau = softplus(tau_raw) + 1e-6."""
    tau = softplus(tau_raw) + 1e-6
    return np.exp(-np.square(rho) / tau)


def _local_coords(centers: np.ndarray, nbrs: np.ndarray, map_kind: str) -> np.ndarray:
    """Local (phi_rel, z_rel) for center/neighbour arrays of shape (..., 3)."""
    if map_kind not in MAP_KINDS:
        raise ValueError(f"unknown map kind {map_kind!r}; expected one of {MAP_KINDS}")
    pole = np.abs(centers[..., 2]) >= 1.0 - geo.POLE_TOL
    safe = np.where(pole[..., None], np.array([1.0, 0.0, 0.0]), centers)
    if map_kind == "fast":
        out = geo.fast_local_coords_batch(safe, nbrs)
    else:
        if map_kind == "horizon":
            v, bad = geo.horizon_map_batch(safe, nbrs)
            e1, e2 = geo.local_frame_batch(safe)
        else:
            v, bad = geo.log_map_batch(safe, nbrs)
            e1, e2 = geo.tangent_frame_batch(safe)
        bad &= ~pole
        if np.any(bad):
            raise DegenerateMap(f"{int(bad.sum())} center/neighbour pairs are antipodal")
        out = np.stack([np.sum(v * e1, -1), np.sum(v * e2, -1)], axis=-1)
    if np.any(pole):
        out = np.where(pole[..., None], geo.pole_local_coords_batch(centers, nbrs), out)
    return out


def pack_geometry(graph: SphericalGraph, map_kind: str = "horizon") -> PackedGeometry:
    """Vectorised precomputation of every neighbourhood of ``graph``."""
    pts = graph.points
    nb = graph.neighbors
    centers = np.broadcast_to(pts[:, None, :], (graph.n, nb.shape[1], 3))
    coords = _local_coords(centers, pts[nb], map_kind)
    coords[:, 0, :] = 0.0  # self-loop
    varphi, rho = geo.to_polar_batch(coords)
    scales = np.ones_like(rho)
    for i in range(graph.n):
        scales[i, 1:] = angle_scales(varphi[i, 1:])
    return PackedGeometry(
        neighbors=nb.copy(), coords=coords, rho=rho, varphi=varphi,
        angle_scale=scales, centers=pts.copy(),
    )


def unpack_geometry(packed: PackedGeometry) -> list[NeighborhoodGeometry]:
    out = []
    for i in range(packed.n):
        recs = tuple(
            NeighborRecord(
                index=int(packed.neighbors[i, j]),
                local=geo.LocalCoord(*map(float, packed.coords[i, j])),
                polar=geo.PolarCoord(float(packed.varphi[i, j]), float(packed.rho[i, j])),
                angle_scale=float(packed.angle_scale[i, j]),
            )
            for j in range(packed.width)
        )
        out.append(NeighborhoodGeometry(i, packed.centers[i].copy(), recs))
    return out


def repack(neighborhoods: Sequence[NeighborhoodGeometry]) -> PackedGeometry:
    """Inverse of :func:`unpack_geometry`; all neighbourhoods must have equal size."""
    widths = {len(nh.records) for nh in neighborhoods}
    if len(widths) != 1:
        raise ValueError(f"neighbourhoods have differing sizes {sorted(widths)}")

    def grab(f):
        return np.array([[f(r) for r in nh.records] for nh in neighborhoods])

    return PackedGeometry(
        neighbors=grab(lambda r: r.index).astype(np.int64),
        coords=np.array([[r.local.as_array() for r in nh.records] for nh in neighborhoods]),
        rho=grab(lambda r: r.polar.rho),
        varphi=grab(lambda r: r.polar.varphi),
        angle_scale=grab(lambda r: r.angle_scale),
        centers=np.stack([nh.center_position for nh in neighborhoods]),
    )


def neighborhood_geometry(graph: SphericalGraph, map_kind: str = "horizon") -> list[NeighborhoodGeometry]:
    return unpack_geometry(pack_geometry(graph, map_kind))


def graph_stats(graph: SphericalGraph) -> dict:
    pts = graph.points
    d = geo.geodesic_distance_batch(pts[:, None, :], pts[graph.neighbors[:, 1:]])
    return {
        "nodes": graph.n,
        "k": graph.k,
        "degree": graph.k + 1,
        "min_distance": float(d.min()),
        "mean_distance": float(d.mean()),
        "max_distance": float(d.max()),
    }
