"""Geometry of the unit sphere S^2 and the local spaces used by the convolution.

Points are unit 3-vectors. Latitude ``theta`` is in [-pi/2, pi/2] and longitude
``phi`` in (-pi, pi]; everything here works in radians.

Two isometric maps send a neighbour into the local space of a center:

* ``log_map``      -- the tangent plane at the center,
* ``horizon_map``  -- the cylindrical-tangent plane, whose first two
  coordinates are orthogonal to the center's first two coordinates.

The scalar functions raise on degenerate input. The ``*_batch`` variants are
vectorised over leading axes and are what the graph precomputation uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMap, NotAPole, PoleCenter

UNIT_TOL = 1e-9
POLE_TOL = 1e-9
SAME_TOL = 1e-9
DIR_TOL = 1e-12
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SpherePoint:
    v: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise ValueError(f"not a unit vector: |v| = {np.linalg.norm(v)!r}")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_vector(cls, v) -> "SpherePoint":
        v = np.asarray(v, dtype=np.float64)
        return cls(v / np.linalg.norm(v))

    @classmethod
    def from_latlon(cls, theta: float, phi: float) -> "SpherePoint":
        """Build from latitude/longitude in radians."""
        return cls(latlon_to_xyz(theta, phi))

    @classmethod
    def from_degrees(cls, lat_deg: float, lon_deg: float) -> "SpherePoint":
        return cls.from_latlon(math.radians(lat_deg), math.radians(lon_deg))

    @property
    def theta(self) -> float:
        return float(math.asin(min(1.0, max(-1.0, self.v[2]))))

    @property
    def phi(self) -> float:
        return float(math.atan2(self.v[1], self.v[0]))

    @property
    def is_pole(self) -> bool:
        return abs(self.v[2]) >= 1.0 - POLE_TOL

    def __repr__(self) -> str:
        return f"SpherePoint({self.v[0]:.6g}, {self.v[1]:.6g}, {self.v[2]:.6g})"


@dataclass(frozen=True)
class LocalFrame:
    e_phi: np.ndarray
    e_z: np.ndarray


@dataclass(frozen=True)
class LocalCoord:
    phi_rel: float
    z_rel: float

    def as_array(self) -> np.ndarray:
        return np.array([self.phi_rel, self.z_rel])


@dataclass(frozen=True)
class PolarCoord:
    varphi: float
    rho: float


def latlon_to_xyz(theta, phi) -> np.ndarray:
    """Latitude/longitude (radians, broadcastable) to unit vectors of shape (..., 3)."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    c = np.cos(theta)
    return np.stack([c * np.cos(phi), c * np.sin(phi), np.sin(theta)], axis=-1)


def xyz_to_latlon(v) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=np.float64)
    theta = np.arcsin(np.clip(v[..., 2], -1.0, 1.0))
    phi = np.arctan2(v[..., 1], v[..., 0])
    return theta, phi


def _vec(p) -> np.ndarray:
    return p.v if isinstance(p, SpherePoint) else np.asarray(p, dtype=np.float64)


# ---------------------------------------------------------------------------
# vectorised core

def geodesic_distance_batch(x, y) -> np.ndarray:
    """Great-circle distance, equal to arccos(<x, y>) for unit vectors.

    Evaluated as atan2(|x cross y|, <x, y>): arccos loses about 1e-8 rad of
    precision next to 0 and pi.
    """
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    dot = np.sum(x * y, axis=-1)
    cross = np.linalg.norm(np.cross(x, y), axis=-1)
    return np.arctan2(cross, dot)


def _normalized_projection(base, w):
    """P_base(w) = w/|w| - <b/|b|, w/|w|> b/|b|, with P(0) = 0."""
    wn = np.linalg.norm(w, axis=-1, keepdims=True)
    bn = np.linalg.norm(base, axis=-1, keepdims=True)
    w_hat = np.divide(w, wn, out=np.zeros_like(w), where=wn > DIR_TOL)
    b_hat = np.divide(base, bn, out=np.zeros_like(base), where=bn > 0)
    return w_hat - np.sum(b_hat * w_hat, axis=-1, keepdims=True) * b_hat


def _coincident(c, n):
    # chord length: arccos is too coarse near 0 to detect coincidence
    return np.linalg.norm(n - c, axis=-1) <= SAME_TOL


def log_map_batch(center, neighbor):
    """Logarithmic map; returns (vectors, degenerate_mask).

    Coincident pairs yield zero vectors. Antipodal pairs are flagged in the mask
    and also yield zero vectors.
    """
    c = np.asarray(center, dtype=np.float64)
    n = np.asarray(neighbor, dtype=np.float64)
    d = geodesic_distance_batch(c, n)
    p = _normalized_projection(c, n - c)
    pn = np.linalg.norm(p, axis=-1)
    same = _coincident(c, n)
    antipodal = d >= math.pi - SAME_TOL
    ok = ~same & ~antipodal & (pn > DIR_TOL)
    scale = np.divide(d, pn, out=np.zeros_like(d), where=ok)
    return p * scale[..., None], antipodal | (~same & ~ok)


def horizon_map_batch(center, neighbor):
    """Horizon map into the cylindrical-tangent space; returns (vectors, degenerate_mask).

    The caller is responsible for not passing pole centers.
    """
    c = np.asarray(center, dtype=np.float64)
    n = np.asarray(neighbor, dtype=np.float64)
    d = geodesic_distance_batch(c, n)
    horiz = _normalized_projection(c[..., :2], n[..., :2] - c[..., :2])
    u = np.concatenate([horiz, (n[..., 2] - c[..., 2])[..., None]], axis=-1)
    un = np.linalg.norm(u, axis=-1)
    same = _coincident(c, n)
    antipodal = d >= math.pi - SAME_TOL
    ok = ~same & ~antipodal & (un > DIR_TOL)
    scale = np.divide(d, un, out=np.zeros_like(d), where=ok)
    out = u * scale[..., None]
    # same latitude, opposite meridian: both components vanish, but the geodesic
    # runs straight over the nearer pole
    over_pole = ~same & ~antipodal & ~ok & (np.abs(c[..., 2]) > POLE_TOL)
    if np.any(over_pole):
        up = np.sign(c[..., 2]) * d
        out[..., 2] = np.where(over_pole, up, out[..., 2])
    return out, antipodal | (~same & ~ok & ~over_pole)


def local_frame_batch(center):
    c = np.asarray(center, dtype=np.float64)
    phi = np.arctan2(c[..., 1], c[..., 0])
    e_phi = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=-1)
    e_z = np.broadcast_to(np.array([0.0, 0.0, 1.0]), e_phi.shape).copy()
    return e_phi, e_z


def tangent_frame_batch(center):
    """Frame for the tangent plane: e_phi plus e_z projected onto the plane, normalised.

    e_phi is already tangent, and the projected e_z is orthogonal to it, so the
    Gram-Schmidt step reduces to a normalisation.
    """
    c = np.asarray(center, dtype=np.float64)
    e_phi, e_z = local_frame_batch(c)
    north = e_z - c[..., 2:3] * c
    north = north - np.sum(north * e_phi, axis=-1, keepdims=True) * e_phi
    north /= np.linalg.norm(north, axis=-1, keepdims=True)
    return e_phi, north


def wrap_longitude(dphi):
    """Map a longitude difference in (-2pi, 2pi) into [-pi, pi]."""
    dphi = np.asarray(dphi, dtype=np.float64)
    out = np.where(dphi > math.pi, dphi - TWO_PI, dphi)
    return np.where(out < -math.pi, out + TWO_PI, out)


def fast_local_coords_batch(center, neighbor):
    """Latitude/longitude differences as (phi_rel, z_rel), stacked on the last axis."""
    ti, pi_ = xyz_to_latlon(center)
    tj, pj = xyz_to_latlon(neighbor)
    return np.stack([wrap_longitude(pj - pi_), tj - ti], axis=-1)


def pole_local_coords_batch(pole, neighbor):
    p = np.asarray(pole, dtype=np.float64)
    d = geodesic_distance_batch(p, neighbor)
    sign = np.where(p[..., 2] > 0, -1.0, 1.0)
    return np.stack([np.zeros_like(d), sign * d], axis=-1)


def to_polar_batch(coords):
    coords = np.asarray(coords, dtype=np.float64)
    x, z = coords[..., 0], coords[..., 1]
    varphi = np.mod(np.arctan2(z, x), TWO_PI)
    # mod can round a tiny negative angle up to exactly 2pi
    varphi = np.where(varphi >= TWO_PI, 0.0, varphi)
    rho = np.hypot(x, z)
    return varphi, rho


# ---------------------------------------------------------------------------
# scalar API

def geodesic_distance(x, y) -> float:
    return float(geodesic_distance_batch(_vec(x), _vec(y)))


def log_map(center, neighbor) -> np.ndarray:
    c, n = _vec(center), _vec(neighbor)
    v, bad = log_map_batch(c, n)
    if bad:
        raise DegenerateMap(f"log map undefined from {center!r} to antipodal {neighbor!r}")
    return v


def _check_not_pole(c: np.ndarray, what: str):
    if abs(c[2]) >= 1.0 - POLE_TOL:
        raise PoleCenter(f"{what} undefined at a pole center; use pole_local_coords")


def horizon_map(center, neighbor) -> np.ndarray:
    c, n = _vec(center), _vec(neighbor)
    _check_not_pole(c, "horizon map")
    v, bad = horizon_map_batch(c, n)
    if bad:
        raise DegenerateMap(f"horizon map undefined from {center!r} to {neighbor!r}")
    return v


def local_frame(center) -> LocalFrame:
    c = _vec(center)
    _check_not_pole(c, "local frame")
    e_phi, e_z = local_frame_batch(c)
    return LocalFrame(e_phi, e_z)


def tangent_frame(center) -> LocalFrame:
    c = _vec(center)
    _check_not_pole(c, "tangent frame")
    e_phi, north = tangent_frame_batch(c)
    return LocalFrame(e_phi, north)


def to_local_coords(frame: LocalFrame, v, check: bool = True) -> LocalCoord:
    v = np.asarray(v, dtype=np.float64)
    if check:
        # the frame's center direction (horizontal part) is e_z x e_phi up to sign
        radial = np.cross(frame.e_phi, frame.e_z)
        if abs(float(v @ radial)) > 1e-6:
            raise ValueError("vector is not in the local space of this frame")
    return LocalCoord(float(v @ frame.e_phi), float(v @ frame.e_z))


def fast_local_coords(center, neighbor) -> LocalCoord:
    phi_rel, z_rel = fast_local_coords_batch(_vec(center), _vec(neighbor))
    return LocalCoord(float(phi_rel), float(z_rel))


def pole_local_coords(pole, neighbor) -> LocalCoord:
    p = _vec(pole)
    if abs(p[0]) > POLE_TOL or abs(p[1]) > POLE_TOL or abs(abs(p[2]) - 1.0) > POLE_TOL:
        raise NotAPole(f"{pole!r} is not a pole")
    phi_rel, z_rel = pole_local_coords_batch(p, _vec(neighbor))
    return LocalCoord(float(phi_rel), float(z_rel))


def to_polar(c: LocalCoord) -> PolarCoord:
    varphi, rho = to_polar_batch([c.phi_rel, c.z_rel])
    return PolarCoord(float(varphi), float(rho))


def random_points(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform random unit vectors, shape (n, 3)."""
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
