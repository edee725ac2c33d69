"""Conditional local convolution kernel and the graph convolution built on it.

The weight a center ``i`` gives neighbour ``j`` under head ``e`` is the product of
three factors, each of which can be switched off (replaced by 1):

* ``angle``    -- the neighbour's share of the full turn around ``i``,
* ``distance`` -- ``exp(-rho^2 / tau)`` with a learnable bandwidth,
* ``mlp``      -- head ``e`` of a tanh MLP fed ``[phi_rel, z_rel, x_i]``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .errors import GeometryMismatch, ShapeMismatch
from .graph import NeighborhoodGeometry, NeighborRecord, PackedGeometry, repack

COMPONENTS = ("mlp", "angle", "distance")
INPUT_WIDTH = 5
ACTIVATIONS = ("tanh", "sigmoid", "none")


def parse_components(spec) -> frozenset:
    if isinstance(spec, str):
        spec = [s.strip() for s in spec.replace("+", ",").split(",") if s.strip()]
    comps = frozenset(s.lower() for s in spec)
    unknown = comps - set(COMPONENTS)
    if unknown or not comps:
        raise ValueError(f"kernel components must be a non-empty subset of {COMPONENTS}, got {sorted(spec)}")
    return comps


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class CondLocalKernel:
    weights: list  # [Tensor (fan_in, fan_out)]
    biases: list  # [Tensor (fan_out,)]
    tau_raw: Tensor
    components: frozenset = field(default_factory=lambda: frozenset(COMPONENTS))

    @classmethod
    def init(cls, rng: np.random.Generator, heads: int = 6, hidden: Sequence[int] = (10, 8),
             components=COMPONENTS, tau: float = 0.05) -> "CondLocalKernel":
        if heads < 1:
            raise ValueError("need at least one kernel head")
        widths = [INPUT_WIDTH, *hidden, heads]
        ws = [Tensor(glorot(rng, a, b), name=f"kernel.w{i}") for i, (a, b) in enumerate(zip(widths, widths[1:]))]
        bs = [Tensor(np.zeros(b), name=f"kernel.b{i}") for i, b in enumerate(widths[1:])]
        from .graph import inverse_softplus

        tau_raw = Tensor(np.array(inverse_softplus(max(tau - 1e-6, 1e-9))), name="kernel.tau_raw")
        return cls(ws, bs, tau_raw, parse_components(components))

    @property
    def heads(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def tau(self) -> float:
        return float(np.logaddexp(0.0, self.tau_raw.data)) + 1e-6

    def parameters(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"kernel.w{i}"] = w
            out[f"kernel.b{i}"] = b
        out["kernel.tau_raw"] = self.tau_raw
        return out

    def mlp(self, x) -> Tensor:
        """MLP over rows of ``x`` (M, 5); tanh after every layer, output (M, E)."""
        h = ad.constant(x)
        if h.shape[-1] != INPUT_WIDTH:
            raise GeometryMismatch(f"kernel MLP expects width {INPUT_WIDTH}, got {h.shape[-1]}")
        for w, b in zip(self.weights, self.biases):
            h = ad.tanh(h @ w + b)
        return h

    def mlp_numpy(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w.data + b.data)
        return h

    def lipschitz_bound(self) -> float:
        """Product of layer spectral norms; tanh is 1-Lipschitz."""
        return float(np.prod([np.linalg.norm(w.data, 2) for w in self.weights]))


@dataclass
class ConvLayerParams:
    W: Tensor  # (D_in * E, D_out)
    b: Tensor  # (D_out,)

    @classmethod
    def init(cls, rng, d_in: int, heads: int, d_out: int, bias: float = 0.0, name: str = "conv"):
        return cls(Tensor(glorot(rng, d_in * heads, d_out), name=f"{name}.W"),
                   Tensor(np.full(d_out, bias), name=f"{name}.b"))


def mlp_inputs(packed: PackedGeometry) -> np.ndarray:
    n, k1 = packed.neighbors.shape
    centers = np.broadcast_to(packed.centers[:, None, :], (n, k1, 3))
    return np.concatenate([packed.coords, centers], axis=-1).reshape(n * k1, INPUT_WIDTH)


def weight_tensor(packed: PackedGeometry, kernel: CondLocalKernel) -> Tensor:
    """Differentiable kernel weights of shape (N, K1, E) for a packed geometry."""
    n, k1 = packed.neighbors.shape
    e = kernel.heads
    comps = kernel.components
    scale = None
    if "angle" in comps:
        scale = ad.constant(packed.angle_scale[..., None])
    if "distance" in comps:
        tau = ad.softplus(kernel.tau_raw) + 1e-6
        dist = ad.exp(ad.neg(ad.div(ad.constant(np.square(packed.rho)[..., None]), tau)))
        scale = dist if scale is None else scale * dist
    if "mlp" in comps:
        m = ad.reshape(kernel.mlp(mlp_inputs(packed)), (n, k1, e))
        return m if scale is None else scale * m
    return scale * np.ones((1, 1, e))


def kernel_weights(geom: NeighborhoodGeometry, kernel: CondLocalKernel) -> np.ndarray:
    """Weights of one neighbourhood as an (|N(i)|, E) array."""
    return weight_tensor(repack([geom]), kernel).data[0].copy()


def factor_table(packed: PackedGeometry, kernel: CondLocalKernel) -> dict:
    """The three kernel factors evaluated separately (for inspection and tests)."""
    n, k1 = packed.neighbors.shape
    return {
        "angle": packed.angle_scale.copy(),
        "distance": np.exp(-np.square(packed.rho) / kernel.tau),
        "mlp": kernel.mlp_numpy(mlp_inputs(packed)).reshape(n, k1, kernel.heads),
    }


def clc_conv(signals, weights, neighbors: np.ndarray, params: ConvLayerParams,
             activation: str = "none") -> Tensor:
    """activation(concat_e(sum_j w[i, j, e] h_j) @ W + b) for B stacked graphs.

    ``signals`` is (B*N, D_in); the result is (B*N, D_out).
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    signals = ad.constant(signals)
    weights = ad.constant(weights)
    d_in = signals.shape[1]
    e = weights.shape[2]
    if params.W.shape[0] != d_in * e:
        raise ShapeMismatch(
            f"clc_conv: W has {params.W.shape[0]} rows, expected D_in*E = {d_in}*{e}")
    y = ad.aggregate(signals, weights, neighbors) @ params.W + params.b
    if activation == "tanh":
        return ad.tanh(y)
    if activation == "sigmoid":
        return ad.sigmoid(y)
    return y


def smoothness_probe(kernel: CondLocalKernel, center_a, center_b, probes: Iterable) -> float:
    """max |MLP(v; a) - MLP(v; b)| over shared relative positions ``probes``."""
    a = geo._vec(center_a)
    b = geo._vec(center_b)
    pts = np.array([p.as_array() if isinstance(p, geo.LocalCoord) else p for p in probes], dtype=np.float64)
    pts = pts.reshape(-1, 2)
    xa = np.concatenate([pts, np.broadcast_to(a, (len(pts), 3))], axis=1)
    xb = np.concatenate([pts, np.broadcast_to(b, (len(pts), 3))], axis=1)
    return float(np.max(np.abs(kernel.mlp_numpy(xa) - kernel.mlp_numpy(xb))))


def grid_points(resolution: int, radius: float) -> np.ndarray:
    """Regular (resolution x resolution) grid of (phi_rel, z_rel) in [-radius, radius]^2."""
    if radius > math.pi / 2 + 1e-12:
        raise ValueError("grid radius must be at most pi/2")
    ticks = np.linspace(-radius, radius, resolution)
    zz, pp = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([pp.reshape(-1), zz.reshape(-1)], axis=1)


def kernel_grid_dump(kernel: CondLocalKernel, center, resolution: int = 21,
                     radius: float = 0.5) -> list[tuple]:
    """Rows (phi_rel, z_rel, head, weight) of the MLP x distance kernel on a grid.

    The angle factor is left out: it depends on the actual neighbour set.
    """
    c = geo._vec(center)
    pts = grid_points(resolution, radius)
    w = np.ones((len(pts), kernel.heads))
    if "mlp" in kernel.components:
        w = kernel.mlp_numpy(np.concatenate([pts, np.broadcast_to(c, (len(pts), 3))], axis=1))
    if "distance" in kernel.components:
        w = w * np.exp(-np.sum(pts * pts, axis=1) / kernel.tau)[:, None]
    return [(float(p[0]), float(p[1]), e, float(w[i, e]))
            for i, p in enumerate(pts) for e in range(kernel.heads)]


def synthetic_neighborhood(center, coords: np.ndarray) -> NeighborhoodGeometry:
    """A neighbourhood whose records sit exactly at the given local coordinates."""
    recs = []
    for j, (p, z) in enumerate(np.asarray(coords, dtype=np.float64)):
        local = geo.LocalCoord(float(p), float(z))
        recs.append(NeighborRecord(j, local, geo.to_polar(local), 1.0))
    return NeighborhoodGeometry(0, geo._vec(center).copy(), tuple(recs))


def dump_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phi_rel", "z_rel", "head", "weight"])
    for p, z, e, v in rows:
        w.writerow([f"{p:.9g}", f"{z:.9g}", e, f"{v:.9g}"])
    return buf.getvalue()
