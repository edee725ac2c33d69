"""Datasets on the sphere: file format, normalisation, windows, a synthetic
advection-diffusion generator and the persistence baseline.

On-disk layout (one directory)::

    meta.json     {"n", "t", "d", "coords_csv", "signals_bin", "splits", "window"}
    coords.csv    node_id,lat_deg,lon_deg
    signals.bin   little-endian float64, (t, n, d) row-major

``splits`` holds contiguous chronological frame counts ``[train, val, test]``;
``window`` is ``[input_len, horizon]``.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import geometry as geo
from .errors import BadCoordinate, EmptySplit, MissingFile, SizeMismatch, StabilityViolated, ZeroStd
from .graph import knn_graph, pack_geometry
from .metrics import horizon_metrics

SPLITS = ("train", "val", "test")
MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# deterministic PRNG: xoshiro256** seeded through splitmix64

class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** 1.0; the four state words come from splitmix64(seed)."""

    def __init__(self, seed: int):
        sm = SplitMix64(seed)
        self.s = [sm.next() for _ in range(4)]

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()


# ---------------------------------------------------------------------------
# dataset

@dataclass
class Dataset:
    coords: np.ndarray  # (N, 2) lat_deg, lon_deg
    signals: np.ndarray  # (T, N, D)
    splits: tuple  # frame counts (train, val, test)
    window: tuple = (12, 12)  # (input_len, horizon)
    norm: tuple | None = None  # (mean (D,), std (D,)) when normalised

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.signals = np.asarray(self.signals, dtype=np.float64)
        if self.signals.ndim == 2:
            self.signals = self.signals[..., None]
        self.splits = tuple(int(s) for s in self.splits)
        self.window = tuple(int(w) for w in self.window)
        t, n, _ = self.signals.shape
        if n != self.coords.shape[0]:
            raise ValueError(f"{self.coords.shape[0]} coordinates but signals have {n} nodes")
        if sum(self.splits) != t:
            raise ValueError(f"splits {self.splits} do not add up to {t} frames")
        if np.isnan(self.signals).any():
            raise ValueError("signals contain NaN")
        _check_coords(self.coords)

    @property
    def n(self) -> int:
        return self.signals.shape[1]

    @property
    def t(self) -> int:
        return self.signals.shape[0]

    @property
    def d(self) -> int:
        return self.signals.shape[2]

    @property
    def input_len(self) -> int:
        return self.window[0]

    @property
    def horizon(self) -> int:
        return self.window[1]

    def points(self) -> np.ndarray:
        lat, lon = np.radians(self.coords[:, 0]), np.radians(self.coords[:, 1])
        return geo.latlon_to_xyz(lat, lon)

    def split_range(self, split: str) -> tuple[int, int]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        i = SPLITS.index(split)
        start = sum(self.splits[:i])
        return start, start + self.splits[i]

    def window_starts(self, split: str) -> np.ndarray:
        lo, hi = self.split_range(split)
        span = self.input_len + self.horizon
        return np.arange(lo, max(lo, hi - span + 1))

    def n_windows(self, split: str) -> int:
        return len(self.window_starts(split))

    def batch(self, starts: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (inputs (B, T', N, D), targets (B, T, N, D)) for window starts."""
        starts = np.asarray(starts, dtype=np.int64)
        ti, th = self.input_len, self.horizon
        idx = starts[:, None] + np.arange(ti + th)[None, :]
        frames = self.signals[idx]
        return frames[:, :ti], frames[:, ti:]


def _check_coords(coords: np.ndarray):
    lat, lon = coords[:, 0], coords[:, 1]
    bad = (lat < -90) | (lat > 90) | (lon <= -180) | (lon > 180) | ~np.isfinite(coords).all(axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise BadCoordinate(f"node {i}: lat {lat[i]}, lon {lon[i]} out of range")


def windows(dataset: Dataset, split: str) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Sliding windows (stride 1) lying entirely inside ``split``."""
    for s in dataset.window_starts(split):
        x, y = dataset.batch([s])
        yield x[0], y[0]


def default_splits(t: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    n_train = int(round(t * fractions[0]))
    n_val = int(round(t * fractions[1]))
    return n_train, n_val, t - n_train - n_val


# ---------------------------------------------------------------------------
# normalisation

def normalization_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = dataset.split_range("train")
    train = dataset.signals[lo:hi].reshape(-1, dataset.d)
    mean, std = train.mean(axis=0), train.std(axis=0)
    if np.any(std <= 0):
        raise ZeroStd(f"training std is zero for dimensions {np.flatnonzero(std <= 0).tolist()}")
    return mean, std


def normalize(dataset: Dataset) -> Dataset:
    """z-score every dimension with training-split statistics."""
    mean, std = normalization_stats(dataset)
    return replace(dataset, signals=(dataset.signals - mean) / std, norm=(mean, std))


def denormalize(values, norm) -> np.ndarray:
    mean, std = norm
    return np.asarray(values) * std + mean


# ---------------------------------------------------------------------------
# file format

def save_dataset(dataset: Dataset, directory) -> Path:
    """Write the three dataset files; returns the path of ``meta.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "coords.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["node_id", "lat_deg", "lon_deg"])
        for i, (lat, lon) in enumerate(dataset.coords):
            w.writerow([i, repr(float(lat)), repr(float(lon))])
    dataset.signals.astype("<f8").tofile(out / "signals.bin")
    meta = {
        "n": dataset.n, "t": dataset.t, "d": dataset.d,
        "coords_csv": "coords.csv", "signals_bin": "signals.bin",
        "splits": list(dataset.splits), "window": list(dataset.window),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out / "meta.json"


def load_dataset(meta_path) -> Dataset:
    meta_path = Path(meta_path)
    if meta_path.is_dir():
        meta_path = meta_path / "meta.json"
    if not meta_path.exists():
        raise MissingFile(f"missing dataset metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    for key in ("n", "t", "d", "coords_csv", "signals_bin", "splits", "window"):
        if key not in meta:
            raise ValueError(f"{meta_path}: metadata lacks {key!r}")
    base = meta_path.parent
    coords_path, blob_path = base / meta["coords_csv"], base / meta["signals_bin"]
    for p in (coords_path, blob_path):
        if not p.exists():
            raise MissingFile(f"missing dataset file {p}")
    with open(coords_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if len(rows) != meta["n"]:
        raise ValueError(f"{coords_path}: {len(rows)} rows, metadata says n = {meta['n']}")
    rows.sort(key=lambda r: int(r["node_id"]))
    coords = np.array([[float(r["lat_deg"]), float(r["lon_deg"])] for r in rows])
    _check_coords(coords)
    n, t, d = meta["n"], meta["t"], meta["d"]
    expected = 8 * n * t * d
    actual = os.path.getsize(blob_path)
    if actual != expected:
        raise SizeMismatch(expected, actual)
    signals = np.fromfile(blob_path, dtype="<f8").reshape(t, n, d).astype(np.float64)
    return Dataset(coords, signals, tuple(meta["splits"]), tuple(meta["window"]))


# ---------------------------------------------------------------------------
# synthetic advection-diffusion

def fibonacci_sphere(n: int) -> np.ndarray:
    """Fibonacci lattice of ``n`` unit vectors (never exactly at a pole)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(1.0 - z * z)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    phi = i * golden
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def points_to_degrees(points: np.ndarray) -> np.ndarray:
    theta, phi = geo.xyz_to_latlon(points)
    lat, lon = np.degrees(theta), np.degrees(phi)
    lon = np.where(lon <= -180.0, lon + 360.0, lon)
    return np.stack([lat, lon], axis=1)


@dataclass
class AdvectionParams:
    """Parameters of the synthetic generator.

    Per step every node moves toward a weighted mean of its ``k`` nearest
    neighbours, weights ``1 + alpha * cos(bearing - drift)`` normalised per center,
    so patterns travel opposite to the drift bearing. ``drift`` is a bearing in
    radians (0 = east, pi/2 = north) or ``"bands"``: east within 30 degrees of
    the equator, west elsewhere.

    ``forcing`` > 0 makes the initial bumps oscillating sources with period
    ``period`` steps, which keeps the field from relaxing to a constant.
    """

    kappa: float = 0.15
    alpha: float = 2.0
    drift: float | str = 0.0
    steps: int = 2500
    seed: int = 7
    k: int = 8
    forcing: float = 0.05
    period: float = 60.0
    bumps: int = 3
    symmetrize: bool = False
    window: tuple = (12, 12)
    split_fractions: tuple = (0.7, 0.1, 0.2)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "AdvectionParams":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown synthetic parameters {sorted(extra)}")
        doc = dict(doc)
        for key in ("window", "split_fractions"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def drift_bearing(drift, points: np.ndarray) -> np.ndarray:
    if isinstance(drift, str):
        if drift != "bands":
            raise ValueError(f"unknown drift field {drift!r}")
        lat = np.degrees(np.arcsin(np.clip(points[:, 2], -1, 1)))
        return np.where(np.abs(lat) < 30.0, 0.0, math.pi)
    return np.full(points.shape[0], float(drift))


def transport_weights(points: np.ndarray, params: AdvectionParams):
    """Row-normalised neighbour weights, returned as (neighbors (N, k), weights (N, k))."""
    graph = knn_graph(points, params.k)
    packed = pack_geometry(graph, "horizon")
    bearing = packed.varphi[:, 1:]
    drift = drift_bearing(params.drift, points)
    raw = 1.0 + params.alpha * np.cos(bearing - drift[:, None])
    total = raw.sum(axis=1, keepdims=True)
    if np.any(total <= 1e-12):
        raise StabilityViolated("drift weights cancel out at some node; lower alpha")
    return packed.neighbors[:, 1:], raw / total


def transport_matrix(points: np.ndarray, params: AdvectionParams) -> np.ndarray:
    """Dense N x N operator L with F <- F + kappa * L F."""
    nbrs, w = transport_weights(points, params)
    n = points.shape[0]
    W = np.zeros((n, n))
    np.add.at(W, (np.repeat(np.arange(n), nbrs.shape[1]), nbrs.reshape(-1)), w.reshape(-1))
    if params.symmetrize:
        W = 0.5 * (W + W.T)
    return W - np.diag(W.sum(axis=1))


def stability_margin(L: np.ndarray, kappa: float) -> float:
    """1 - kappa * max_i sum_j |w_ij|; the explicit update needs a positive margin."""
    off = L - np.diag(np.diag(L))
    return 1.0 - kappa * float(np.max(np.abs(off).sum(axis=1)))


def gen_synthetic(n_nodes: int, params: AdvectionParams | None = None) -> Dataset:
    params = params or AdvectionParams()
    if n_nodes < 16:
        raise ValueError(f"need at least 16 nodes, got {n_nodes}")
    if params.kappa < 0 or params.alpha < 0 or params.steps < 1:
        raise ValueError("kappa and alpha must be non-negative and steps positive")
    points = fibonacci_sphere(n_nodes)
    L = transport_matrix(points, params)
    if stability_margin(L, params.kappa) <= 0:
        raise StabilityViolated(
            f"kappa * max row weight = {1 - stability_margin(L, params.kappa):.3f} >= 1")
    rng = Xoshiro256(params.seed)
    field0 = np.zeros(n_nodes)
    sources = []
    for _ in range(params.bumps):
        center = geo.latlon_to_xyz(math.asin(rng.uniform(-1.0, 1.0)), rng.uniform(-math.pi, math.pi))
        width = rng.uniform(0.25, 0.6)
        amp = rng.uniform(0.5, 1.5) * (1.0 if rng.random() < 0.5 else -1.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        d = geo.geodesic_distance_batch(points, center)
        bump = amp * np.exp(-np.square(d / width))
        field0 += bump
        sources.append((bump, phase))
    step = np.eye(n_nodes) + params.kappa * L
    out = np.empty((params.steps, n_nodes))
    f = field0
    omega = 2.0 * math.pi / params.period
    for t in range(params.steps):
        out[t] = f
        f = step @ f
        if params.forcing:
            f = f + params.forcing * sum(b * math.cos(omega * (t + 1) + ph) for b, ph in sources)
    coords = points_to_degrees(points)
    return Dataset(coords, out[..., None], default_splits(params.steps, params.split_fractions),
                   params.window)


# ---------------------------------------------------------------------------
# persistence baseline

def persistence_forecast(dataset: Dataset, split: str) -> tuple[np.ndarray, np.ndarray]:
    """(pred, truth), each (T, windows, N, D): the last input frame repeated."""
    starts = dataset.window_starts(split)
    if len(starts) == 0:
        raise EmptySplit(f"split {split!r} holds no complete window")
    x, y = dataset.batch(starts)
    pred = np.broadcast_to(x[:, -1:], y.shape)
    return np.moveaxis(pred, 1, 0), np.moveaxis(y, 1, 0)


def persistence_baseline(dataset: Dataset, split: str, horizons: Sequence[int] | None = None) -> dict:
    horizons = horizons or list(range(1, dataset.horizon + 1))
    pred, truth = persistence_forecast(dataset, split)
    return horizon_metrics(pred, truth, horizons)
