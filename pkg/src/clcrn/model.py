"""CLC-GRU cells, the encoder/decoder forecaster, training and evaluation."""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, normalize, denormalize
from .errors import CheckpointError, Diverged, EmptySplit, MissingTruth, ShapeMismatch, ZeroStd
from .graph import PackedGeometry, knn_graph, pack_geometry
from .kernel import COMPONENTS, CondLocalKernel, glorot, weight_tensor
from .metrics import horizon_metrics, overall_metrics

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CLCR"
CHECKPOINT_VERSION = 1


@dataclass
class CLCGRUCell:
    W_r: Tensor
    W_u: Tensor
    W_C: Tensor
    b_r: Tensor
    b_u: Tensor
    b_C: Tensor

    @classmethod
    def init(cls, rng, d_in: int, hidden: int, heads: int, gate_bias: float = 1.0, name: str = "cell"):
        rows = (d_in + hidden) * heads

        def w(tag):
            return Tensor(glorot(rng, rows, hidden), name=f"{name}.W_{tag}")

        return cls(
            w("r"), w("u"), w("C"),
            Tensor(np.full(hidden, gate_bias), name=f"{name}.b_r"),
            Tensor(np.full(hidden, gate_bias), name=f"{name}.b_u"),
            Tensor(np.zeros(hidden), name=f"{name}.b_C"),
        )

    @property
    def hidden(self) -> int:
        return self.W_r.shape[1]

    def parameters(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("W_r", "W_u", "W_C", "b_r", "b_u", "b_C")}


def gru_step(cell: CLCGRUCell, F, Z, weights, neighbors: np.ndarray, trace: dict | None = None) -> Tensor:
    """One CLC-GRU update for (B*N, D_in) inputs and (B*N, H) hidden state.

    r and u share a single aggregation of [F, Z]; the candidate aggregates [F, r*Z].
    """
    F, Z = ad.constant(F), ad.constant(Z)
    heads = ad.constant(weights).shape[2]
    if cell.W_r.shape[0] != (F.shape[1] + Z.shape[1]) * heads:
        raise ShapeMismatch(
            f"gru_step: W_r has {cell.W_r.shape[0]} rows, inputs give "
            f"({F.shape[1]} + {Z.shape[1]}) * {heads}")
    y = ad.aggregate(ad.concat([F, Z], axis=1), weights, neighbors)
    r = ad.sigmoid(y @ cell.W_r + cell.b_r)
    u = ad.sigmoid(y @ cell.W_u + cell.b_u)
    yc = ad.aggregate(ad.concat([F, r * Z], axis=1), weights, neighbors)
    C = ad.tanh(yc @ cell.W_C + cell.b_C)
    if trace is not None:
        trace.update(r=r.data, u=u.data, C=C.data)
    return u * Z + (1.0 - u) * C


@dataclass
class ModelConfig:
    k: int = 8
    map_kind: str = "horizon"
    components: tuple = COMPONENTS
    heads: int = 6
    kernel_hidden: tuple = (10, 8)
    hidden: int = 32
    layers: int = 1
    input_len: int = 12
    horizon: int = 12
    d: int = 1
    seed: int = 2021


class Seq2SeqModel:
    """Encoder/decoder stacks of CLC-GRU cells sharing one conditional kernel."""

    def __init__(self, config: ModelConfig, points: np.ndarray, packed: PackedGeometry | None = None):
        self.config = config
        self.points = np.asarray(points, dtype=np.float64)
        self.packed = packed if packed is not None else pack_geometry(
            knn_graph(self.points, config.k), config.map_kind)
        rng = np.random.default_rng(config.seed)
        self.kernel = CondLocalKernel.init(
            rng, heads=config.heads, hidden=config.kernel_hidden,
            components=config.components, tau=float(np.mean(np.square(self.packed.rho[:, 1:]))))
        self.encoder = []
        self.decoder = []
        for stack, name in ((self.encoder, "enc"), (self.decoder, "dec")):
            for layer in range(config.layers):
                d_in = config.d if layer == 0 else config.hidden
                stack.append(CLCGRUCell.init(rng, d_in, config.hidden, config.heads, name=f"{name}{layer}"))
        self.W_out = Tensor(glorot(rng, config.hidden, config.d), name="out.W")
        self.b_out = Tensor(np.zeros(config.d), name="out.b")
        self.norm: tuple | None = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def parameters(self) -> dict:
        out = dict(self.kernel.parameters())
        for i, c in enumerate(self.encoder):
            out.update(c.parameters(f"enc{i}"))
        for i, c in enumerate(self.decoder):
            out.update(c.parameters(f"dec{i}"))
        out["out.W"] = self.W_out
        out["out.b"] = self.b_out
        return out

    def kernel_weights(self) -> Tensor:
        return weight_tensor(self.packed, self.kernel)

    def project(self, h) -> Tensor:
        return h @ self.W_out + self.b_out


def _frames(x: np.ndarray, n: int) -> list[np.ndarray]:
    """(B, T, N, D) -> list over T of (B*N, D)."""
    b, t, nn, d = x.shape
    if nn != n:
        raise ShapeMismatch(f"sequence has {nn} nodes, model expects {n}")
    return [np.ascontiguousarray(x[:, s].reshape(b * n, d)) for s in range(t)]


def encode(model: Seq2SeqModel, sequence: np.ndarray, weights=None) -> list[Tensor]:
    """Run the encoder over (B, T', N, D) inputs; returns the last hidden state per layer."""
    if sequence.ndim == 3:
        sequence = sequence[None]
    if sequence.shape[1] < 1:
        raise ShapeMismatch("encoder needs at least one input frame")
    if sequence.shape[3] != model.config.d:
        raise ShapeMismatch(f"inputs have {sequence.shape[3]} dims, model expects {model.config.d}")
    weights = model.kernel_weights() if weights is None else weights
    b = sequence.shape[0]
    hidden = [ad.constant(np.zeros((b * model.n, model.config.hidden))) for _ in model.encoder]
    for f in _frames(sequence, model.n):
        x = ad.constant(f)
        for i, cell in enumerate(model.encoder):
            hidden[i] = gru_step(cell, x, hidden[i], weights, model.packed.neighbors)
            x = hidden[i]
    return hidden


def decode(model: Seq2SeqModel, hidden: list, horizon: int, truth: np.ndarray | None = None,
           teacher_forcing_prob: float = 0.0, rng: np.random.Generator | None = None,
           weights=None, fed_inputs: list | None = None) -> list[Tensor]:
    """Autoregressive decoder from a zero "go" frame; returns ``horizon`` (B*N, D) tensors.

    With probability ``teacher_forcing_prob`` (one draw per step) the next input is
    the true frame instead of the previous prediction.
    """
    if teacher_forcing_prob > 0 and truth is None:
        raise MissingTruth("teacher forcing needs the target frames")
    if teacher_forcing_prob > 0 and teacher_forcing_prob < 1 and rng is None:
        raise ValueError("a random generator is required for stochastic teacher forcing")
    weights = model.kernel_weights() if weights is None else weights
    bn = hidden[0].shape[0]
    targets = _frames(truth, model.n) if truth is not None else None
    x = ad.constant(np.zeros((bn, model.config.d)))
    hidden = list(hidden)
    preds = []
    for step in range(horizon):
        if fed_inputs is not None:
            fed_inputs.append(x.data)
        h = x
        for i, cell in enumerate(model.decoder):
            hidden[i] = gru_step(cell, h, hidden[i], weights, model.packed.neighbors)
            h = hidden[i]
        out = model.project(h)
        preds.append(out)
        if step + 1 < horizon:
            use_truth = teacher_forcing_prob >= 1 or (
                teacher_forcing_prob > 0 and rng.random() < teacher_forcing_prob)
            x = ad.constant(targets[step]) if use_truth else out
    return preds


def forward(model: Seq2SeqModel, inputs: np.ndarray, truth: np.ndarray | None = None,
            teacher_forcing_prob: float = 0.0, rng=None) -> list[Tensor]:
    weights = model.kernel_weights()
    hidden = encode(model, inputs, weights)
    return decode(model, hidden, model.config.horizon, truth, teacher_forcing_prob, rng, weights)


def predict(model: Seq2SeqModel, inputs: np.ndarray) -> np.ndarray:
    """(B, T', N, D) -> (B, T, N, D) without recording a tape."""
    b = inputs.shape[0]
    steps = forward(model, inputs)
    return np.stack([s.data.reshape(b, model.n, model.config.d) for s in steps], axis=1)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 0.01
    lr_decay: float = 0.95
    lr_decay_every: int = 10
    lr_decay_until: int = 50
    clip_norm: float = 5.0
    teacher_forcing: str = "scheduled"  # always | never | scheduled
    tf_decay: float = 2000.0
    patience: int = 10
    seed: int = 2021
    eval_batch_size: int = 64
    train_stride: int = 1  # use every n-th training window

    def __post_init__(self):
        if self.teacher_forcing not in ("always", "never", "scheduled"):
            raise ValueError(f"teacher_forcing must be always|never|scheduled, got {self.teacher_forcing!r}")
        for name in ("epochs", "batch_size", "lr", "patience", "eval_batch_size", "tf_decay", "train_stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        decays = min(epoch, self.lr_decay_until) // self.lr_decay_every
        return self.lr * self.lr_decay ** decays

    def teacher_prob(self, iteration: int) -> float:
        if self.teacher_forcing == "always":
            return 1.0
        if self.teacher_forcing == "never":
            return 0.0
        c = self.tf_decay
        return c / (c + math.exp(min(iteration / c, 700.0)))


@dataclass
class History:
    train_mae: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0

    def to_csv(self) -> str:
        rows = ["epoch,train_mae,val_mae"]
        rows += [f"{i + 1},{t!r},{v!r}" for i, (t, v) in enumerate(zip(self.train_mae, self.val_mae))]
        return "\n".join(rows) + "\n"


def _batch_loss(model, inputs, targets, tf_prob, rng) -> Tensor:
    b = inputs.shape[0]
    steps = forward(model, inputs, targets, tf_prob, rng)
    truth = np.stack(_frames(targets, model.n))
    pred = ad.concat([ad.reshape(s, (1, b * model.n, model.config.d)) for s in steps], axis=0)
    return ad.mean_abs_error(pred, truth)


def loss_and_grads(model: Seq2SeqModel, inputs, targets, tf_prob: float = 0.0, rng=None):
    params = model.parameters()
    with ad.Tape() as tape:
        loss = _batch_loss(model, inputs, targets, tf_prob, rng)
    g = tape.backward(loss, wrt=list(params.values()))
    return loss.item(), {name: g[p] for name, p in params.items()}


def split_mae(model: Seq2SeqModel, dataset: Dataset, split: str, batch_size: int = 64) -> float:
    """MAE over every window of ``split`` in the dataset's own (normalised) units."""
    pred, truth = predict_split(model, dataset, split, batch_size)
    return float(np.mean(np.abs(pred - truth)))


def predict_split(model: Seq2SeqModel, dataset: Dataset, split: str, batch_size: int = 64):
    """(pred, truth), each shaped (T, windows, N, D), in the dataset's units."""
    starts = dataset.window_starts(split)
    if len(starts) == 0:
        raise EmptySplit(f"split {split!r} holds no complete window")
    preds, truths = [], []
    for i in range(0, len(starts), batch_size):
        x, y = dataset.batch(starts[i:i + batch_size])
        preds.append(predict(model, x))
        truths.append(y)
    return np.moveaxis(np.concatenate(preds), 1, 0), np.moveaxis(np.concatenate(truths), 1, 0)


def _snapshot(model) -> dict:
    return {k: p.data.copy() for k, p in model.parameters().items()}


def _restore(model, snap: dict):
    for k, p in model.parameters().items():
        p.data = snap[k].copy()


def train(model: Seq2SeqModel, dataset: Dataset, config: TrainConfig | None = None,
          on_epoch: Callable | None = None) -> History:
    """Minimise horizon MAE with Adam and BPTT, keeping the best-validation weights.

    The dataset is z-scored with training statistics unless it already is (or has
    zero spread); the statistics are stored on the model for later denormalisation.
    """
    config = config or TrainConfig()
    ds = dataset
    if ds.norm is None:
        try:
            ds = normalize(dataset)
        except ZeroStd:
            log.warning("training signals have zero spread; training in raw units")
    model.norm = ds.norm
    rng = np.random.default_rng(config.seed)
    starts = ds.window_starts("train")[::config.train_stride]
    if len(starts) == 0:
        raise EmptySplit("training split holds no complete window")
    has_val = ds.n_windows("val") > 0
    params = model.parameters()
    state = ad.AdamState()
    hist = History()
    best, best_snap, stale = math.inf, _snapshot(model), 0
    iteration = 0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(starts)
        losses = []
        for i in range(0, len(order), config.batch_size):
            x, y = ds.batch(order[i:i + config.batch_size])
            tf = config.teacher_prob(iteration)
            loss, grads = loss_and_grads(model, x, y, tf, rng)
            if not math.isfinite(loss):
                raise Diverged(epoch + 1)
            ad.clip_grad_norm(grads, config.clip_norm)
            ad.adam_step(params, grads, state, lr=lr)
            losses.append(loss)
            iteration += 1
        train_mae = float(np.mean(losses))
        val_mae = split_mae(model, ds, "val", config.eval_batch_size) if has_val else train_mae
        if not math.isfinite(val_mae):
            raise Diverged(epoch + 1)
        hist.train_mae.append(train_mae)
        hist.val_mae.append(val_mae)
        log.info("epoch %d lr %.5f train %.5f val %.5f", epoch + 1, lr, train_mae, val_mae)
        if on_epoch is not None:
            on_epoch(epoch + 1, train_mae, val_mae)
        if val_mae < best:
            best, best_snap, stale = val_mae, _snapshot(model), 0
            hist.best_epoch = epoch + 1
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(model, best_snap)
    hist.seconds = time.perf_counter() - t0
    return hist


def evaluate(model: Seq2SeqModel, dataset: Dataset, split: str = "test",
             horizons: Sequence[int] = (3, 6, 12), batch_size: int = 64) -> dict:
    """Per-horizon metrics in the dataset's original units, plus ``"overall"``.

    ``dataset`` is the raw (un-normalised) dataset; the model's stored statistics
    are applied on the way in and inverted on the way out.
    """
    norm = model.norm
    ds = dataset
    if norm is not None and dataset.norm is None:
        mean, std = norm
        ds = Dataset(dataset.coords, (dataset.signals - mean) / std, dataset.splits, dataset.window, norm)
    pred, truth = predict_split(model, ds, split, batch_size)
    if norm is not None:
        pred, truth = denormalize(pred, norm), denormalize(truth, norm)
    out = horizon_metrics(pred, truth, horizons)
    out["overall"] = overall_metrics(pred, truth)
    return out


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: Seq2SeqModel, path, extra: dict | None = None) -> None:
    """``CLCR`` | u32 version | u32 header length | JSON header | float64 blobs."""
    params = model.parameters()
    header = {
        "config": asdict(model.config),
        "points": model.points.tolist(),
        "norm": None if model.norm is None else [np.asarray(a).tolist() for a in model.norm],
        "params": [[name, list(p.shape)] for name, p in params.items()],
        "extra": extra or {},
    }
    raw = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        f.write(raw)
        for p in params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        version, size = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        return json.loads(f.read(size))


def load_checkpoint(path) -> Seq2SeqModel:
    header = read_checkpoint_header(path)
    cfg = header["config"]
    for key in ("components", "kernel_hidden"):
        cfg[key] = tuple(cfg[key])
    model = Seq2SeqModel(ModelConfig(**cfg), np.array(header["points"]))
    if header["norm"] is not None:
        model.norm = tuple(np.array(a) for a in header["norm"])
    params = model.parameters()
    declared = [(name, tuple(shape)) for name, shape in header["params"]]
    if [(k, p.shape) for k, p in params.items()] != declared:
        raise CheckpointError(f"{path}: parameter layout does not match the configuration")
    with open(path, "rb") as f:
        f.read(4)
        _, size = struct.unpack("<II", f.read(8))
        f.seek(12 + size)
        blob = f.read()
    offset = 0
    for name, shape in declared:
        count = int(np.prod(shape)) if shape else 1
        chunk = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        params[name].data = chunk.reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return model
