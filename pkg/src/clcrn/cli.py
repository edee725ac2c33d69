"""Command-line entry point: ``clcrn generate|train|evaluate|inspect-kernel|graph-info``.

Settings resolve as built-in defaults, then an optional ``--config`` JSON file
(sections ``graph``, ``kernel``, ``model``, ``train``, ``data``, ``out``), then
flags. Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import geometry as geo
from .data import (AdvectionParams, Dataset, gen_synthetic, load_dataset, persistence_baseline,
                   save_dataset, stability_margin, transport_matrix, fibonacci_sphere)
from .errors import CLCRNError, Diverged, GeometryMismatch
from .graph import MAP_KINDS, graph_stats, knn_graph
from .kernel import dump_csv, kernel_grid_dump, parse_components
from .model import (ModelConfig, Seq2SeqModel, TrainConfig, evaluate, load_checkpoint,
                    save_checkpoint, train)

log = logging.getLogger("clcrn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "graph": {"k": 8, "map_kind": "horizon"},
    "kernel": {"components": "mlp,angle,distance", "heads": 6, "hidden": [10, 8]},
    "model": {"hidden": 32, "layers": 1, "seed": 2021},
    "train": asdict(TrainConfig()),
    "data": {"path": None, "nodes": 200, "synthetic": AdvectionParams().to_json()},
    "out": "run",
}

# flag dest -> (section, key)
TRAIN_FLAGS = {
    "k": ("graph", "k"),
    "map": ("graph", "map_kind"),
    "kernel_components": ("kernel", "components"),
    "heads": ("kernel", "heads"),
    "hidden": ("model", "hidden"),
    "layers": ("model", "layers"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "patience": ("train", "patience"),
    "teacher_forcing": ("train", "teacher_forcing"),
    "train_stride": ("train", "train_stride"),
    "data": ("data", "path"),
    "out": ("out", None),
}
GENERATE_FLAGS = {
    "nodes": ("data", "nodes"),
    "steps": ("synthetic", "steps"),
    "seed": ("synthetic", "seed"),
    "kappa": ("synthetic", "kappa"),
    "alpha": ("synthetic", "alpha"),
    "drift": ("synthetic", "drift"),
    "forcing": ("synthetic", "forcing"),
    "period": ("synthetic", "period"),
    "k": ("synthetic", "k"),
    "out": ("out", None),
}


class ConfigError(CLCRNError):
    pass


def _default(section, key=None):
    if section == "synthetic":
        return DEFAULTS["data"]["synthetic"][key]
    return DEFAULTS[section] if key is None else DEFAULTS[section][key]


def _with_default(help_text: str, section, key=None) -> str:
    return f"{help_text} (default: {_default(section, key)})"


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key != "synthetic":
            out[key] = _merge(out[key], value)
        elif key == "synthetic" and isinstance(value, dict):
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out


def resolve_config(args: argparse.Namespace, flags: dict) -> dict:
    """defaults <- --config file <- explicitly given flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        cfg = _merge(cfg, doc)
    for dest, (section, key) in flags.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section == "out":
            cfg["out"] = value
        elif section == "synthetic":
            cfg["data"]["synthetic"][key] = value
        else:
            cfg[section][key] = value
    if getattr(args, "seed", None) is not None and flags is TRAIN_FLAGS:
        cfg["model"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    return cfg


def write_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _parse_drift(text: str):
    if text == "bands":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("drift is a bearing in radians or 'bands'") from None


def _parse_latlon(text: str) -> tuple[float, float]:
    try:
        lat, lon = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LAT,LON in degrees, got {text!r}") from None
    return lat, lon


def _parse_horizons(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands

def synthetic_params(cfg: dict) -> AdvectionParams:
    try:
        return AdvectionParams.from_json(cfg["data"]["synthetic"])
    except TypeError as exc:
        raise ConfigError(f"bad synthetic parameters: {exc}") from None


def cmd_generate(args) -> int:
    cfg = resolve_config(args, GENERATE_FLAGS)
    params = synthetic_params(cfg)
    nodes = int(cfg["data"]["nodes"])
    ds = gen_synthetic(nodes, params)
    out = Path(cfg["out"])
    save_dataset(ds, out)
    write_config(cfg, out)
    margin = stability_margin(transport_matrix(fibonacci_sphere(nodes), params), params.kappa)
    print(f"nodes {ds.n}")
    print(f"frames {ds.t}")
    print(f"stability_margin {margin:.6f}")
    print(f"written {out}")
    return EXIT_OK


def _load_or_generate(cfg: dict) -> Dataset:
    path = cfg["data"]["path"]
    if path:
        return load_dataset(path)
    return gen_synthetic(int(cfg["data"]["nodes"]), synthetic_params(cfg))


def build_configs(cfg: dict, ds: Dataset) -> tuple[ModelConfig, TrainConfig]:
    if cfg["graph"]["map_kind"] not in MAP_KINDS:
        raise ConfigError(f"map must be one of {MAP_KINDS}")
    components = tuple(c for c in ("mlp", "angle", "distance")
                       if c in parse_components(cfg["kernel"]["components"]))
    mc = ModelConfig(
        k=int(cfg["graph"]["k"]), map_kind=cfg["graph"]["map_kind"], components=components,
        heads=int(cfg["kernel"]["heads"]), kernel_hidden=tuple(cfg["kernel"]["hidden"]),
        hidden=int(cfg["model"]["hidden"]), layers=int(cfg["model"]["layers"]),
        input_len=ds.input_len, horizon=ds.horizon, d=ds.d, seed=int(cfg["model"]["seed"]))
    if mc.hidden < 1 or mc.layers < 1 or mc.heads < 1:
        raise ConfigError("hidden, layers and heads must be positive")
    try:
        tc = TrainConfig(**cfg["train"])
    except TypeError as exc:
        raise ConfigError(f"bad training parameters: {exc}") from None
    return mc, tc


def cmd_train(args) -> int:
    cfg = resolve_config(args, TRAIN_FLAGS)
    ds = _load_or_generate(cfg)
    mc, tc = build_configs(cfg, ds)
    out = Path(cfg["out"])
    write_config(cfg, out)
    model = Seq2SeqModel(mc, ds.points())
    loss_path = out / "loss.csv"
    loss_path.write_text("epoch,train_mae,val_mae\n")

    def on_epoch(epoch, train_mae, val_mae):
        with open(loss_path, "a") as f:
            f.write(f"{epoch},{train_mae!r},{val_mae!r}\n")
        print(f"epoch {epoch:3d}  train_mae {train_mae:.6f}  val_mae {val_mae:.6f}", flush=True)

    hist = train(model, ds, tc, on_epoch=on_epoch)
    save_checkpoint(model, out / "checkpoint.clcr",
                    extra={"best_epoch": hist.best_epoch, "best_val_mae": min(hist.val_mae)})
    print(f"best epoch {hist.best_epoch}  val_mae {min(hist.val_mae):.6f}  ({hist.seconds:.1f}s)")
    print(f"written {out}")
    return EXIT_OK


def _check_compatible(model: Seq2SeqModel, ds: Dataset) -> None:
    if ds.n != model.n or ds.d != model.config.d:
        raise GeometryMismatch(
            f"checkpoint expects {model.n} nodes x {model.config.d} dims, data has {ds.n} x {ds.d}")
    if not np.allclose(ds.points(), model.points, atol=1e-9):
        raise GeometryMismatch("data node coordinates differ from the checkpoint's")


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    _check_compatible(model, ds)
    ds = replace(ds, window=(model.config.input_len, model.config.horizon))
    horizons = args.horizons
    for h in horizons:
        if not 1 <= h <= model.config.horizon:
            raise ConfigError(f"horizon {h} outside 1..{model.config.horizon}")
    res = evaluate(model, ds, args.split, horizons)
    base = persistence_baseline(ds, args.split, horizons)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    cols = ["horizon", "mae", "rmse_paper", "rmse_conventional", "mape", "baseline_mae"]
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for h in horizons:
            m = res[h]
            w.writerow([h, repr(m["mae"]), repr(m["rmse_paper"]), repr(m["rmse_conventional"]),
                        repr(m["mape"]), repr(base[h]["mae"])])
    print(f"{'horizon':>7} {'mae':>12} {'rmse_paper':>12} {'rmse':>12} {'mape':>12} {'baseline':>12}")
    for h in horizons:
        m = res[h]
        print(f"{h:>7} {m['mae']:12.6f} {m['rmse_paper']:12.6f} {m['rmse_conventional']:12.6f} "
              f"{m['mape']:12.6f} {base[h]['mae']:12.6f}")
    o = res["overall"]
    print(f"{'all':>7} {o['mae']:12.6f} {o['rmse_paper']:12.6f} {o['rmse_conventional']:12.6f} {o['mape']:12.6f}")
    print(f"written {out / 'metrics.csv'}")
    return EXIT_OK


def line_centers(spec: str) -> list[tuple[float, float]]:
    """``LAT0,LON0,LAT1,LON1,COUNT`` -> COUNT centers evenly spaced in lat/lon."""
    try:
        lat0, lon0, lat1, lon1, count = spec.split(",")
        count = int(count)
        lat0, lon0, lat1, lon1 = map(float, (lat0, lon0, lat1, lon1))
    except ValueError:
        raise ConfigError(f"--line expects LAT0,LON0,LAT1,LON1,COUNT, got {spec!r}") from None
    if count < 1:
        raise ConfigError("--line needs a positive count")
    t = np.linspace(0.0, 1.0, count)
    return [(float(lat0 + s * (lat1 - lat0)), float(lon0 + s * (lon1 - lon0))) for s in t]


def cmd_inspect_kernel(args) -> int:
    model = load_checkpoint(args.checkpoint)
    centers = list(args.center or [])
    if args.line:
        centers += line_centers(args.line)
    if not centers:
        raise ConfigError("give at least one --center LAT,LON or a --line")
    for lat, lon in centers:
        if not (-90 <= lat <= 90):
            raise ConfigError(f"latitude {lat} out of range")
        if abs(lat) >= 90 - 1e-7:
            raise ConfigError(
                f"center ({lat}, {lon}) is a pole: the local frame is undefined there; "
                "pole neighbourhoods use the fixed (0, -/+distance) convention and have no kernel grid")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for lat, lon in centers:
        center = geo.SpherePoint.from_degrees(lat, lon)
        rows = kernel_grid_dump(model.kernel, center, args.resolution, args.radius)
        path = out / f"kernel_{lat:g}_{lon:g}.csv"
        path.write_text(dump_csv(rows))
        print(f"written {path}")
    return EXIT_OK


def cmd_graph_info(args) -> int:
    if args.data:
        points = load_dataset(args.data).points()
    else:
        if args.nodes < 2:
            raise ConfigError("--nodes must be at least 2")
        points = fibonacci_sphere(args.nodes)
    stats = graph_stats(knn_graph(points, args.k))
    for key in ("nodes", "k", "degree"):
        print(f"{key} {stats[key]}")
    for key in ("min_distance", "mean_distance", "max_distance"):
        print(f"{key} {stats[key]:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

class _DefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append argparse defaults, except ``None``: those flags state the config default in their help."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _DefaultsFormatter
    p = argparse.ArgumentParser(prog="clcrn", description=__doc__.split("\n")[0], formatter_class=fmt)
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads; falls back to $CLCRN_THREADS, then all cores")
    p.add_argument("--log-level", default="WARNING", help="logging level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic advection-diffusion dataset", formatter_class=fmt)
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--out", help=_with_default("output directory", "out"))
    g.add_argument("--nodes", type=int, help=_with_default("Fibonacci-lattice node count (>= 16)", "data", "nodes"))
    g.add_argument("--steps", type=int, help=_with_default("frames to simulate", "synthetic", "steps"))
    g.add_argument("--seed", type=int, help=_with_default("generator seed", "synthetic", "seed"))
    g.add_argument("--kappa", type=float, help=_with_default("transport rate per step", "synthetic", "kappa"))
    g.add_argument("--alpha", type=float, help=_with_default("anisotropy of the drift weights", "synthetic", "alpha"))
    g.add_argument("--drift", type=_parse_drift,
                   help=_with_default("drift bearing in radians, or 'bands'", "synthetic", "drift"))
    g.add_argument("--forcing", type=float, help=_with_default("source amplitude", "synthetic", "forcing"))
    g.add_argument("--period", type=float, help=_with_default("source period in steps", "synthetic", "period"))
    g.add_argument("--k", type=int, help=_with_default("neighbours per node in the transport graph", "synthetic", "k"))
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a forecaster and write a checkpoint", formatter_class=fmt)
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--data", help="dataset directory; a synthetic dataset is generated when omitted")
    t.add_argument("--out", help=_with_default("run directory", "out"))
    t.add_argument("--seed", type=int, help=_with_default("initialisation and shuffling seed", "model", "seed"))
    t.add_argument("--epochs", type=int, help=_with_default("maximum epochs", "train", "epochs"))
    t.add_argument("--batch-size", type=int, help=_with_default("windows per step", "train", "batch_size"))
    t.add_argument("--lr", type=float, help=_with_default("initial Adam learning rate", "train", "lr"))
    t.add_argument("--patience", type=int, help=_with_default("early-stopping patience in epochs", "train", "patience"))
    t.add_argument("--teacher-forcing", choices=("always", "never", "scheduled"),
                   help=_with_default("decoder input policy", "train", "teacher_forcing"))
    t.add_argument("--train-stride", type=int, help=_with_default("use every n-th training window", "train", "train_stride"))
    t.add_argument("--k", type=int, help=_with_default("neighbours per node", "graph", "k"))
    t.add_argument("--map", choices=MAP_KINDS, help=_with_default("local coordinate map", "graph", "map_kind"))
    t.add_argument("--kernel-components",
                   help=_with_default("subset of mlp,angle,distance", "kernel", "components"))
    t.add_argument("--heads", type=int, help=_with_default("kernel heads", "kernel", "heads"))
    t.add_argument("--hidden", type=int, help=_with_default("GRU hidden width", "model", "hidden"))
    t.add_argument("--layers", type=int, help=_with_default("stacked GRU layers", "model", "layers"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="per-horizon metrics next to the persistence baseline", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--horizons", type=_parse_horizons, default=[3, 6, 12], help="comma-separated steps ahead")
    e.add_argument("--split", choices=("train", "val", "test"), default="test", help="split to score")
    e.add_argument("--out", default=None, help="directory for metrics.csv; the checkpoint's directory if omitted")
    e.set_defaults(func=cmd_evaluate)

    k = sub.add_parser("inspect-kernel", help="dump kernel weights on a local grid", formatter_class=fmt)
    k.add_argument("--checkpoint", required=True, help="checkpoint file")
    k.add_argument("--center", type=_parse_latlon, action="append", help="LAT,LON in degrees; repeatable")
    k.add_argument("--line", default=None, help="LAT0,LON0,LAT1,LON1,COUNT evenly spaced centers")
    k.add_argument("--resolution", type=int, default=21, help="grid points per side")
    k.add_argument("--radius", type=float, default=0.5, help="grid half-width in radians (<= pi/2)")
    k.add_argument("--out", default="kernels", help="output directory")
    k.set_defaults(func=cmd_inspect_kernel)

    i = sub.add_parser("graph-info", help="K-NN graph statistics", formatter_class=fmt)
    i.add_argument("--data", default=None, help="dataset directory; a Fibonacci lattice when omitted")
    i.add_argument("--nodes", type=int, default=200, help="lattice size when --data is omitted")
    i.add_argument("--k", type=int, default=8, help="neighbours per node")
    i.set_defaults(func=cmd_graph_info)
    return p


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get("CLCRN_THREADS"):
        try:
            n = int(os.environ["CLCRN_THREADS"])
        except ValueError:
            raise ConfigError(f"CLCRN_THREADS must be an integer, got {os.environ['CLCRN_THREADS']!r}") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError("thread count must be positive")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=resolve_threads(args.threads)):
            return args.func(args)
    except Diverged as exc:
        print(f"error: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CLCRNError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
