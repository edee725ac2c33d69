"""Forecast error metrics.

Arrays have a leading forecast-step axis: ``pred[s]`` and ``truth[s]`` hold the
frame predicted ``s + 1`` steps ahead (any trailing shape, typically windows x N x D).
"""
from __future__ import annotations

import numpy as np

from .errors import EmptySplit, ShapeMismatch


def _check(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise EmptySplit("no values to score")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _check(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def mape(pred, truth) -> float:
    """Mean of |pred - truth| / |truth| over entries whose truth is non-zero."""
    pred, truth = _check(pred, truth)
    keep = truth != 0
    if not np.any(keep):
        return float("nan")
    return float(np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep])))


def rmse_conventional(pred, truth) -> float:
    pred, truth = _check(pred, truth)
    return float(np.sqrt(np.mean(np.square(pred - truth))))


def rmse_paper(pred, truth) -> float:
    """(1/T) * sqrt(sum_s |F_hat(s) - F(s)|^2) over the T steps of the leading axis,
    where |.|^2 of a frame is its mean squared error."""
    pred, truth = _check(pred, truth)
    steps = pred.shape[0]
    per_step = np.mean(np.square(pred - truth).reshape(steps, -1), axis=1)
    return float(np.sqrt(np.sum(per_step)) / steps)


def horizon_metrics(pred, truth, horizons) -> dict:
    """Per-horizon metrics: horizon ``h`` scores the frames predicted ``h`` steps ahead.

    ``rmse_paper`` is a sequence metric, so for horizon ``h`` it is taken over the
    forecast sequence of steps 1..h.
    """
    pred, truth = _check(pred, truth)
    out = {}
    for h in horizons:
        if not 1 <= h <= pred.shape[0]:
            raise ValueError(f"horizon {h} outside 1..{pred.shape[0]}")
        p, t = pred[h - 1], truth[h - 1]
        out[h] = {
            "mae": mae(p, t),
            "rmse_paper": rmse_paper(pred[:h], truth[:h]),
            "rmse_conventional": rmse_conventional(p, t),
            "mape": mape(p, t),
        }
    return out


def overall_metrics(pred, truth) -> dict:
    """Metrics pooled over every forecast step."""
    return {
        "mae": mae(pred, truth),
        "rmse_paper": rmse_paper(pred, truth),
        "rmse_conventional": rmse_conventional(pred, truth),
        "mape": mape(pred, truth),
    }
