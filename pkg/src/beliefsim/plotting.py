"""Curve preprocessing and metric plots.

Preprocessing convention (stated here because plots and tests share it):
each curve is smoothed with an exponential moving average of window 10
(alpha = 2 / (window + 1), seeded at the first value), then resampled by
linear interpolation at 128 points uniformly covering the union of the
curves' x ranges. The confidence band is the across-curve 5th/95th
percentile at each position (a 90% region).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

EMA_WINDOW = 10
RESAMPLE_POINTS = 128
BAND_PERCENTILES = (5.0, 95.0)


def ema_smooth(ys: np.ndarray, window: int = EMA_WINDOW) -> np.ndarray:
    alpha = 2.0 / (window + 1.0)
    out = np.empty_like(np.asarray(ys, dtype=np.float64))
    acc = float(ys[0])
    for i, y in enumerate(ys):
        acc = alpha * float(y) + (1.0 - alpha) * acc if i else float(y)
        out[i] = acc
    return out


@dataclass
class PreprocessedCurves:
    xs: np.ndarray        # [RESAMPLE_POINTS]
    curves: np.ndarray    # [num_curves, RESAMPLE_POINTS]
    median: np.ndarray
    band_low: np.ndarray
    band_high: np.ndarray


def curve_preprocess(
    curves: list[list[tuple[float, float]]],
    num_points: int = RESAMPLE_POINTS,
    window: int = EMA_WINDOW,
) -> PreprocessedCurves:
    """Smooth, resample, and band a family of (x, y) curves.

    Accepts one curve per seed; a single curve yields a degenerate band.
    Every curve needs at least two points.
    """
    if not curves:
        raise InvalidInputError("need at least one curve")
    for curve in curves:
        if len(curve) < 2:
            raise InvalidInputError("every curve needs at least two points")

    x_min = min(x for curve in curves for x, _ in curve)
    x_max = max(x for curve in curves for x, _ in curve)
    xs = np.linspace(x_min, x_max, num_points)

    rows = []
    for curve in curves:
        pts = sorted(curve)
        cx = np.array([x for x, _ in pts], dtype=np.float64)
        cy = ema_smooth(np.array([y for _, y in pts], dtype=np.float64), window)
        rows.append(np.interp(xs, cx, cy))
    stacked = np.stack(rows)
    lo, hi = np.percentile(stacked, BAND_PERCENTILES, axis=0)
    return PreprocessedCurves(
        xs=xs,
        curves=stacked,
        median=np.median(stacked, axis=0),
        band_low=lo,
        band_high=hi,
    )


def plot_metric(curves_by_label: dict[str, list[list[tuple[float, float]]]],
                out_path, title: str = "", xlabel: str = "step",
                ylabel: str = "value") -> None:
    """One preprocessed line (with band) per label; written as a figure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, curves in curves_by_label.items():
        prep = curve_preprocess(curves)
        (line,) = ax.plot(prep.xs, prep.median, label=label)
        ax.fill_between(prep.xs, prep.band_low, prep.band_high,
                        color=line.get_color(), alpha=0.2)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
