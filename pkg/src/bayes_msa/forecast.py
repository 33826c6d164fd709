"""Monte-Carlo predictive distributions, prediction intervals, and kWh output."""

import csv
from dataclasses import dataclass

import numpy as np

from .dataio import inverse, transform
from .errors import InvalidValue, ShapeError

DEFAULT_LEVELS = (0.2, 0.5, 0.9)


@dataclass
class ForecastDistribution:
    """Draws along axis 0, horizon along the last axis (S x H or S x N x H), in kWh."""

    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim < 2 or self.samples.shape[0] < 1:
            raise InvalidValue("need at least one sample path")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidValue("forecast samples contain NaN or Inf")

    @property
    def sample_count(self):
        return self.samples.shape[0]

    @property
    def horizon(self):
        return self.samples.shape[-1]


@dataclass
class IntervalBand:
    level: float
    lower: np.ndarray
    upper: np.ndarray

    @property
    def gamma(self):
        return 1.0 - self.level

    @property
    def width(self):
        return self.upper - self.lower


def mc_forecast(model, windows, samples, seed, scaler=None, zero_noise=False):
    """``samples`` forward passes, each with a fresh weight draw.

    ``windows`` are scaled inputs (k x 1 or N x k x 1). Outputs are
    inverse-scaled when a scaler is given. ``zero_noise`` runs every pass at
    the posterior mean.
    """
    if samples < 1:
        raise InvalidValue("samples must be >= 1")
    windows = np.asarray(windows, dtype=np.float64)
    single = windows.ndim == 2
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(samples):
        out = model.predict(windows, None if zero_noise or not model.bayesian else rng)
        draws.append(out[0] if single else out)
    arr = np.stack(draws)
    if scaler is not None:
        arr = inverse(scaler, arr)
    return ForecastDistribution(arr)


def predictive_mean(dist):
    return dist.samples.mean(axis=0)


def empirical_quantile(samples, tau, axis=0):
    """Linear-interpolation quantile with a small-sample clamp.

    Tail levels the sample cannot resolve (tau < 1/S, or 1 - tau < 1/S) map
    to the sample minimum or maximum.
    """
    samples = np.asarray(samples, dtype=np.float64)
    S = samples.shape[axis]
    if tau < 1.0 / S:
        return samples.min(axis=axis)
    if 1.0 - tau < 1.0 / S:
        return samples.max(axis=axis)
    return np.quantile(samples, tau, axis=axis, method="linear")


def intervals(dist, levels=DEFAULT_LEVELS):
    """Central bands at each coverage level from empirical quantiles."""
    if dist.sample_count < 2:
        raise InvalidValue("intervals need at least two samples")
    bands = []
    for level in levels:
        if not 0 < level < 1:
            raise InvalidValue(f"coverage level must lie in (0, 1), got {level}")
        tail = (1.0 - level) / 2.0
        bands.append(IntervalBand(float(level),
                                  empirical_quantile(dist.samples, tail),
                                  empirical_quantile(dist.samples, 1.0 - tail)))
    return bands


def clamp_nonnegative(mean, bands):
    """Generation cannot be negative; clip after quantiles so nesting survives."""
    mean = np.clip(mean, 0.0, None)
    bands = [IntervalBand(b.level, np.clip(b.lower, 0.0, None), np.clip(b.upper, 0.0, None))
             for b in bands]
    return mean, bands


def msa_predict(model, scaler, series_tail, samples=200, levels=DEFAULT_LEVELS, seed=0,
                zero_noise=False):
    """Forecast the next H intervals (kWh) from the last k observations (kWh)."""
    tail = np.asarray(series_tail, dtype=np.float64).reshape(-1)
    window = transform(scaler, tail)[:, None]
    dist = mc_forecast(model, window, samples, seed, scaler, zero_noise=zero_noise)
    mean = predictive_mean(dist)
    bands = intervals(dist, levels) if dist.sample_count >= 2 else [
        IntervalBand(float(lv), mean.copy(), mean.copy()) for lv in levels]
    return clamp_nonnegative(mean, bands)


def band_columns(levels):
    cols = []
    for lv in levels:
        tag = f"{lv * 100:g}"
        cols += [f"lb{tag}", f"ub{tag}"]
    return cols


def write_forecast_csv(path, mean, bands, actual=None, header_comment=None):
    """CSV with columns step, mean_kwh, lb/ub per level, and actual_kwh when given."""
    mean = np.asarray(mean)
    if actual is not None and len(actual) != len(mean):
        raise ShapeError("actual values must cover the forecast horizon")
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        header = ["step", "mean_kwh"] + band_columns([b.level for b in bands])
        if actual is not None:
            header.append("actual_kwh")
        w.writerow(header)
        for h in range(len(mean)):
            row = [h + 1, repr(float(mean[h]))]
            for b in bands:
                row += [repr(float(b.lower[h])), repr(float(b.upper[h]))]
            if actual is not None:
                row.append(repr(float(actual[h])))
            w.writerow(row)
