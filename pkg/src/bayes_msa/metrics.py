"""Pinball loss, Winkler score, RMSE and MAE, all in kWh."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidValue, ShapeError
from .forecast import empirical_quantile

DECILES = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass
class ScoreReport:
    rmse: float
    mae: float
    pinball_avg: float | None
    winkler: float | None
    pinball_by_quantile: dict = field(default_factory=dict)
    n: int = 0

    def as_dict(self):
        d = {"rmse": self.rmse, "mae": self.mae, "pinball_avg": self.pinball_avg,
             "winkler": self.winkler, "n": self.n}
        for tau, v in sorted(self.pinball_by_quantile.items()):
            d[f"pinball_q{tau:g}"] = v
        return d

    def to_text(self):
        lines = []
        for k, v in self.as_dict().items():
            lines.append(f"{k} = {'' if v is None else repr(v)}")
        return "\n".join(lines) + "\n"

    def to_csv_row(self):
        buf = io.StringIO()
        d = self.as_dict()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(d))
        w.writerow(["" if v is None else repr(v) for v in d.values()])
        return buf.getvalue()


def _check_tau(tau):
    if not 0 < tau < 1:
        raise InvalidValue(f"quantile level must lie in (0, 1), got {tau}")


def pinball(y, y_hat_tau, tau):
    """Quantile loss of forecast ``y_hat_tau`` at level ``tau``; works elementwise."""
    _check_tau(tau)
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(y_hat_tau, dtype=np.float64)
    out = np.where(y >= q, tau * (y - q), (1.0 - tau) * (q - y))
    return float(out) if out.ndim == 0 else out


def pinball_table(samples, actual, quantiles=DECILES):
    """Mean pinball per quantile level, quantiles taken from the sample draws."""
    samples = np.asarray(samples, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if samples.shape[1:] != actual.shape:
        raise ShapeError(f"samples {samples.shape} do not match actual {actual.shape}")
    if len(quantiles) == 0:
        raise InvalidValue("quantile set is empty")
    table = {}
    for tau in quantiles:
        q = np.clip(empirical_quantile(samples, tau), 0.0, None)
        table[float(tau)] = float(np.mean(pinball(actual, q, tau)))
    return table


def pinball_avg(dist, actual, quantiles=DECILES):
    """Average over quantile levels, horizon steps and windows."""
    samples = dist.samples if hasattr(dist, "samples") else dist
    return float(np.mean(list(pinball_table(samples, actual, quantiles).values())))


def winkler(y, lb, ub, gamma):
    """Interval score for band [lb, ub] at nominal coverage 1 - gamma; elementwise."""
    if not 0 < gamma < 1:
        raise InvalidValue(f"gamma must lie in (0, 1), got {gamma}")
    y = np.asarray(y, dtype=np.float64)
    lb = np.asarray(lb, dtype=np.float64)
    ub = np.asarray(ub, dtype=np.float64)
    if np.any(lb > ub):
        raise InvalidValue("lower bound exceeds upper bound")
    delta = ub - lb
    out = delta + np.where(y < lb, 2.0 * (lb - y) / gamma, 0.0) + np.where(y > ub, 2.0 * (y - ub) / gamma, 0.0)
    return float(out) if out.ndim == 0 else out


def _paired(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError(f"shapes differ: {y_hat.shape} vs {y.shape}")
    if y.size == 0:
        raise ShapeError("empty input")
    return y_hat, y


def rmse(y_hat, y):
    y_hat, y = _paired(y_hat, y)
    return float(np.sqrt(np.mean((y_hat - y) ** 2)))


def mae(y_hat, y):
    y_hat, y = _paired(y_hat, y)
    return float(np.mean(np.abs(y_hat - y)))


def coverage(actual, lb, ub):
    actual = np.asarray(actual)
    return float(np.mean((actual >= lb) & (actual <= ub)))


def score(samples, actual, probabilistic=True, quantiles=DECILES, gamma=0.1):
    """Full report for draws ``samples`` (S x ... x H, kWh) against ``actual`` (... x H).

    RMSE/MAE use the clipped predictive mean. Pinball and Winkler are left
    empty for point forecasters.
    """
    samples = np.asarray(samples, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    point = np.clip(samples.mean(axis=0), 0.0, None)
    report = ScoreReport(rmse(point, actual), mae(point, actual), None, None, {}, int(actual.size))
    if probabilistic:
        table = pinball_table(samples, actual, quantiles)
        lb = np.clip(empirical_quantile(samples, gamma / 2.0), 0.0, None)
        ub = np.clip(empirical_quantile(samples, 1.0 - gamma / 2.0), 0.0, None)
        report.pinball_by_quantile = table
        report.pinball_avg = float(np.mean(list(table.values())))
        report.winkler = float(np.mean(winkler(actual, lb, ub, gamma)))
    return report
