"""Half-hourly generation series: loading, scaling, windowing, splitting, synthesis."""

import csv
import datetime as dt
import math
from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateScale, GapError, InvalidValue, MissingColumn, NonMonotonicTimestamps,
                     NotFound, ParseError, TooShort)

STEP = dt.timedelta(minutes=30)
STEPS_PER_DAY = 48


@dataclass
class Series:
    timestamps: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.timestamps) != len(self.values):
            raise InvalidValue("timestamps and values differ in length")
        if not np.all(np.isfinite(self.values)):
            raise InvalidValue("series contains NaN or Inf")
        if np.any(self.values < 0):
            raise InvalidValue("generation values must be >= 0")
        validate_spacing(self.timestamps)

    def __len__(self):
        return len(self.values)

    def segment(self, start, stop):
        return Series(self.timestamps[start:stop], self.values[start:stop].copy())


def validate_spacing(timestamps):
    for prev, cur in zip(timestamps, timestamps[1:]):
        if cur <= prev:
            raise NonMonotonicTimestamps(f"timestamp {cur.isoformat()} does not follow {prev.isoformat()}")
        if cur - prev != STEP:
            raise GapError(f"missing interval(s) after {prev.isoformat()}: next is {cur.isoformat()}",
                           gap_at=prev + STEP)


def load_csv(path, timestamp_column="timestamp", value_column="kwh"):
    """Read the long two-column format into a validated Series."""
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise NotFound(f"no such file: {path}") from None
    with fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        if rows.fieldnames is None:
            raise ParseError(f"{path}: empty file")
        for col in (timestamp_column, value_column):
            if col not in rows.fieldnames:
                raise MissingColumn(f"{path}: missing column {col!r}")
        stamps, values = [], []
        for lineno, row in enumerate(rows, start=2):
            try:
                stamps.append(dt.datetime.fromisoformat(row[timestamp_column].strip()))
                values.append(float(row[value_column]))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not stamps:
        raise ParseError(f"{path}: no data rows")
    return Series(stamps, np.array(values))


def write_csv(series, path, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "kwh"])
        for t, v in zip(series.timestamps, series.values):
            w.writerow([t.isoformat(), repr(float(v))])


def convert_wide(in_path, customer_id, out_path, category="GG", header_comment=None):
    """Ausgrid-style wide CSV (one row per customer/category/day, 48 columns) to long CSV.

    Expected columns: ``Customer``, ``Consumption Category``, ``date`` and the
    48 half-hour columns in file order (``0:30`` ... ``0:00``). The first
    column is the interval ending 00:30, so its start instant is midnight.
    """
    try:
        fh = open(in_path, newline="")
    except FileNotFoundError:
        raise NotFound(f"no such file: {in_path}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{in_path}: empty file") from None
        for col in ("Customer", "Consumption Category", "date"):
            if col not in header:
                raise MissingColumn(f"{in_path}: missing column {col!r}")
        c_idx = header.index("Customer")
        k_idx = header.index("Consumption Category")
        d_idx = header.index("date")
        slots = [i for i, h in enumerate(header) if ":" in h]
        if len(slots) != STEPS_PER_DAY:
            raise MissingColumn(f"{in_path}: expected 48 half-hour columns, found {len(slots)}")
        days = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if row[c_idx].strip() != str(customer_id) or row[k_idx].strip() != category:
                continue
            try:
                day = _parse_day(row[d_idx].strip())
                days[day] = [float(row[i]) for i in slots]
            except ValueError as exc:
                raise ParseError(f"{in_path}:{lineno}: {exc}") from None
    if not days:
        raise NotFound(f"customer {customer_id!r} with category {category!r} not in {in_path}")
    stamps, values = [], []
    for day in sorted(days):
        base = dt.datetime.combine(day, dt.time())
        for j, v in enumerate(days[day]):
            stamps.append(base + j * STEP)
            values.append(v)
    series = Series(stamps, np.array(values))
    write_csv(series, out_path, header_comment)
    return series


def _parse_day(text):
    for fmt in ("%Y-%m-%d", "%d/%m/%Y", "%d-%b-%y"):
        try:
            return dt.datetime.strptime(text, fmt).date()
        except ValueError:
            pass
    raise ValueError(f"unrecognised date {text!r}")


# -- scaling -----------------------------------------------------------------


@dataclass(frozen=True)
class Scaler:
    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise DegenerateScale(f"scaler needs max > min, got [{self.min}, {self.max}]")

    def to_dict(self):
        return {"min": self.min, "max": self.max}


def fit_scaler(train_values):
    v = np.asarray(train_values, dtype=np.float64)
    if v.size == 0:
        raise InvalidValue("cannot fit a scaler on no data")
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        raise DegenerateScale("training values are constant")
    return Scaler(lo, hi)


def transform(scaler, values):
    return (np.asarray(values, dtype=np.float64) - scaler.min) / (scaler.max - scaler.min)


def inverse(scaler, scaled):
    return np.asarray(scaled, dtype=np.float64) * (scaler.max - scaler.min) + scaler.min


# -- windowing / splitting -------------------------------------------------------


@dataclass
class WindowSet:
    inputs: np.ndarray   # N x k x 1
    targets: np.ndarray  # N x H
    k: int
    H: int

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, index):
        return WindowSet(self.inputs[index], self.targets[index], self.k, self.H)


def make_windows(series_scaled, k, H):
    """Stride-1 windows: inputs x[i:i+k], targets x[i+k:i+k+H]."""
    x = np.asarray(series_scaled, dtype=np.float64).reshape(-1)
    if k < 1 or H < 1:
        raise InvalidValue("k and H must be >= 1")
    if x.size < k + H:
        raise TooShort(f"series of length {x.size} is shorter than k + H = {k + H}")
    n = x.size - k - H + 1
    idx = np.arange(n)[:, None]
    inputs = x[idx + np.arange(k)][:, :, None]
    targets = x[idx + k + np.arange(H)]
    return WindowSet(inputs, targets, k, H)


def split(series, train_fraction=0.75, validation_fraction=0.2):
    """Chronological (train, validation, test) segments.

    ``train_fraction`` of the series is the training period; the last
    ``validation_fraction`` of that period is held out for validation.
    """
    for name, f in (("train_fraction", train_fraction), ("validation_fraction", validation_fraction)):
        if not 0 < f < 1:
            raise InvalidValue(f"{name} must lie in (0, 1), got {f}")
    n = len(series)
    n_train_total = int(round(n * train_fraction))
    n_val = int(round(n_train_total * validation_fraction))
    n_train = n_train_total - n_val
    if n_train < 1 or n_val < 1 or n_train_total >= n:
        raise InvalidValue("split leaves an empty segment")
    if isinstance(series, Series):
        return (series.segment(0, n_train), series.segment(n_train, n_train_total),
                series.segment(n_train_total, n))
    arr = np.asarray(series)
    return arr[:n_train], arr[n_train:n_train_total], arr[n_train_total:]


# -- synthetic data ----------------------------------------------------------


def synth_solar(days, seed=0, outlier_rate=0.0, outlier_scale=3.0, peak_kwh=1.2,
                start=dt.datetime(2011, 7, 1)):
    """Synthetic half-hourly rooftop PV generation in kWh per interval.

    Clipped-sine diurnal envelope (zero outside daylight, day length varying
    with season), a day-level amplitude random walk, multiplicative noise, and
    daytime outliers: with probability ``outlier_rate`` an interval gets a
    spike or a drop of size ``outlier_scale`` times the typical noise level.
    """
    if days < 1:
        raise InvalidValue("days must be >= 1")
    if not 0 <= outlier_rate < 1:
        raise InvalidValue("outlier_rate must lie in [0, 1)")
    if outlier_scale < 0:
        raise InvalidValue("outlier_scale must be >= 0")
    rng = np.random.default_rng(seed)
    n = days * STEPS_PER_DAY
    slot = np.arange(n) % STEPS_PER_DAY
    day = np.arange(n) // STEPS_PER_DAY
    doy = (start.timetuple().tm_yday + day) % 365
    # southern-hemisphere season: longest day near late December
    daylight = 12.0 + 2.0 * np.cos(2 * math.pi * (doy - 355) / 365.0)
    hour = (slot + 0.5) / 2.0
    sunrise = 12.0 - daylight / 2.0
    envelope = np.clip(np.sin(math.pi * (hour - sunrise) / daylight), 0.0, None)
    envelope[(hour < sunrise) | (hour > sunrise + daylight)] = 0.0

    amp = np.empty(days)
    a = 0.8
    for d in range(days):
        a = float(np.clip(a + rng.normal(0.0, 0.12), 0.25, 1.0))
        amp[d] = a
    seasonal = 0.85 + 0.15 * np.cos(2 * math.pi * (doy - 355) / 365.0)
    noise = 1.0 + 0.08 * rng.standard_normal(n)
    values = peak_kwh * seasonal * amp[day] * envelope * noise

    daytime = envelope > 0
    hits = (rng.random(n) < outlier_rate) & daytime
    signs = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    size = outlier_scale * 0.1 * peak_kwh * (0.5 + rng.random(n))
    values = values + hits * signs * size
    values = np.clip(values, 0.0, None)
    values[~daytime] = 0.0

    stamps = [start + i * STEP for i in range(n)]
    return Series(stamps, values)
