"""Experiment configuration and the end-to-end pipeline behind the CLI."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .dataio import fit_scaler, load_csv, make_windows, split, synth_solar, transform
from .errors import ConfigError
from .forecast import DEFAULT_LEVELS, ForecastDistribution, intervals, mc_forecast
from .metrics import DECILES, coverage, score
from .recurrent import BlockedModel, NetworkConfig
from .training import TrainConfig, train
from .variational import DivergenceSpec


@dataclass
class DataSpec:
    path: str | None = None
    synth_days: int = 120
    synth_seed: int = 0
    outlier_rate: float = 0.02
    outlier_scale: float = 3.0


@dataclass
class ModelSpec:
    cell_kind: str = "bilstm"
    hidden: int = 64
    bayesian: bool = True
    prior_sigma: float = 1.0
    rho_init: float = -3.0


@dataclass
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    k: int = 48
    horizon: int = 48
    block_size: int | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    samples: int = 200
    levels: list = field(default_factory=lambda: list(DEFAULT_LEVELS))
    quantiles: list = field(default_factory=lambda: list(DECILES))
    gamma: float = 0.1
    train_fraction: float = 0.75
    eval_stride: int | None = None
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.horizon < 1:
            raise ConfigError("k and horizon must be >= 1")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if any(not 0 < lv < 1 for lv in self.levels):
            raise ConfigError("levels must lie in (0, 1)")
        if self.eval_stride is not None and self.eval_stride < 1:
            raise ConfigError("eval_stride must be >= 1")

    @classmethod
    def from_dict(cls, raw):
        return _build(cls, raw, "")

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, TrainConfig):
                v = v.to_dict()
            elif dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
            out[f.name] = v
        return out

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def header(self):
        return f"bayes_msa {__version__} config_hash={self.config_hash()}"

    def network_config(self):
        m = self.model
        return NetworkConfig(m.cell_kind, m.hidden, 1, self.horizon, m.bayesian, m.prior_sigma,
                             m.rho_init)


_NESTED = {"data": DataSpec, "model": ModelSpec, "train": TrainConfig}


def _build(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if cls is ExperimentConfig and key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, where)
        elif cls is TrainConfig and key == "divergence":
            kwargs[key] = _build(DivergenceSpec, value, where)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def load_config(path, overrides=None):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(raw, dict):
        raw.pop("_header", None)
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, last = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[last] = value
    return ExperimentConfig.from_dict(raw)


# -- pipeline ------------------------------------------------------------------


@dataclass
class Prepared:
    series: object
    scaler: object
    train: object
    validation: object
    test: object
    segments: tuple


def load_series(cfg):
    d = cfg.data
    if d.path:
        return load_csv(d.path)
    return synth_solar(d.synth_days, d.synth_seed, d.outlier_rate, d.outlier_scale)


def prepare(cfg, series=None):
    series = load_series(cfg) if series is None else series
    seg_train, seg_val, seg_test = split(series, cfg.train_fraction, cfg.train.validation_fraction)
    scaler = fit_scaler(seg_train.values)
    ws = [make_windows(transform(scaler, s.values), cfg.k, cfg.horizon)
          for s in (seg_train, seg_val, seg_test)]
    return Prepared(series, scaler, *ws, (seg_train, seg_val, seg_test))


def block_seed(seed, block):
    return int(np.random.SeedSequence([seed, block]).generate_state(1)[0])


def fit(cfg, prepared, log=None):
    """Initialise and train one network per horizon block; returns (model, reports)."""
    rng = np.random.default_rng(cfg.seed)
    model = BlockedModel.initialize(cfg.network_config(), cfg.block_size, rng)
    reports = []
    for b, (net, (a, z)) in enumerate(zip(model.networks, model.blocks)):
        tcfg = dataclasses.replace(cfg.train, seed=block_seed(cfg.seed, b))
        tr = prepared.train.subset(slice(None))
        va = prepared.validation.subset(slice(None))
        tr.targets, va.targets = tr.targets[:, a:z], va.targets[:, a:z]
        reports.append(train(net, tr, va, tcfg, log=log))
    return model, reports


def test_windows(cfg, prepared):
    stride = cfg.eval_stride or 1
    idx = np.arange(0, len(prepared.test), stride)
    return prepared.test.subset(idx)


def evaluate(cfg, model, prepared, samples=None, seed=None):
    """Score the model on the test windows; returns (ScoreReport, samples_kwh, actual_kwh)."""
    tw = test_windows(cfg, prepared)
    S = cfg.samples if samples is None else samples
    if not model.bayesian:
        S = 1
    dist = mc_forecast(model, tw.inputs, S, cfg.seed + 1 if seed is None else seed, prepared.scaler)
    actual = prepared.scaler.min + tw.targets * (prepared.scaler.max - prepared.scaler.min)
    report = score(dist.samples, actual, probabilistic=model.bayesian and S >= 2,
                   quantiles=cfg.quantiles, gamma=cfg.gamma)
    return report, dist.samples, actual


def evaluate_series(cfg, model, scaler, series, samples=None, seed=None):
    """Score on every window of an external series, scaled with the stored scaler."""
    ws = make_windows(transform(scaler, series.values), cfg.k, model.horizon)
    prepared = Prepared(series, scaler, None, None, ws, ())
    return evaluate(cfg, model, prepared, samples, seed)


# -- comparison harness ------------------------------------------------------------

MODES = ("deterministic", "kl", "ab")
CELL_LABELS = {"rnn": "RNN", "lstm": "LSTM", "bilstm": "BiLSTM"}


@dataclass(frozen=True)
class Cell:
    """One entry of the comparison matrix."""

    cell_kind: str
    mode: str
    horizon: int
    seed: int
    alpha: float = 1.0
    beta: float = 2.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cell_kind not in CELL_LABELS:
            raise ConfigError(f"unknown cell_kind {self.cell_kind!r}")

    @property
    def cell_id(self):
        ab = f"/a={self.alpha!r},b={self.beta!r}" if self.mode == "ab" else ""
        return f"{self.cell_kind}/{self.mode}{ab}/H={self.horizon}/seed={self.seed}"

    @property
    def method(self):
        label = CELL_LABELS[self.cell_kind]
        if self.mode == "deterministic":
            return label
        if self.mode == "kl":
            return f"Bayesian {label} (KL)"
        return f"Bayesian {label} (AB a={self.alpha:g} b={self.beta:g})"


def derive_seed(base_seed, cell_id):
    digest = hashlib.sha256(f"{base_seed}|{cell_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def cell_config(base, cell):
    """The base config specialised to one cell.

    The data seed is the cell's paired seed, so every method sees the same
    series and split for a given seed; the model seed is derived from the
    cell id.
    """
    raw = base.to_dict()
    raw["horizon"] = cell.horizon
    raw["block_size"] = None
    raw["seed"] = derive_seed(base.seed, cell.cell_id)
    raw["data"]["synth_seed"] = cell.seed
    raw["model"]["cell_kind"] = cell.cell_kind
    raw["model"]["bayesian"] = cell.mode != "deterministic"
    div = raw["train"]["divergence"]
    if cell.mode == "deterministic":
        div["kind"] = "none"
    elif cell.mode == "kl":
        div["kind"] = "kl_closed_form"
    else:
        div.update(kind="ab_monte_carlo", alpha=cell.alpha, beta=cell.beta)
    return ExperimentConfig.from_dict(raw)


def run_cell(base, cell, prepared=None):
    """Train and score one cell; returns a flat result row."""
    cfg = cell_config(base, cell)
    prepared = prepare(cfg) if prepared is None else prepared
    model, reports = fit(cfg, prepared)
    report, samples, actual = evaluate(cfg, model, prepared)
    row = {"method": cell.method, "cell_kind": cell.cell_kind, "mode": cell.mode,
           "alpha": cell.alpha if cell.mode == "ab" else None,
           "beta": cell.beta if cell.mode == "ab" else None,
           "horizon": cell.horizon, "seed": cell.seed}
    row.update({k: report.as_dict()[k] for k in ("rmse", "mae", "pinball_avg", "winkler")})
    for level in (0.5, 0.9):
        key = f"coverage{round(level * 100)}"
        if model.bayesian and samples.shape[0] >= 2:
            band = intervals(ForecastDistribution(samples), [level])[0]
            lb, ub = np.clip(band.lower, 0.0, None), np.clip(band.upper, 0.0, None)
            row[key] = coverage(actual, lb, ub)
        else:
            row[key] = None
    row["epochs"] = sum(r.epochs_run for r in reports)
    row["train_loss"] = [v for r in reports for v in r.train_loss]
    return row


def _run_cell_args(args):
    return run_cell(*args)


def compare(base, cells, workers=1, log=None):
    """Run every cell, optionally in worker processes; rows come back in cell order."""
    cells = list(cells)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_cell_args, [(base, c) for c in cells]))
    else:
        rows = []
        for c in cells:
            rows.append(run_cell(base, c))
            if log is not None:
                log(rows[-1])
    return rows


SUMMARY_METRICS = ("rmse", "mae", "pinball_avg", "winkler")


def summarize(rows):
    """Median of each metric over seeds, per (method, horizon), in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["horizon"]), []).append(r)
    out = []
    for (method, horizon), rs in groups.items():
        s = {"method": method, "horizon": horizon, "seeds": len(rs)}
        for m in SUMMARY_METRICS:
            vals = [r[m] for r in rs if r[m] is not None]
            s[m] = float(np.median(vals)) if vals else None
        out.append(s)
    return out


def matrix_cells(cell_kinds, modes, horizons, seeds, ab_pairs=((1.0, 2.0),)):
    cells = []
    for seed in seeds:
        for h in horizons:
            for kind in cell_kinds:
                for mode in modes:
                    pairs = ab_pairs if mode == "ab" else [(1.0, 2.0)]
                    for a, b in pairs:
                        cells.append(Cell(kind, mode, h, seed, float(a), float(b)))
    return cells
