"""Acceptance criteria 1-9, each reporting one PASS/FAIL line.

Criteria 5-8 share one set of desk-scale training runs (module fixtures),
so the whole file takes roughly twenty minutes on one CPU core.
"""

import dataclasses
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from bayes_msa import autodiff as ad
from bayes_msa import variational as V
from bayes_msa.cli import main
from bayes_msa.experiment import Cell, ExperimentConfig, run_cell
from bayes_msa.metrics import mae, pinball, rmse, winkler
from bayes_msa.recurrent import Network, NetworkConfig
from bayes_msa.training import TrainConfig, batch_loss
from conftest import ACCEPTANCE_LINES

SEEDS = range(5)
HORIZONS = (1, 12, 24, 48)

# Desk-scale settings shared by every arm of criteria 5-8. The divergence
# weight 1/batch_size turns "mean NLL + D/num_batches" into the per-window
# ELBO (see the decisions ledger).
BASE = {
    "data": {"synth_days": 120, "outlier_rate": 0.02},
    "k": 48,
    "horizon": 48,
    "model": {"hidden": 16},
    "train": {"epochs": 20, "batch_size": 128, "learning_rate": 0.005, "patience": 0,
              "divergence_weight": 1.0 / 128},
    "samples": 100,
    "eval_stride": 7,
}


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def median(rows, mode, key, horizon=48):
    return float(np.median([r[key] for r in rows if r["mode"] == mode and r["horizon"] == horizon]))


# -- 1: gradient oracle ------------------------------------------------------------


def _primitive_cases(rng):
    m = lambda *s: ad.leaf(rng.normal(size=s))  # noqa: E731
    pos = lambda *s: ad.leaf(np.abs(rng.normal(size=s)) + 0.5)  # noqa: E731
    return {
        "add": lambda: (lambda a, b: ad.add(a, b), [m(3, 2), m(1, 2)]),
        "sub": lambda: (lambda a, b: ad.sub(a, b), [m(3, 2), m(3, 1)]),
        "mul_elementwise": lambda: (lambda a, b: ad.mul(a, b), [m(3, 2), m(3, 2)]),
        "div": lambda: (lambda a, b: ad.div(a, b), [m(3, 2), pos(3, 2)]),
        "matmul": lambda: (lambda a, b: ad.matmul(a, b), [m(3, 4), m(4, 2)]),
        "scale": lambda: (lambda a: ad.scale(a, 1.7), [m(2, 2)]),
        "negate": lambda: (lambda a: ad.negate(a), [m(2, 2)]),
        "sigmoid": lambda: (lambda a: ad.sigmoid(a), [m(2, 3)]),
        "tanh": lambda: (lambda a: ad.tanh(a), [m(2, 3)]),
        "softplus": lambda: (lambda a: ad.softplus(a), [m(2, 3)]),
        "log": lambda: (lambda a: ad.log(a), [pos(2, 3)]),
        "exp": lambda: (lambda a: ad.exp(a), [m(2, 3)]),
        "square": lambda: (lambda a: ad.square(a), [m(2, 3)]),
        "sum": lambda: (lambda a: ad.sum(a, axis=0), [m(3, 2)]),
        "mean": lambda: (lambda a: ad.mean(a, axis=1), [m(3, 2)]),
        "logsumexp": lambda: (lambda a: ad.logsumexp(a, axis=0), [m(4, 3)]),
        "concat_rows": lambda: (lambda a, b: ad.concat_rows(a, b), [m(1, 3), m(2, 3)]),
        "concat_cols": lambda: (lambda a, b: ad.concat_cols(a, b), [m(2, 1), m(2, 3)]),
        "slice_rows": lambda: (lambda a: ad.slice_rows(a, 1, 3), [m(4, 2)]),
        "slice_cols": lambda: (lambda a: ad.slice_cols(a, 1, 2), [m(2, 3)]),
        "reshape": lambda: (lambda a: ad.reshape(a, (3, 2)), [m(2, 3)]),
        "lstm_gates": lambda: (lambda z, c: ad.lstm_gates(z, c), [m(2, 8), m(2, 2)]),
    }


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for name, build in _primitive_cases(rng).items():
        assert name in ad.PRIMITIVES
        for _ in range(10):
            op, leaves = build()
            w = rng.normal(size=op(*leaves).shape)
            loss = lambda: ad.sum(ad.mul(op(*leaves), ad.constant(w)))  # noqa: E731
            worst[name] = max(worst.get(name, 0.0), ad.check_gradients(loss, leaves, 1e-5))
    cfg = NetworkConfig("bilstm", hidden=3, horizon=2, bayesian=True, rho_init=-1.0)
    net = Network.initialize(cfg, np.random.default_rng(1))
    x, y = rng.uniform(size=(3, 4, 1)), rng.uniform(size=(3, 2))
    for kind in ("ab_monte_carlo", "kl_closed_form"):
        tcfg = TrainConfig(divergence=V.DivergenceSpec(kind, 1.0, 2.0, 8))
        worst[f"bilstm_loss[{kind}]"] = ad.check_gradients(
            lambda: batch_loss(net, x, y, tcfg, 3, np.random.default_rng(5)), net.parameters(), 1e-5)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 60 and len(worst) == len(ad.PRIMITIVES) + 2
    assert report(1, ok, f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} checks, "
                         f"{elapsed:.1f}s")


# -- 2: collapsed coefficient ------------------------------------------------------------


def test_criterion_2_collapsed_coefficient():
    grid = np.linspace(0.25, 15.0, 20)
    pairs = [(a, b) for a in grid for b in grid] + [(1, 2), (2, 3), (3, 4), (2, 6), (3, 8), (5, 15)]
    worst = max(abs(V.ab_coefficient(a, b)) for a, b in pairs)
    exact_zero = all(V.ab_coefficient_exact(Fraction(a), Fraction(b)) == 0 for a, b in pairs)
    assert report(2, worst < 1e-12 and exact_zero,
                  f"max |coefficient| {worst:.1e} over {len(pairs)} pairs; exact rational = 0: "
                  f"{exact_zero}")


# -- 3: divergence identities -------------------------------------------------------------


def test_criterion_3_divergence_identities():
    from scipy import stats

    rng = np.random.default_rng(42)
    kl_z = []
    for _ in range(5):
        mu, sigma, prior = rng.normal(size=(3, 3)), rng.uniform(0.1, 2.0, (3, 3)), rng.uniform(0.5, 2)
        vg = V.VariationalGaussian(mu, np.log(np.expm1(sigma)), prior)
        w = mu + sigma * rng.standard_normal((100_000, 3, 3))
        draws = np.sum(stats.norm.logpdf(w, mu, sigma) - stats.norm.logpdf(w, 0, prior), axis=(1, 2))
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        kl_z.append(abs(V.kl_gaussian(vg).item() - draws.mean()) / se)

    vg = V.VariationalGaussian(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)) - 1)
    sig = ad.softplus(vg.rho).value.reshape(1, -1)

    def self_target(draws):
        return [V.log_q_entries(draws[0], ad.constant(vg.mu.value.reshape(1, -1)), ad.constant(sig))]

    est, se = V.ab_divergence_mc_with_se([vg], self_target, V.DivergenceSpec("ab_monte_carlo", 1, 2, 100_000),
                                         rng)
    ab_z = abs(est.item()) / se
    ok = max(kl_z) < 3 and ab_z < 3
    assert report(3, ok, f"KL vs MC max |z| {max(kl_z):.2f} on 5 layers; AB(1,2) self-target "
                         f"{est.item():+.2e} (|z| {ab_z:.2f})")


# -- 4: metric oracles --------------------------------------------------------------


def test_criterion_4_metric_oracles():
    checks = {
        "winkler(1,3,0.5,0.1)=12": abs(winkler(0.5, 1.0, 3.0, 0.1) - 12.0),
        "pinball(2,1,0.9)=0.9": abs(pinball(2.0, 1.0, 0.9) - 0.9),
        "rmse({0,3})=sqrt(4.5)": abs(rmse([0.0, 0.0], [0.0, 3.0]) - math.sqrt(4.5)),
        "mae({0,3})=1.5": abs(mae([0.0, 0.0], [0.0, 3.0]) - 1.5),
    }
    worst = max(checks.values())
    assert report(4, worst <= 1e-12, f"max deviation {worst:.1e} over {len(checks)} hand examples")


# -- shared desk-scale runs --------------------------------------------------------------


@pytest.fixture(scope="module")
def base_config():
    return ExperimentConfig.from_dict(json.loads(json.dumps(BASE)))


@pytest.fixture(scope="module")
def table_runs(base_config):
    t0 = time.perf_counter()
    rows = [run_cell(base_config, Cell("bilstm", mode, 48, seed))
            for seed in SEEDS for mode in ("deterministic", "kl", "ab")]
    return rows, time.perf_counter() - t0


@pytest.fixture(scope="module")
def horizon_runs(base_config, table_runs):
    rows = [r for r in table_runs[0] if r["mode"] == "ab"]
    rows += [run_cell(base_config, Cell("bilstm", "ab", h, seed)) for seed in SEEDS for h in HORIZONS[:-1]]
    return rows


@pytest.mark.slow
def test_criterion_5_table_ordering(table_runs):
    rows, elapsed = table_runs
    m = {(mode, key): median(rows, mode, key) for mode in ("deterministic", "kl", "ab")
         for key in ("rmse", "pinball_avg", "winkler") if not (mode == "deterministic" and key != "rmse")}
    checks = {
        "pinball AB<=KL": m["ab", "pinball_avg"] <= m["kl", "pinball_avg"],
        "winkler AB<=KL": m["ab", "winkler"] <= m["kl", "winkler"],
        "rmse AB<det": m["ab", "rmse"] < m["deterministic", "rmse"],
        "rmse KL<det": m["kl", "rmse"] < m["deterministic", "rmse"],
        "runtime<15min": elapsed < 15 * 60,
    }
    detail = (f"median pinball AB {m['ab', 'pinball_avg']:.4f} / KL {m['kl', 'pinball_avg']:.4f}; "
              f"winkler AB {m['ab', 'winkler']:.4f} / KL {m['kl', 'winkler']:.4f}; "
              f"rmse AB {m['ab', 'rmse']:.4f} / KL {m['kl', 'rmse']:.4f} / det "
              f"{m['deterministic', 'rmse']:.4f}; {elapsed / 60:.1f} min")
    failed = [k for k, v in checks.items() if not v]
    if failed:
        per_seed = {mode: [round(r["rmse"], 4) for r in rows if r["mode"] == mode]
                    for mode in ("deterministic", "kl", "ab")}
        detail += f"; failed: {', '.join(failed)}; per-seed rmse {per_seed}"
    assert report(5, not failed, detail)


@pytest.mark.slow
def test_criterion_6_horizon_trend(horizon_runs):
    med = [float(np.median([r["rmse"] for r in horizon_runs if r["horizon"] == h])) for h in HORIZONS]
    ok = all(a <= b * 1.05 for a, b in zip(med, med[1:]))
    assert report(6, ok, "median AB rmse by H " +
                  ", ".join(f"H={h}: {v:.4f}" for h, v in zip(HORIZONS, med)))


@pytest.mark.slow
def test_criterion_7_calibration(table_runs):
    ab = [r for r in table_runs[0] if r["mode"] == "ab"]
    c90 = float(np.median([r["coverage90"] for r in ab]))
    c50 = float(np.median([r["coverage50"] for r in ab]))
    ok = 0.80 <= c90 <= 0.99 and c50 < c90
    assert report(7, ok, f"AB median coverage 90% PI {c90:.3f}, 50% PI {c50:.3f}; per-seed 90% "
                         f"{[round(r['coverage90'], 3) for r in ab]}")


def smoothed(values, width=5):
    return np.convolve(values, np.ones(width) / width, mode="valid")


@pytest.mark.slow
def test_criterion_8_convergence_shape(table_runs):
    curve = next(r for r in table_runs[0] if r["mode"] == "ab" and r["seed"] == 0)["train_loss"]
    sm = smoothed(np.asarray(curve))
    monotone = bool(np.all(np.diff(sm) <= 0))
    upturn = (curve[-1] - curve[-2]) / abs(curve[-2])
    ok = monotone and upturn <= 0.02
    assert report(8, ok, f"AB seed 0: 5-epoch average monotone {monotone}; final-epoch change "
                         f"{100 * upturn:+.2f}% ({curve[0]:.2f} -> {curve[-1]:.2f})")


# -- 9: determinism ---------------------------------------------------------------------


def test_criterion_9_end_to_end_determinism(tmp_path):
    cfg = {"data": {"synth_days": 30}, "k": 24, "horizon": 12, "model": {"hidden": 4},
           "train": {"epochs": 2, "batch_size": 64}, "samples": 50}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["synth", str(tmp_path / "series.csv"), "--days", "2", "--seed", "9"]) == 0
    outputs = []
    for run in ("a", "b"):
        assert main(["train", str(tmp_path / "cfg.json"), "--out", str(tmp_path / run), "--quiet"]) == 0
        out = tmp_path / run / "forecast.csv"
        assert main(["forecast", str(tmp_path / run / "checkpoint.json"), str(tmp_path / "series.csv"),
                     "--out", str(out)]) == 0
        outputs.append(out.read_bytes())
    same = outputs[0] == outputs[1]
    assert report(9, same, f"two train+forecast runs give byte-identical CSVs: {same} "
                           f"({len(outputs[0])} bytes)")
