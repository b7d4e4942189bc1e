"""Acceptance suite.

One test per criterion, each asserting its stated statistical tolerance and
recording a pass/fail line (printed in the terminal summary).  Monte Carlo
criteria run fixed master seeds, so a green suite stays green.  Elapsed time
is reported per criterion; the stated runtime budgets assume an 8-core
desktop, so wall-clock is informational rather than asserted.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import stats
from scipy.spatial.distance import cdist

import invfree as iv
from invfree.cli import main as cli_main
from invfree.estimation import kl_bound_check, spectral_bounds, sweep_objective
from invfree.experiments import (
    ExperimentConfig,
    normality_study,
    quadratic_clt_check,
    rate_study,
    run_replicated,
)
from invfree.kernels import AnisotropyForm, radial_profile
from invfree.objective import QuadraticEvaluator, fd_gradient, quadratic_summary
from invfree.sampling import make_perturbed_lattice, sample_frequencies, simulate_field

from conftest import WORKERS
from test_objective import dense_oracle, random_config

ISO = AnisotropyForm("isotropic", 2)
DIAG = AnisotropyForm("diagonal_ranges", 2)


def closed_form_matern(nu, u):
    u = np.asarray(u, dtype=float)
    if nu == 0.5:
        return np.exp(-u)
    if nu == 1.5:
        return (1.0 + u) * np.exp(-u)
    return (1.0 + u + u * u / 3.0) * np.exp(-u)


def test_criterion_1_kernel_exactness(acceptance):
    t0 = time.perf_counter()
    gen = np.random.default_rng(1001)
    worst_closed = 0.0
    for nu in (0.5, 1.5, 2.5):
        u = gen.uniform(1e-6, 30.0, size=1000)
        closed = closed_form_matern(nu, u)
        fast = np.asarray(radial_profile(iv.matern(nu), u))
        generic = iv.kernels.matern_profile_generic(nu, u)
        worst_closed = max(
            worst_closed,
            float(np.max(np.abs(fast - closed) / closed)),
            float(np.max(np.abs(generic - closed) / closed)),
        )

    import os

    with open(os.path.join(os.path.dirname(__file__), "oracles", "bessel_kv_table.json")) as fh:
        table = json.load(fh)["values"]
    worst_bessel = max(
        abs(iv.bessel_k(row["nu"], row["x"]) - float(row["kv"])) / abs(float(row["kv"])) for row in table
    )
    elapsed = time.perf_counter() - t0
    acceptance(
        1,
        "kernel exactness (half-integer closed forms, quadrature table)",
        worst_closed < 1e-12 and worst_bessel < 1e-8,
        f"closed-form err {worst_closed:.2e}, bessel err {worst_bessel:.2e}, {elapsed:.1f}s",
    )


def test_criterion_2_dense_oracle_equivalence(acceptance):
    t0 = time.perf_counter()
    gen = np.random.default_rng(2002)
    worst = 0.0
    for _ in range(50):
        y, coords, family, aniso = random_config(gen)
        s = quadratic_summary(y, iv.SiteSet(coords), family, aniso)
        yky_ref, frob_ref = dense_oracle(y, coords, family, aniso)
        worst = max(worst, abs(s.yky - yky_ref) / abs(yky_ref), abs(s.k_frob_sq - frob_ref) / frob_ref)
    elapsed = time.perf_counter() - t0
    acceptance(2, "dense-oracle equivalence, 50 configs n <= 200", worst < 1e-12, f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_simulator_law(acceptance):
    t0 = time.perf_counter()
    family, aniso = iv.matern(0.5), iv.isotropic(4.0)
    lags = [(1.0, 0.0), (2.0, 0.0), (0.0, 3.0), (2.0, 2.0)]
    pts = np.vstack([[0.0, 0.0]] + [list(l) for l in lags])
    sites = iv.SiteSet(pts)
    R, p = 500, 20000
    prods = np.zeros((R, len(lags)))
    for r in range(R):
        y = simulate_field(sites, family, aniso, 1.0, p, 30000 + r).y
        prods[r] = y[0] * y[1:]
    emp = prods.mean(axis=0)
    se = prods.std(axis=0, ddof=1) / math.sqrt(R)
    cov_ok = True
    detail = []
    for lag, estimate_value, err in zip(lags, emp, se):
        target = iv.correlation(np.asarray(lag), family, aniso)
        z = (estimate_value - target) / err
        detail.append(f"{lag}:z={z:+.2f}")
        cov_ok = cov_ok and abs(estimate_value - target) <= 4.0 * err

    feats = sample_frequencies(family, aniso, 100_000, seed=31415, dim=2)
    radii = np.linalg.norm(feats.omegas, axis=1) * 4.0
    ks = stats.kstest(radii, lambda r: 1.0 - (1.0 + r * r) ** (-0.5)).statistic
    elapsed = time.perf_counter() - t0
    acceptance(
        3,
        "simulator law (covariance at 4 lags, frequency-radius KS)",
        cov_ok and ks < 0.01,
        f"{' '.join(detail)}, KS {ks:.4f}, {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_4_table3_desk_scale(acceptance):
    t0 = time.perf_counter()
    matern_cfg = ExperimentConfig(
        family=iv.matern(0.5), form=ISO, phi0=1.0, theta0=(4.0,),
        N=64, d=2, delta=0.1, p=20000, replicates=50, seed=101,
    )
    matern_report = run_replicated(matern_cfg, workers=WORKERS)
    rq_cfg = ExperimentConfig(
        family=iv.rational_quadratic(1.5, 2), form=ISO, phi0=1.0, theta0=(4.0,),
        N=64, d=2, delta=0.1, p=20000, replicates=50, seed=102,
    )
    rq_report = run_replicated(rq_cfg, workers=WORKERS)
    elapsed = time.perf_counter() - t0

    m_mean, m_rmse = matern_report.mean, matern_report.rmse
    ok = (
        3.2 <= m_mean["theta"] <= 4.8
        and m_rmse["theta"] <= 2.0
        and 0.9 <= m_mean["sigma"] <= 1.1
        and m_rmse["sigma"] <= 0.12
        and rq_report.rmse["theta"] <= 0.8
    )
    acceptance(
        4,
        "Table-3 desk scale (Matern nu=0.5 and RQ nu=1.5, N=64, T=50)",
        ok,
        f"matern theta {m_mean['theta']:.3f}+-{m_rmse['theta']:.3f} sigma {m_mean['sigma']:.3f}+-{m_rmse['sigma']:.3f} "
        f"excl {matern_report.excluded_count}; rq theta rmse {rq_report.rmse['theta']:.3f} "
        f"excl {rq_report.excluded_count}; {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_5_anisotropic_reproduction(acceptance):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(
        family=iv.matern(0.5), form=DIAG, phi0=1.0, theta0=(4.0, 6.0),
        N=64, d=2, delta=0.1, p=80000, replicates=30, seed=103,
    )
    report = run_replicated(cfg, workers=WORKERS)
    elapsed = time.perf_counter() - t0
    ok = (
        abs(report.mean["theta"] - 4.0) <= 1.5
        and abs(report.mean["rho"] - 6.0) <= 1.5
        and report.rmse["theta"] <= 2.0
        and report.rmse["rho"] <= 3.0
    )
    acceptance(
        5,
        "anisotropic reproduction (theta0, rho0) = (4, 6), N=64, T=30",
        ok,
        f"theta {report.mean['theta']:.3f}+-{report.rmse['theta']:.3f} "
        f"rho {report.mean['rho']:.3f}+-{report.rmse['rho']:.3f} excl {report.excluded_count}; {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_6_consistency_rate(acceptance):
    t0 = time.perf_counter()
    base = ExperimentConfig(
        family=iv.matern(0.5), form=ISO, phi0=1.0, theta0=(4.0,),
        N=16, d=2, delta=0.1, p=20000, replicates=40, seed=104,
    )
    result = rate_study(base, [16, 32, 64], T=40, workers=WORKERS)
    elapsed = time.perf_counter() - t0
    rmses = [pt["rmse_theta"] for pt in result.points]
    decreasing = all(a > b for a, b in zip(rmses, rmses[1:]))
    ok = decreasing and 0.5 <= result.slope <= 1.5
    acceptance(
        6,
        "consistency rate over N in {16, 32, 64}",
        ok,
        f"rmse {['%.3f' % r for r in rmses]}, slope {result.slope:.3f}, {elapsed:.0f}s",
    )


def test_criterion_7_stationary_point(acceptance):
    t0 = time.perf_counter()
    family = iv.matern(0.5)
    phi0, theta0 = 1.0, 4.0
    sites = make_perturbed_lattice(8, 2, 0.1, 777)
    aniso0 = iv.isotropic(theta0)
    R = 2000
    grads = np.empty((R, 2))
    bounds = [(1e-4, 1e4), (0.1, 15.0)]
    for r in range(R):
        y = simulate_field(sites, family, aniso0, phi0, 2048, 40000 + r).y
        ev = QuadraticEvaluator(sites, y, family, ISO)

        def f_eta(eta):
            return ev.f(eta[0], [eta[1]])

        grads[r] = fd_gradient(f_eta, np.array([phi0, theta0]), step=1e-3, bounds=bounds)
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1) / math.sqrt(R)
    z = mean / se
    elapsed = time.perf_counter() - t0
    acceptance(
        7,
        "stationary-point expectation of the loss gradient at eta0",
        bool(np.all(np.abs(z) <= 4.0)),
        f"z = ({z[0]:+.2f}, {z[1]:+.2f}), {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_8_asymptotic_normality(acceptance):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(
        family=iv.matern(0.5), form=ISO, phi0=1.0, theta0=(4.0,),
        N=64, d=2, delta=0.1, p=20000, replicates=200, seed=105,
    )
    study = normality_study(cfg, workers=WORKERS)
    stats_theta = study.per_param["theta"]
    elapsed = time.perf_counter() - t0
    ok = (
        abs(stats_theta["skewness"]) < 0.35
        and abs(stats_theta["excess_kurtosis"]) < 0.8
        and stats_theta["ks_pvalue"] > 0.01
    )
    acceptance(
        8,
        "asymptotic normality of standardized theta_hat (N=64, T=200)",
        ok,
        f"skew {stats_theta['skewness']:+.3f} exkurt {stats_theta['excess_kurtosis']:+.3f} "
        f"ks p {stats_theta['ks_pvalue']:.3f} excl {study.report.excluded_count}; {elapsed:.0f}s",
    )


def test_criterion_9_appendix_oracles(acceptance):
    t0 = time.perf_counter()
    grid = [[float(t)] for t in (2.0, 4.0, 6.0, 8.0)]
    lam = {}
    for N in (6, 8):
        sites = make_perturbed_lattice(N, 2, 0.1, 55)
        report = spectral_bounds(sites, iv.matern(0.5), ISO, grid)
        lam[N] = report.lambda_min_est
    spectral_ok = lam[6] > 0.0 and lam[8] > 0.0 and lam[8] >= 0.5 * lam[6]

    sites = make_perturbed_lattice(6, 2, 0.1, 56)
    gen = np.random.default_rng(57)
    kl_ok = True
    for _ in range(20):
        t1 = float(gen.uniform(2.0, 8.0))
        t2 = t1 + float(gen.uniform(-0.04, 0.04))
        kl, bound = kl_bound_check(sites, iv.matern(0.5), ISO, [t1], [t2])
        kl_ok = kl_ok and (kl <= bound)

    clt = quadratic_clt_check([512], matrix_family_seed=58, R=2000)[0]
    clt_ok = 1.8 <= clt["variance"] <= 2.2
    elapsed = time.perf_counter() - t0
    acceptance(
        9,
        "appendix oracles (spectral bounds, KL bound, quadratic-form CLT)",
        spectral_ok and kl_ok and clt_ok,
        f"lam_min {lam[6]:.4f}->{lam[8]:.4f}, 20 KL pairs ok={kl_ok}, clt var {clt['variance']:.3f}; {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_10_unimodality_evidence(acceptance):
    t0 = time.perf_counter()
    grid = np.linspace(0.1, 15.0, 200)
    interior = []
    for seed in range(10):
        sites = make_perturbed_lattice(64, 2, 0.1, 900 + seed)
        sample = simulate_field(sites, iv.matern(0.5), iv.isotropic(4.0), 1.0, 20000, 900 + seed, workers=WORKERS)
        curve = sweep_objective(sample, iv.matern(0.5), ISO, grid, workers=WORKERS)
        values = curve[:, 1]
        diffs = np.diff(values)
        sign_changes = int(np.sum(np.diff(np.sign(diffs)) != 0))
        argmax = curve[int(np.argmax(values)), 0]
        interior.append((sign_changes, argmax))
    ok = all(c == 1 and 0.1 < a < 15.0 for c, a in interior)
    elapsed = time.perf_counter() - t0
    acceptance(
        10,
        "unimodality evidence (10 seeded sweeps at N=64)",
        ok,
        f"sign changes {[c for c, _ in interior]}, argmax {['%.1f' % a for _, a in interior]}; {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_11_cli_determinism(acceptance, tmp_path):
    t0 = time.perf_counter()
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(
        json.dumps(
            {
                "command": "simulate",
                "N": 16,
                "d": 2,
                "delta": 0.2,
                "seed": 11,
                "p": 8192,
                "phi": 1.0,
                "family": {"kind": "matern", "nu": 0.5},
                "anisotropy": {"kind": "isotropic", "theta": 4.0},
            }
        )
    )
    est_cfg = tmp_path / "est.json"
    est_cfg.write_text(
        json.dumps(
            {
                "command": "estimate",
                "family": {"kind": "matern", "nu": 0.5},
                "anisotropy_form": {"kind": "isotropic"},
            }
        )
    )
    exp_cfg = tmp_path / "exp.json"
    exp_cfg.write_text(
        json.dumps(
            {
                "command": "experiment",
                "study": "replicated",
                "family": {"kind": "matern", "nu": 0.5},
                "anisotropy_form": {"kind": "isotropic"},
                "phi0": 1.0,
                "theta0": [4.0],
                "N": 10,
                "d": 2,
                "delta": 0.1,
                "p": 2048,
                "replicates": 3,
                "seed": 7,
            }
        )
    )

    ok = True
    details = []

    samples = {}
    for workers in (1, 8):
        out = str(tmp_path / f"sample_w{workers}.csv")
        assert cli_main(["simulate", "--config", str(sim_cfg), "--out", out, "--workers", str(workers)]) == 0
        samples[workers] = (open(out, "rb").read(), open(str(tmp_path / f"sample_w{workers}.json"), "rb").read())
    sim_same = samples[1] == samples[8]
    ok &= sim_same
    details.append(f"simulate identical={sim_same}")

    import contextlib
    import io

    est_outputs = {}
    for workers in (1, 8):
        buffer = io.StringIO()
        with contextlib.redirect_stdout(buffer):
            code = cli_main(
                [
                    "estimate",
                    "--sample",
                    str(tmp_path / "sample_w1.csv"),
                    "--config",
                    str(est_cfg),
                    "--workers",
                    str(workers),
                ]
            )
        assert code in (0, 2)
        est_outputs[workers] = buffer.getvalue()
    est_same = est_outputs[1] == est_outputs[8]
    ok &= est_same
    details.append(f"estimate identical={est_same}")

    reports = {}
    for workers in (1, 8):
        out = str(tmp_path / f"report_w{workers}")
        assert cli_main(["experiment", "--config", str(exp_cfg), "--out", out, "--workers", str(workers)]) == 0
        reports[workers] = (open(out + ".json", "rb").read(), open(out + ".csv", "rb").read())
    exp_same = reports[1] == reports[8]
    ok &= exp_same
    details.append(f"experiment identical={exp_same}")

    elapsed = time.perf_counter() - t0
    acceptance(11, "byte-identical reruns at worker counts 1 and 8", bool(ok), f"{', '.join(details)}; {elapsed:.0f}s")
