"""Replicated Monte Carlo studies: table reproduction, rate, and normality.

Each replicate is an independent simulate-then-estimate cycle.  Replicate
seeds are derived from the master seed with the replicate index as a child
key, so replicates can run on any number of workers without seed collisions;
aggregation always walks replicates in index order, which keeps reports
byte-for-byte reproducible.  Replicates whose estimate hits a parameter
boundary are excluded from the mean/RMSE aggregates (their records are kept
and counted).

Wall-clock fields are diagnostic only and never enter serialized reports.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as _stats

from invfree import rng as _rng
from invfree.estimation import estimate
from invfree.kernels import AnisotropyForm, KernelFamily, ParameterSpace
from invfree.optimizer import OptimizerConfig
from invfree.sampling import make_perturbed_lattice, simulate_field

__all__ = [
    "ExperimentConfig",
    "ExperimentReport",
    "NormalityReport",
    "RateStudyReport",
    "ReplicateRecord",
    "normality_study",
    "quadratic_clt_check",
    "rate_study",
    "replicate_seed",
    "run_replicated",
]


def replicate_seed(master_seed: int, index: int) -> int:
    """Child seed for one replicate: first 64-bit word of (master, index)."""
    seq = np.random.SeedSequence((int(master_seed), int(index)))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    """Protocol of one replicated study."""

    family: KernelFamily
    form: AnisotropyForm
    phi0: float
    theta0: tuple[float, ...]
    N: int
    d: int = 2
    delta: float = 0.1
    p: int = 20000
    replicates: int = 50
    seed: int = 0
    space: ParameterSpace | None = None
    optimizer: OptimizerConfig | None = None

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.phi0 <= 0.0:
            raise ValueError("phi0 must be positive")
        if self.form.dim != self.d:
            raise ValueError(f"anisotropy form is {self.form.dim}d but d = {self.d}")
        if len(self.theta0) != self.form.n_params:
            raise ValueError(
                f"theta0 has {len(self.theta0)} coordinates, form needs {self.form.n_params}"
            )
        space = self.resolved_space()
        if not space.contains_theta(np.asarray(self.theta0)):
            raise ValueError("theta0 lies outside the theta box")
        lo, hi = space.phi_interval
        if not lo <= self.phi0 <= hi:
            raise ValueError("phi0 lies outside the phi interval")

    def resolved_space(self) -> ParameterSpace:
        return self.space if self.space is not None else ParameterSpace.default(self.form.n_params)

    def param_names(self) -> list[str]:
        return ["sigma"] + self.form.param_names()

    def true_values(self) -> dict[str, float]:
        names = self.param_names()
        values = [math.sqrt(self.phi0)] + [float(t) for t in self.theta0]
        return dict(zip(names, values))


@dataclass
class ReplicateRecord:
    """One simulate-then-estimate cycle."""

    index: int
    seed: int
    phi_hat: float
    sigma_hat: float
    theta_hat: tuple[float, ...]
    boundary_hit: tuple[bool, ...]
    phi_clamped: bool
    converged: bool
    iterations: int
    simulate_seconds: float = 0.0
    estimate_seconds: float = 0.0

    @property
    def excluded(self) -> bool:
        return any(self.boundary_hit) or self.phi_clamped

    def values(self) -> list[float]:
        return [self.sigma_hat] + list(self.theta_hat)


@dataclass
class ExperimentReport:
    """Per-replicate estimates with boundary-exclusion aggregates."""

    param_names: list[str]
    true_values: dict[str, float]
    records: list[ReplicateRecord]
    excluded_count: int
    mean: dict[str, float]
    rmse: dict[str, float]
    simulate_seconds: float
    estimate_seconds: float

    def to_json_dict(self) -> dict:
        return {
            "param_names": list(self.param_names),
            "true_values": {k: float(v) for k, v in self.true_values.items()},
            "excluded_count": int(self.excluded_count),
            "mean": {k: float(v) for k, v in self.mean.items()},
            "rmse": {k: float(v) for k, v in self.rmse.items()},
            "replicates": [
                {
                    "index": r.index,
                    "seed": r.seed,
                    "phi_hat": r.phi_hat,
                    "sigma_hat": r.sigma_hat,
                    "theta_hat": list(r.theta_hat),
                    "boundary_hit": list(r.boundary_hit),
                    "phi_clamped": r.phi_clamped,
                    "converged": r.converged,
                    "iterations": r.iterations,
                    "excluded": r.excluded,
                }
                for r in self.records
            ],
        }

    def csv_header(self) -> list[str]:
        return (
            ["replicate", "seed", "phi_hat", "sigma_hat"]
            + [f"{name}_hat" for name in self.param_names[1:]]
            + ["boundary_hit", "phi_clamped", "converged", "iterations", "excluded"]
        )

    def csv_rows(self) -> list[list]:
        rows = []
        for r in self.records:
            rows.append(
                [r.index, r.seed, r.phi_hat, r.sigma_hat]
                + list(r.theta_hat)
                + [int(any(r.boundary_hit)), int(r.phi_clamped), int(r.converged), r.iterations, int(r.excluded)]
            )
        return rows


def _run_replicate(cfg: ExperimentConfig, index: int) -> ReplicateRecord:
    seed = replicate_seed(cfg.seed, index)
    t0 = time.perf_counter()
    lattice = make_perturbed_lattice(cfg.N, cfg.d, cfg.delta, seed)
    aniso0 = cfg.form.at(np.asarray(cfg.theta0))
    sample = simulate_field(lattice, cfg.family, aniso0, cfg.phi0, cfg.p, seed)
    t1 = time.perf_counter()
    result = estimate(sample, cfg.family, cfg.form, cfg.resolved_space(), cfg.optimizer)
    t2 = time.perf_counter()
    return ReplicateRecord(
        index=index,
        seed=seed,
        phi_hat=float(result.phi_hat),
        sigma_hat=float(math.sqrt(result.phi_hat)),
        theta_hat=tuple(float(t) for t in result.theta_hat),
        boundary_hit=tuple(bool(b) for b in result.boundary_hit),
        phi_clamped=bool(result.phi_clamped),
        converged=bool(result.converged),
        iterations=int(result.outcome.iterations),
        simulate_seconds=t1 - t0,
        estimate_seconds=t2 - t1,
    )


def run_replicated(cfg: ExperimentConfig, workers: int = 1, progress=None) -> ExperimentReport:
    """Run the full study; deterministic given the config, for any workers."""
    indices = list(range(cfg.replicates))
    results: dict[int, ReplicateRecord] = {}
    if workers > 1 and cfg.replicates > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_replicate, cfg, i): i for i in indices}
            for future in as_completed(futures):
                record = future.result()
                results[record.index] = record
                if progress is not None:
                    progress(record)
    else:
        for i in indices:
            record = _run_replicate(cfg, i)
            results[record.index] = record
            if progress is not None:
                progress(record)

    records = [results[i] for i in indices]
    included = [r for r in records if not r.excluded]
    excluded_count = len(records) - len(included)
    if not included:
        raise RuntimeError("every replicate hit a parameter boundary; nothing to aggregate")

    names = cfg.param_names()
    truth = cfg.true_values()
    table = np.array([r.values() for r in included])
    mean = {name: float(np.mean(table[:, j])) for j, name in enumerate(names)}
    rmse = {
        name: float(np.sqrt(np.mean((table[:, j] - truth[name]) ** 2))) for j, name in enumerate(names)
    }
    return ExperimentReport(
        param_names=names,
        true_values=truth,
        records=records,
        excluded_count=excluded_count,
        mean=mean,
        rmse=rmse,
        simulate_seconds=sum(r.simulate_seconds for r in records),
        estimate_seconds=sum(r.estimate_seconds for r in records),
    )


@dataclass
class RateStudyReport:
    """RMSE versus sample size, with the fitted log-log rate slope."""

    points: list[dict]
    slope: float
    reports: list[ExperimentReport] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"points": self.points, "slope": float(self.slope)}


def rate_study(cfg_base: ExperimentConfig, N_list, T: int, workers: int = 1, progress=None) -> RateStudyReport:
    """Replicated studies over growing grids; fits log RMSE against
    log sqrt(ln n / n) and reports the slope."""
    N_list = [int(N) for N in N_list]
    if len(N_list) < 3:
        raise ValueError("need at least three grid sides")
    if sorted(N_list) != N_list:
        raise ValueError("grid sides must be increasing")

    points = []
    reports = []
    for N in N_list:
        cfg = replace(cfg_base, N=N, replicates=T)
        report = run_replicated(cfg, workers=workers, progress=progress)
        reports.append(report)
        n = N**cfg.d
        included = [r for r in report.records if not r.excluded]
        theta0 = np.asarray(cfg.theta0)
        theta_err = np.array([np.linalg.norm(np.asarray(r.theta_hat) - theta0) for r in included])
        phi_err = np.array([r.phi_hat / cfg.phi0 - 1.0 for r in included])
        points.append(
            {
                "N": N,
                "n": n,
                "rmse_theta": float(np.sqrt(np.mean(theta_err**2))),
                "rmse_phi_ratio": float(np.sqrt(np.mean(phi_err**2))),
                "excluded": report.excluded_count,
            }
        )

    xs = np.array([math.log(math.sqrt(math.log(pt["n"]) / pt["n"])) for pt in points])
    ys = np.array([math.log(pt["rmse_theta"]) for pt in points])
    slope = float(np.polyfit(xs, ys, 1)[0])
    return RateStudyReport(points=points, slope=slope, reports=reports)


@dataclass
class NormalityReport:
    """Moment and KS statistics of standardized sqrt(n) (theta_hat - theta0)."""

    per_param: dict[str, dict]
    standardized: dict[str, list[float]]
    report: ExperimentReport

    def to_json_dict(self) -> dict:
        return {
            "per_param": self.per_param,
            "standardized": {k: [float(v) for v in vals] for k, vals in self.standardized.items()},
        }


def standardized_stats(raw) -> tuple[np.ndarray, dict]:
    """Standardize a sample by its own mean/SD and test it against Normal(0,1).

    Returns the standardized values and a dict of skewness, excess kurtosis,
    and the Kolmogorov-Smirnov statistic/p-value.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.size < 3:
        raise ValueError("need at least three values to standardize")
    z = (raw - raw.mean()) / raw.std(ddof=1)
    ks = _stats.kstest(z, "norm")
    summary = {
        "count": int(z.size),
        "skewness": float(_stats.skew(z)),
        "excess_kurtosis": float(_stats.kurtosis(z)),
        "ks_stat": float(ks.statistic),
        "ks_pvalue": float(ks.pvalue),
    }
    return z, summary


def normality_study(cfg: ExperimentConfig, workers: int = 1, progress=None) -> NormalityReport:
    """Standardize the estimates over replicates and test their normality."""
    if cfg.replicates < 200:
        raise ValueError("normality study needs at least 200 replicates")
    report = run_replicated(cfg, workers=workers, progress=progress)
    included = [r for r in report.records if not r.excluded]
    n = cfg.N**cfg.d
    root_n = math.sqrt(n)

    per_param: dict[str, dict] = {}
    standardized: dict[str, list[float]] = {}
    names = cfg.form.param_names()
    for j, name in enumerate(names):
        raw = np.array([root_n * (r.theta_hat[j] - cfg.theta0[j]) for r in included])
        z, summary = standardized_stats(raw)
        per_param[name] = summary
        standardized[name] = [float(v) for v in z]
    return NormalityReport(per_param=per_param, standardized=standardized, report=report)


def quadratic_clt_check(n_list, matrix_family_seed: int, R: int) -> list[dict]:
    """Standardized Gaussian quadratic forms against their limiting law.

    For each n, draws one random symmetric matrix A (whose operator-to-
    Frobenius norm ratio vanishes as n grows), then R standardized samples
    psi = (Z'AZ - tr A) / ||A||_F.  The limiting law is Normal(0, 2); the
    variance equals 2 exactly for every n by the Gaussian moment identity.
    """
    if R < 2:
        raise ValueError("R must be >= 2")
    out = []
    for n in [int(v) for v in n_list]:
        gen = _rng.stream(int(matrix_family_seed), "generic", n)
        m_raw = gen.standard_normal((n, n))
        a = 0.5 * (m_raw + m_raw.T)
        trace = float(np.trace(a))
        frob = float(np.sqrt(np.sum(a * a)))
        eigs = np.linalg.eigvalsh(a)
        z = gen.standard_normal((R, n))
        quad = np.einsum("ri,ri->r", z @ a, z)
        psi = (quad - trace) / frob
        ks = _stats.kstest(psi, "norm", args=(0.0, math.sqrt(2.0)))
        out.append(
            {
                "n": n,
                "R": int(R),
                "variance": float(np.var(psi, ddof=1)),
                "skewness": float(_stats.skew(psi)),
                "ks_stat": float(ks.statistic),
                "ks_pvalue": float(ks.pvalue),
                "op_to_frob": float(max(abs(eigs[0]), abs(eigs[-1])) / frob),
            }
        )
    return out
