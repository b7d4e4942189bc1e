"""Command-line front end.

Commands are driven by JSON config documents with a top-level ``command``
discriminator; unknown keys are rejected before any compute.  Every output
document embeds the resolved config (without scheduling knobs) and a
``format_version`` field; CSV outputs carry that envelope in a JSON sidecar.

Exit codes: 0 ok, 2 boundary hit, 3 no convergence, 4 input error,
5 precondition violation, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from invfree.estimation import PreconditionError, estimate, identifiability_margin, kl_bound_check, spectral_bounds, sweep_objective
from invfree.experiments import (
    ExperimentConfig,
    normality_study,
    quadratic_clt_check,
    rate_study,
    run_replicated,
)
from invfree.kernels import (
    Anisotropy,
    AnisotropyForm,
    KernelFamily,
    ParameterSpace,
    diagonal_ranges,
    full_matrix,
    isotropic,
)
from invfree.optimizer import OptimizationError, OptimizerConfig
from invfree.sampling import (
    SampleFormatError,
    _atomic_write_text,
    make_perturbed_lattice,
    read_sample,
    simulate_field,
    write_sample,
)

FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_BOUNDARY = 2
EXIT_NO_CONVERGENCE = 3
EXIT_INPUT = 4
EXIT_PRECONDITION = 5
EXIT_USAGE = 64
EXIT_DIAGNOSTIC = 1


class ConfigError(ValueError):
    """A config document violated its schema."""


def _check_keys(doc: dict, path: str, required: dict, optional: dict) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(doc) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(doc)
    if missing:
        raise ConfigError(f"{path}: missing keys {sorted(missing)}")
    for key, expected in {**required, **optional}.items():
        if key not in doc:
            continue
        value = doc[key]
        if expected is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif expected is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok = isinstance(value, expected)
        if not ok:
            raise ConfigError(f"{path}.{key}: expected {getattr(expected, '__name__', expected)}, got {value!r}")


def _load_config(path: str, command: str) -> dict:
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(doc, dict) or doc.get("command") != command:
        raise ConfigError(f"{path}: config must set \"command\": \"{command}\"")
    return doc


def _parse_family(doc: dict, dim: int, path: str) -> KernelFamily:
    _check_keys(doc, path, {"kind": str, "nu": float}, {})
    try:
        if doc["kind"] == "rational_quadratic":
            return KernelFamily(doc["kind"], float(doc["nu"]), dim)
        return KernelFamily(doc["kind"], float(doc["nu"]))
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from None


def _parse_anisotropy(doc: dict, path: str) -> Anisotropy:
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError(f"{path}: expected an object with a \"kind\" key")
    kind = doc["kind"]
    try:
        if kind == "isotropic":
            _check_keys(doc, path, {"kind": str, "theta": float}, {})
            return isotropic(doc["theta"])
        if kind == "diagonal_ranges":
            _check_keys(doc, path, {"kind": str, "theta": float, "rho": float}, {})
            return diagonal_ranges(doc["theta"], doc["rho"])
        if kind == "full_matrix":
            _check_keys(doc, path, {"kind": str, "matrix": list}, {})
            return full_matrix(np.asarray(doc["matrix"], dtype=float))
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{path}: {err}") from None
    raise ConfigError(f"{path}.kind: unknown anisotropy {kind!r}")


def _parse_form(doc: dict, dim: int, path: str) -> AnisotropyForm:
    _check_keys(doc, path, {"kind": str}, {})
    try:
        return AnisotropyForm(doc["kind"], dim)
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from None


def _parse_optimizer(doc: dict, path: str) -> OptimizerConfig:
    _check_keys(
        doc,
        path,
        {},
        {"rel_tol": float, "max_iter": int, "fd_step": float, "initial_guess": list, "multi_start": int},
    )
    kwargs = dict(doc)
    if "initial_guess" in kwargs:
        kwargs["initial_guess"] = tuple(float(v) for v in kwargs["initial_guess"])
    try:
        return OptimizerConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from None


def _parse_space(doc: dict, n_params: int, path: str) -> ParameterSpace:
    default = ParameterSpace.default(n_params)
    theta_box = doc.get("theta_box")
    phi_interval = doc.get("phi_interval")
    try:
        box = (
            tuple((float(a), float(b)) for a, b in theta_box)
            if theta_box is not None
            else default.theta_box
        )
        interval = (
            (float(phi_interval[0]), float(phi_interval[1]))
            if phi_interval is not None
            else default.phi_interval
        )
        if len(box) != n_params:
            raise ValueError(f"theta_box needs {n_params} coordinate ranges, got {len(box)}")
        return ParameterSpace(theta_box=box, phi_interval=interval)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from None


def _resolved(config: dict) -> dict:
    """The config as echoed into outputs: scheduling knobs stripped."""
    doc = {k: v for k, v in config.items() if k != "workers"}
    return doc


def _json_dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _sidecar_path(out_path: str) -> str:
    stem, _ = os.path.splitext(out_path)
    return stem + ".json"


def _write_curve_csv(path: str, names: list[str], rows) -> None:
    lines = [",".join(names + ["g_over_sqrt_n"])]
    for row in rows:
        lines.append(",".join(f"{v:.17g}" for v in row))
    _atomic_write_text(path, "\n".join(lines) + "\n")


# -- commands -------------------------------------------------------------------


def cmd_simulate(config_path: str, out_path: str, workers: int) -> int:
    config = _load_config(config_path, "simulate")
    _check_keys(
        config,
        config_path,
        {
            "command": str,
            "N": int,
            "d": int,
            "delta": float,
            "seed": int,
            "p": int,
            "phi": float,
            "family": dict,
            "anisotropy": dict,
        },
        {"workers": int},
    )
    family = _parse_family(config["family"], config["d"], f"{config_path}.family")
    aniso = _parse_anisotropy(config["anisotropy"], f"{config_path}.anisotropy")
    try:
        sites = make_perturbed_lattice(config["N"], config["d"], config["delta"], config["seed"])
        sample = simulate_field(sites, family, aniso, config["phi"], config["p"], config["seed"], workers=workers)
    except ValueError as err:
        raise ConfigError(f"{config_path}: {err}") from None
    extra = {"format_version": FORMAT_VERSION, "config": _resolved(config)}
    write_sample(sample, out_path, provenance_path=_sidecar_path(out_path), extra=extra)
    print(f"wrote {out_path} and {_sidecar_path(out_path)}", file=sys.stderr)
    return EXIT_OK


def cmd_estimate(sample_path: str, config_path: str, workers: int) -> int:
    config = _load_config(config_path, "estimate")
    _check_keys(
        config,
        config_path,
        {"command": str, "family": dict, "anisotropy_form": dict},
        {"theta_box": list, "phi_interval": list, "optimizer": dict, "workers": int},
    )
    sidecar = _sidecar_path(sample_path)
    sample = read_sample(sample_path, sidecar if os.path.exists(sidecar) else None)
    dim = sample.sites.d
    family = _parse_family(config["family"], dim, f"{config_path}.family")
    form = _parse_form(config["anisotropy_form"], dim, f"{config_path}.anisotropy_form")
    space = _parse_space(config, form.n_params, config_path)
    cfg = _parse_optimizer(config.get("optimizer", {}), f"{config_path}.optimizer")

    result = estimate(sample, family, form, space, cfg, workers=workers)
    doc = {"format_version": FORMAT_VERSION, "config": _resolved(config)}
    doc.update(result.to_json_dict())
    sys.stdout.write(_json_dumps(doc))
    if not result.converged:
        return EXIT_NO_CONVERGENCE
    if result.any_boundary():
        return EXIT_BOUNDARY
    return EXIT_OK


def cmd_sweep(sample_path: str, config_path: str, out_path: str, workers: int) -> int:
    config = _load_config(config_path, "sweep")
    _check_keys(
        config,
        config_path,
        {"command": str, "family": dict, "anisotropy_form": dict, "grid": list},
        {"workers": int},
    )
    sidecar = _sidecar_path(sample_path)
    sample = read_sample(sample_path, sidecar if os.path.exists(sidecar) else None)
    dim = sample.sites.d
    family = _parse_family(config["family"], dim, f"{config_path}.family")
    form = _parse_form(config["anisotropy_form"], dim, f"{config_path}.anisotropy_form")

    axes = []
    for j, spec in enumerate(config["grid"]):
        _check_keys(spec, f"{config_path}.grid[{j}]", {"lo": float, "hi": float, "count": int}, {})
        if spec["count"] < 1 or spec["hi"] < spec["lo"]:
            raise ConfigError(f"{config_path}.grid[{j}]: need lo <= hi and count >= 1")
        axes.append(np.linspace(spec["lo"], spec["hi"], spec["count"]))
    if len(axes) != form.n_params:
        raise ConfigError(f"{config_path}.grid: needs {form.n_params} dimensions, got {len(axes)}")
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([m.reshape(-1) for m in mesh], axis=1)

    curve = sweep_objective(sample, family, form, grid, workers=workers)
    names = [f"theta_{j + 1}" for j in range(form.n_params)]
    _write_curve_csv(out_path, names, curve)
    envelope = {"format_version": FORMAT_VERSION, "config": _resolved(config)}
    _atomic_write_text(_sidecar_path(out_path), _json_dumps(envelope))
    print(f"wrote {out_path}", file=sys.stderr)
    return EXIT_OK


_EXPERIMENT_BASE_KEYS = {
    "command": str,
    "study": str,
    "family": dict,
    "anisotropy_form": dict,
    "phi0": float,
    "theta0": list,
    "N": int,
    "d": int,
    "delta": float,
    "p": int,
    "replicates": int,
    "seed": int,
}


def _experiment_config(config: dict, path: str) -> ExperimentConfig:
    dim = config["d"]
    family = _parse_family(config["family"], dim, f"{path}.family")
    form = _parse_form(config["anisotropy_form"], dim, f"{path}.anisotropy_form")
    space = _parse_space(config, form.n_params, path)
    optimizer = _parse_optimizer(config.get("optimizer", {}), f"{path}.optimizer")
    try:
        return ExperimentConfig(
            family=family,
            form=form,
            phi0=float(config["phi0"]),
            theta0=tuple(float(t) for t in config["theta0"]),
            N=config["N"],
            d=dim,
            delta=float(config["delta"]),
            p=config["p"],
            replicates=config["replicates"],
            seed=config["seed"],
            space=space,
            optimizer=optimizer,
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from None


def _progress_line(record) -> None:
    print(
        f"replicate {record.index}: theta_hat={list(record.theta_hat)} "
        f"sigma_hat={record.sigma_hat:.4f} excluded={record.excluded}",
        file=sys.stderr,
    )


def _write_report_csv(path: str, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        cells = [f"{v:.17g}" if isinstance(v, float) else str(v) for v in row]
        lines.append(",".join(cells))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def cmd_experiment(config_path: str, out_base: str, workers: int) -> int:
    config = _load_config(config_path, "experiment")
    study = config.get("study")
    envelope = {"format_version": FORMAT_VERSION, "config": _resolved(config)}
    json_path = out_base + ".json"
    csv_path = out_base + ".csv"

    if study == "quadratic_clt":
        _check_keys(
            config,
            config_path,
            {"command": str, "study": str, "n_list": list, "R": int, "seed": int},
            {"workers": int},
        )
        results = quadratic_clt_check(config["n_list"], config["seed"], config["R"])
        envelope["results"] = results
        _atomic_write_text(json_path, _json_dumps(envelope))
        header = ["n", "R", "variance", "skewness", "ks_stat", "ks_pvalue", "op_to_frob"]
        rows = [[r[k] for k in header] for r in results]
        _write_report_csv(csv_path, header, rows)
        print(f"wrote {json_path} and {csv_path}", file=sys.stderr)
        return EXIT_OK

    if study == "replicated" or study == "normality":
        _check_keys(
            config,
            config_path,
            _EXPERIMENT_BASE_KEYS,
            {"theta_box": list, "phi_interval": list, "optimizer": dict, "workers": int},
        )
        cfg = _experiment_config(config, config_path)
        if study == "replicated":
            report = run_replicated(cfg, workers=workers, progress=_progress_line)
            envelope["report"] = report.to_json_dict()
        else:
            try:
                study_report = normality_study(cfg, workers=workers, progress=_progress_line)
            except ValueError as err:
                raise ConfigError(f"{config_path}: {err}") from None
            report = study_report.report
            envelope["report"] = report.to_json_dict()
            envelope["normality"] = study_report.to_json_dict()
        _atomic_write_text(json_path, _json_dumps(envelope))
        _write_report_csv(csv_path, report.csv_header(), report.csv_rows())
        print(f"wrote {json_path} and {csv_path}", file=sys.stderr)
        return EXIT_OK

    if study == "rate":
        _check_keys(
            config,
            config_path,
            {**_EXPERIMENT_BASE_KEYS, "N_list": list},
            {"theta_box": list, "phi_interval": list, "optimizer": dict, "workers": int},
        )
        cfg = _experiment_config(config, config_path)
        try:
            result = rate_study(cfg, config["N_list"], config["replicates"], workers=workers, progress=_progress_line)
        except ValueError as err:
            raise ConfigError(f"{config_path}: {err}") from None
        envelope["rate"] = result.to_json_dict()
        _atomic_write_text(json_path, _json_dumps(envelope))
        header = ["N", "n", "rmse_theta", "rmse_phi_ratio", "excluded"]
        rows = [[pt[k] for k in header] for pt in result.points]
        _write_report_csv(csv_path, header, rows)
        print(f"wrote {json_path} and {csv_path}", file=sys.stderr)
        return EXIT_OK

    raise ConfigError(f"{config_path}.study: unknown study {study!r}")


def cmd_check(config_path: str, workers: int) -> int:
    config = _load_config(config_path, "check")
    _check_keys(
        config,
        config_path,
        {
            "command": str,
            "N": int,
            "d": int,
            "delta": float,
            "seed": int,
            "family": dict,
            "anisotropy_form": dict,
            "theta_grid": list,
            "r1": float,
        },
        {"kl_pairs": int, "max_n": int, "workers": int},
    )
    dim = config["d"]
    family = _parse_family(config["family"], dim, f"{config_path}.family")
    form = _parse_form(config["anisotropy_form"], dim, f"{config_path}.anisotropy_form")
    grid = [np.asarray(t, dtype=float).reshape(-1) for t in config["theta_grid"]]
    max_n = config.get("max_n", 2000)

    sites = make_perturbed_lattice(config["N"], dim, config["delta"], config["seed"])
    if sites.n > max_n:
        raise PreconditionError(f"n = {sites.n} exceeds the dense-oracle cap {max_n}")

    margin = identifiability_margin(sites, family, form, grid, config["r1"])
    bounds = spectral_bounds(sites, family, form, grid, max_n=max_n)

    kl_results = []
    n_pairs = config.get("kl_pairs", 0)
    if n_pairs > 0:
        from invfree import rng as _rng

        gen = _rng.stream(config["seed"], "generic")
        lo = np.min(np.array(grid), axis=0)
        hi = np.max(np.array(grid), axis=0)
        radius = bounds.lambda_min_est / (2.0 * bounds.lipschitz_est) if bounds.lipschitz_est > 0 else 1.0
        m = form.n_params
        for _ in range(n_pairs):
            t1 = gen.uniform(lo, hi)
            step = gen.uniform(-1.0, 1.0, size=m)
            step *= 0.9 * radius / max(np.linalg.norm(step), 1e-12) * gen.random()
            t2 = np.clip(t1 + step, lo, hi)
            kl, bound = kl_bound_check(sites, family, form, t1, t2, max_n=max_n)
            kl_results.append(
                {
                    "theta_1": [float(v) for v in t1],
                    "theta_2": [float(v) for v in t2],
                    "kl": kl,
                    "bound": bound,
                    "ok": bool(kl <= bound),
                }
            )

    doc = {
        "format_version": FORMAT_VERSION,
        "config": _resolved(config),
        "identifiability": {
            "margin": margin.margin,
            "radius": margin.radius,
            "worst_pair": [list(margin.worst_pair[0]), list(margin.worst_pair[1])],
            "grid_size": margin.grid_size,
        },
        "spectral": {
            "lambda_min_est": bounds.lambda_min_est,
            "lambda_max_est": bounds.lambda_max_est,
            "lipschitz_est": bounds.lipschitz_est,
        },
        "kl_checks": kl_results,
    }
    sys.stdout.write(_json_dumps(doc))
    healthy = margin.margin > 0.0 and bounds.lambda_min_est > 0.0 and all(r["ok"] for r in kl_results)
    return EXIT_OK if healthy else EXIT_DIAGNOSTIC


# -- entry point ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="invfree", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_sim = sub.add_parser("simulate", help="simulate a field sample to CSV + provenance JSON")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p_est = sub.add_parser("estimate", help="estimate (phi, theta) from a sample CSV")
    p_est.add_argument("--sample", required=True)
    p_est.add_argument("--config", required=True)
    p_est.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p_sweep = sub.add_parser("sweep", help="evaluate the profile objective along a grid")
    p_sweep.add_argument("--sample", required=True)
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p_exp = sub.add_parser("experiment", help="run a replicated study (report JSON + CSV)")
    p_exp.add_argument("--config", required=True)
    p_exp.add_argument("--out", required=True, help="output base path; writes <out>.json and <out>.csv")
    p_exp.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p_check = sub.add_parser("check", help="run small-n theory diagnostics")
    p_check.add_argument("--config", required=True)
    p_check.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_err:
        return int(exit_err.code or 0)

    try:
        if args.cmd == "simulate":
            return cmd_simulate(args.config, args.out, args.workers)
        if args.cmd == "estimate":
            return cmd_estimate(args.sample, args.config, args.workers)
        if args.cmd == "sweep":
            return cmd_sweep(args.sample, args.config, args.out, args.workers)
        if args.cmd == "experiment":
            return cmd_experiment(args.config, args.out, args.workers)
        if args.cmd == "check":
            return cmd_check(args.config, args.workers)
    except (ConfigError, SampleFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except PreconditionError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_PRECONDITION
    except OptimizationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
