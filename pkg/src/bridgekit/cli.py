"""Reproducible experiment runner.

Subcommands: ``run`` (execute a named experiment, emit CSV/JSON artifacts
plus a manifest with content hashes), ``verify`` (re-hash a run directory
and recheck cheap invariants), ``list`` (enumerate experiments).

All randomness flows from the single run seed through named sub-streams;
outputs are byte-stable given (config, seed, version).
"""

import os

# Thread cap must land in the environment before numpy pulls in BLAS.
_threads = os.environ.get("BRIDGEKIT_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from ._rng import named_stream

__all__ = ["main"]


# ---------------------------------------------------------------------------
# Experiment registry
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                             else v for v in row])


def _run_sinkhorn(params: dict, seed: int, out: Path) -> list:
    from .entropic_ot import (CostMatrix, DiscreteMeasure, SinkhornConfig,
                              coupling_to_csv, report_to_json, sinkhorn_solve)
    a = DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    cost = CostMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    cfg = SinkhornConfig(epsilon=params["epsilon"],
                         max_iters=params["max_iters"])
    coupling, pots, report = sinkhorn_solve(a, a, cost, cfg)
    coupling_to_csv(coupling, out / "coupling.csv")
    report_to_json(report, out / "report.json")
    _write_csv(out / "trace.csv", ["iteration", "dual_objective", "marginal_error"],
               [(k, d, m) for k, (d, m) in
                enumerate(zip(report.dual_objective_trace,
                              report.marginal_error_trace))])
    return ["coupling.csv", "report.json", "trace.csv"]


def _run_gaussian_bridge(params: dict, seed: int, out: Path) -> list:
    from .gaussian_bridge import (GaussianMarginal, LinearReferenceSde,
                                  bridge_drift, bridge_moments,
                                  compute_schedule, make_bridge_path)
    T = params["T"]
    ref = LinearReferenceSde(lambda t: params["c"], None,
                             lambda t: params["sigma"], T)
    sched = compute_schedule(ref)
    p0 = GaussianMarginal(np.array([params["mu0"]]),
                          np.array([[params["var0"]]]))
    pT = GaussianMarginal(np.array([params["muT"]]),
                          np.array([[params["varT"]]]))
    path = make_bridge_path(sched, p0, pT)
    ts = np.linspace(0.0, T, params["n_times"])
    rows = []
    for t in ts:
        m, S = bridge_moments(sched, p0.mean, p0.cov, pT.mean, pT.cov, float(t))
        rows.append((t, m[0], S[0, 0]))
    _write_csv(out / "moments.csv", ["t", "mean", "var"], rows)
    xs = np.linspace(params["x_min"], params["x_max"], params["n_x"])
    rows = []
    for t in ts[:-1]:
        d = bridge_drift(path, xs[:, None], float(t))
        rows.extend((t, x, di) for x, di in zip(xs, d[:, 0]))
    _write_csv(out / "drift_field.csv", ["t", "x", "drift"], rows)
    return ["moments.csv", "drift_field.csv"]


def _run_bridge_mixture(params: dict, seed: int, out: Path) -> list:
    from .entropic_ot import GaussianCoupling
    from .path_sim import (EndpointSampler, histogram_to_csv,
                           sample_bridge_mixture)
    T, sigma = params["T"], params["sigma"]
    rng_seed = int(named_stream(seed, "bridge-mixture").integers(2 ** 62))
    mean = np.array([params["mu0"], params["muT"]])
    cov = np.array([[params["var0"], params["cov"]],
                    [params["cov"], params["varT"]]])
    sampler = EndpointSampler.from_gaussian_joint(
        GaussianCoupling(mean, cov, cov[:1, 1:]))
    files = []
    for t in params["times"]:
        xs = sample_bridge_mixture(sampler, float(t), sigma,
                                   params["n_samples"], rng_seed, T)
        name = f"histogram_t{t}.csv"
        histogram_to_csv(xs, params["n_bins"], out / name)
        files.append(name)
    return files


def _run_soc_grid(params: dict, seed: int, out: Path) -> list:
    from .soc import (SocProblem, SpaceTimeGrid, control_from_value,
                      hjb_solve_grid, value_grid_to_csv)
    T = params["T"]
    problem = SocProblem(None, lambda t: params["sigma"], None,
                         lambda x: 0.5 * np.sum(x ** 2, axis=-1), T, None)
    grid = SpaceTimeGrid(np.linspace(0.0, T, params["n_t"]),
                         np.linspace(params["x_min"], params["x_max"],
                                     params["n_x"]))
    value = hjb_solve_grid(problem, grid)
    value_grid_to_csv(value, out / "value_grid.csv")
    u = control_from_value(value, problem.sigma_of_t)
    rows = []
    for kt in range(0, params["n_t"] - 1, max(1, params["n_t"] // 8)):
        t = grid.ts[kt]
        exact = -grid.xs / (2.0 - t)
        approx = np.asarray(u(grid.xs, float(t))).reshape(-1)
        rows.append((t, float(np.sqrt(np.mean((approx - exact) ** 2)))))
    _write_csv(out / "control_rmse.csv", ["t", "rmse"], rows)
    return ["value_grid.csv", "control_rmse.csv"]


def _run_imf(params: dict, seed: int, out: Path) -> list:
    from .imf import (ImfConfig, drift_model_to_json, imf_run, report_to_csv)
    sigma, T = params["sigma"], params["T"]
    cfg = ImfConfig(sigma=sigma, T=T, n_samples=params["n_samples"],
                    ridge=params["ridge"])
    m0, s0 = params["mu0"], params["var0"] ** 0.5
    mT, sT = params["muT"], params["varT"] ** 0.5
    state, report = imf_run(
        lambda rng, n: rng.normal(m0, s0, size=(n, 1)),
        lambda rng, n: rng.normal(mT, sT, size=(n, 1)),
        sigma, T, params["n_iters"], cfg, seed)
    report_to_csv(report, out / "report.csv")
    drift_model_to_json(state.forward_model, out / "forward_model.json")
    drift_model_to_json(state.reverse_model, out / "reverse_model.json")
    return ["report.csv", "forward_model.json", "reverse_model.json"]


def _run_discrete_sb(params: dict, seed: int, out: Path) -> list:
    from .discrete_sb import (DiscreteLaw, RateMatrix, ddsbm_report_to_csv,
                              ddsbm_run, discrete_sb_exact, rates_to_json)
    rng = named_stream(seed, "discrete-sb")
    n = params["n_states"]
    Q0 = RateMatrix.from_rates(rng.uniform(0.5, 1.5, size=(n, n)))
    pi0 = DiscreteLaw((lambda v: v / v.sum())(rng.uniform(0.2, 1.0, n)))
    piT = DiscreteLaw((lambda v: v / v.sum())(rng.uniform(0.2, 1.0, n)))
    T = params["T"]
    sol = discrete_sb_exact(Q0, pi0, piT, T)
    _write_csv(out / "coupling.csv", [f"xT={j}" for j in range(n)],
               [tuple(row) for row in sol.coupling])
    rates_to_json(Q0, out / "rates.json")
    report = ddsbm_run(Q0, pi0, piT, T, params["n_iters"], "exact",
                       seed=seed, n_steps=params["n_steps"])
    ddsbm_report_to_csv(report, out / "ddsbm.csv")
    return ["coupling.csv", "rates.json", "ddsbm.csv"]


_EXPERIMENTS = {
    "sinkhorn": (_run_sinkhorn, "2x2 analytic Sinkhorn: coupling and traces",
                 {"epsilon": 1.0, "max_iters": 1000}),
    "gaussian-bridge": (_run_gaussian_bridge,
                        "1-D Gaussian bridge moments and drift field",
                        {"T": 1.0, "c": 0.0, "sigma": 1.0, "mu0": -1.0,
                         "var0": 0.25, "muT": 1.5, "varT": 1.0,
                         "n_times": 21, "n_x": 41, "x_min": -4.0,
                         "x_max": 4.0}),
    "bridge-mixture": (_run_bridge_mixture,
                       "Brownian bridge-mixture marginal histograms",
                       {"T": 1.0, "sigma": 1.0, "mu0": -1.0, "var0": 0.25,
                        "muT": 1.5, "varT": 1.0, "cov": 0.2,
                        "times": [0.25, 0.5, 0.75], "n_samples": 20_000,
                        "n_bins": 64}),
    "soc-grid": (_run_soc_grid, "Quadratic-terminal HJB value grid + control",
                 {"T": 1.0, "sigma": 1.0, "n_t": 101, "n_x": 101,
                  "x_min": -3.0, "x_max": 3.0}),
    "imf": (_run_imf, "Gaussian-to-Gaussian iterative Markovian fitting",
            {"T": 1.0, "sigma": 1.0, "mu0": -1.0, "var0": 0.25, "muT": 1.5,
             "varT": 1.0, "n_samples": 4000, "n_iters": 3, "ridge": 1.0}),
    "discrete-sb": (_run_discrete_sb, "Random-instance exact SB and DDSBM",
                    {"n_states": 5, "T": 1.0, "n_iters": 5, "n_steps": 100}),
}


# ---------------------------------------------------------------------------
# Config handling and the manifest
# ---------------------------------------------------------------------------

def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise click.UsageError(f"--set needs key=value, got {text!r}")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key, parsed


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_config(config_path):
    if config_path is None:
        return {}
    with open(config_path, "rb") as fh:
        return tomllib.load(fh)


def _resolve_params(name: str, config: dict, overrides) -> dict:
    defaults = dict(_EXPERIMENTS[name][2])
    for source in (config.get(name, {}), dict(overrides)):
        for key, value in source.items():
            if key not in defaults:
                raise click.UsageError(
                    f"unknown parameter {key!r} for experiment {name!r}")
            defaults[key] = value
    return defaults


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@click.group()
def main():
    """Desk-scale Schrödinger-bridge experiment runner."""


@main.command()
@click.argument("experiment")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="TOML config; section per experiment.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default="runs",
              show_default=True)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config parameter (repeatable).")
def run(experiment, config_path, seed, out_dir, overrides):
    """Execute one named experiment and write artifacts plus a manifest."""
    if experiment not in _EXPERIMENTS:
        raise click.UsageError(
            f"unknown experiment {experiment!r}; see `bridgekit list`")
    params = _resolve_params(experiment, _load_config(config_path),
                             [_parse_override(o) for o in overrides])
    out = Path(out_dir) / experiment
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        files = _EXPERIMENTS[experiment][0](params, seed, out)
    except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        for leftover in out.iterdir():
            leftover.unlink()
        click.echo(f"numerical fault in {experiment}: {exc}", err=True)
        sys.exit(1)
    manifest = {
        "experiment": experiment,
        "config": params,
        "seed": seed,
        "version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
        "files": [{"name": f, "sha256": _sha256(out / f)} for f in files],
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    click.echo(f"{experiment}: {len(files)} files -> {out}")


@main.command()
@click.argument("manifest_path", type=click.Path(exists=True))
def verify(manifest_path):
    """Re-hash the files of a finished run and recheck cheap invariants."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = manifest_path.parent
    failures = []
    for entry in manifest["files"]:
        target = base / entry["name"]
        if not target.exists():
            failures.append(f"missing: {entry['name']}")
            continue
        if _sha256(target) != entry["sha256"]:
            failures.append(f"hash mismatch: {entry['name']}")
            continue
        failures.extend(_cheap_invariants(target))
    if failures:
        for line in failures:
            click.echo(f"FAIL {line}", err=True)
        sys.exit(1)
    click.echo(f"PASS {len(manifest['files'])} files verified")


def _cheap_invariants(path: Path) -> list:
    """Structural checks on emitted artifacts, keyed by file name."""
    failures = []
    if path.name == "coupling.csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        try:
            float(rows[0][0])
            data = rows
        except ValueError:
            data = rows[1:]
        total = sum(float(v) for row in data for v in row)
        if abs(total - 1.0) > 1e-8:
            failures.append(f"{path.name}: weights sum to {total}")
    if path.name == "rates.json":
        from .discrete_sb import rates_from_json
        try:
            rates_from_json(path)
        except ValueError as exc:
            failures.append(f"{path.name}: {exc}")
    if path.name.startswith("histogram"):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        dens = np.array([float(r[-1]) for r in rows[1:]])
        if dens.min() < 0:
            failures.append(f"{path.name}: negative density")
    return failures


@main.command("list")
def list_experiments():
    """Enumerate experiments with one-line descriptions."""
    for name, (_, description, _) in _EXPERIMENTS.items():
        click.echo(f"{name:16s} {description}")


if __name__ == "__main__":
    main()
