"""Command-line surface: estimate, diagnose, frontier, target-prte,
prd-check, simulate.

Reports are JSON (with a top-level spec_version) plus CSV grids, and the
report path also receives rendered figures.  Exit codes: 2 for schema or
configuration problems, 3 for relevance/degeneracy, 4 for numerical failure.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import compliance, figures, gmm, mte, rt, sim
from .data import center, load_dataset, validate
from .errors import IvrtError, NumericalError, RelevanceError, SchemaError
from .moments import gamma_wald, summarize

SPEC_VERSION = "1"


def _exit_code(exc: IvrtError) -> int:
    if isinstance(exc, SchemaError):
        return 2
    if isinstance(exc, RelevanceError):
        return 3
    if isinstance(exc, NumericalError):
        return 4
    return 1


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except IvrtError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code(exc))
    return wrapper


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not np.isfinite(v) else v
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    return obj


def _write_report(out_dir: Path, name: str, payload: dict) -> Path:
    payload = {"spec_version": SPEC_VERSION, **_jsonify(payload)}
    path = out_dir / name
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _load(input_path, y_col, d_col, z_cols, cluster, cell, group, drop_missing):
    schema = {
        "y": y_col, "d": d_col, "z": [c.strip() for c in z_cols.split(",")],
        "cluster": cluster, "cell": cell, "group": group,
    }
    return load_dataset(input_path, schema, drop_missing=drop_missing)


def _weights(ms, weights: str, weights_file: str | None):
    if weights_file:
        vec = np.loadtxt(weights_file, ndmin=1)
        if abs(vec.sum() - 1.0) > 1e-10 or (vec < -1e-12).any():
            raise SchemaError("custom weights must lie on the simplex")
        if vec.size != ms.L:
            raise SchemaError("custom weight length must match instrument count")
        return vec, "custom"
    if weights == "ew":
        return rt.ew_weights(ms.L), "ew"
    if weights == "csw":
        return rt.csw_weights(ms), "csw"
    raise SchemaError(f"unknown weight source {weights!r}")


dataset_options = [
    click.option("--input", "input_path", required=True, type=click.Path(exists=True)),
    click.option("--y-col", default="y", show_default=True),
    click.option("--d-col", default="d", show_default=True),
    click.option("--z-cols", required=True, help="comma-separated instrument columns"),
    click.option("--cluster", default=None, help="cluster label column"),
    click.option("--cell", default=None, help="covariate cell column"),
    click.option("--group", default=None, help="fixed-effect group column"),
    click.option("--drop-missing", is_flag=True, default=False),
    click.option("--out", "out_dir", default=".", type=click.Path(file_okay=False)),
]


def with_dataset_options(fn):
    for opt in reversed(dataset_options):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Overidentified IV estimation with transparent instrument weighting."""


@main.command()
@with_dataset_options
@click.option("--weights", default="ew", show_default=True, help="ew | csw")
@click.option("--weights-file", default=None, type=click.Path(exists=True))
@click.option("--auto-flip", is_flag=True, default=False)
@click.option("--egmm-mode", default="iterated", show_default=True,
              type=click.Choice(["iterated", "two_step"]))
@click.option("--no-figures", is_flag=True, default=False)
@handle_errors
def estimate(input_path, y_col, d_col, z_cols, cluster, cell, group,
             drop_missing, out_dir, weights, weights_file, auto_flip,
             egmm_mode, no_figures):
    """Point estimates, weights, and diagnostics for all estimators."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load(input_path, y_col, d_col, z_cols, cluster, cell, group, drop_missing)
    report = validate(center(ds), auto_flip=auto_flip)
    if report.weak:
        raise RelevanceError(f"instruments {report.weak} have nonpositive first stages")
    if report.sigma_z_singular:
        raise NumericalError("instrument covariance matrix is numerically singular")
    cd = report.centered
    ms = summarize(cd)
    cluster_robust = cd.cluster is not None
    gw = gamma_wald(cd, ms, cluster_robust=cluster_robust)
    omega, weights_kind = _weights(ms, weights, weights_file)

    res_tsls = gmm.tsls(ms, cd)
    res_rt = rt.rt_estimate(ms, gw, omega)
    estimators = {
        "tsls": {"estimate": res_tsls.beta, "se": res_tsls.se,
                 "implied_weights": res_tsls.lam},
        "rt": {"estimate": res_rt.beta, "se": res_rt.se, "weights": omega,
               "weights_kind": weights_kind},
    }
    notes = []
    if ms.L >= 2:
        res_egmm = gmm.egmm(ms, cd, mode=egmm_mode)
        estimators["egmm"] = {
            "estimate": res_egmm.beta, "se": res_egmm.se,
            "se_note": "uncorrected sandwich",
            "implied_weights": res_egmm.lam, "iterations": res_egmm.iterations,
            "converged": res_egmm.converged, "ridge_used": res_egmm.ridge_used,
            "j_stat": res_egmm.j_stat, "j_df": res_egmm.j_df,
            "j_pvalue": res_egmm.j_pvalue,
        }
    else:
        notes.append("not overidentified: J test skipped")
    prd = compliance.prd_check(compliance.empirical_joint(ds.z)) if ds.L <= 5 else None
    payload = {
        "n": ds.n, "L": ds.L,
        "dropped_rows": getattr(ds, "dropped_rows", 0),
        "flipped_instruments": report.flipped,
        "per_instrument": {
            "p": ms.p, "pi": ms.pi, "gamma": ms.gamma, "wald": ms.wald,
            "wald_se": np.sqrt(np.diag(gw.values) / ms.n),
        },
        "estimators": estimators,
        "prd": None if prd is None else {
            "passed": prd.passed, "worst_margin": prd.worst_margin,
            "worst_instrument": prd.worst_ell,
        },
        "cluster_robust": cluster_robust,
        "notes": notes,
    }
    path = _write_report(out, "estimate.json", payload)
    _write_csv(out / "wald.csv", ["instrument", "p", "pi", "gamma", "wald", "wald_se"],
               [[l + 1, ms.p[l], ms.pi[l], ms.gamma[l], ms.wald[l],
                 float(np.sqrt(gw.values[l, l] / ms.n))] for l in range(ms.L)])
    if not no_figures:
        combined = {k: (v["estimate"], v["se"]) for k, v in estimators.items()}
        figures.plot_wald_forest(ms.wald, np.sqrt(np.diag(gw.values) / ms.n),
                                 combined, out / "forest.png")
    click.echo(str(path))


@main.command()
@with_dataset_options
@handle_errors
def diagnose(input_path, y_col, d_col, z_cols, cluster, cell, group,
             drop_missing, out_dir):
    """Per-instrument residual variances, weight ratios, and the PRD check."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load(input_path, y_col, d_col, z_cols, cluster, cell, group, drop_missing)
    cd = center(ds)
    ms = summarize(cd)
    diag = gmm.diagonal_diagnostics(ms, cd)
    prd = compliance.prd_check(compliance.empirical_joint(ds.z)) if ds.L <= 5 else None
    payload = {
        "n": ds.n, "L": ds.L,
        "sigma_eps_sq": diag.sigma_eps_sq,
        "lambda_tsls": diag.lambda_tsls,
        "lambda_egmm": diag.lambda_egmm,
        "weight_ratio": diag.ratio,
        "omega_max_offdiag": diag.max_offdiag,
        "evaluated_at": diag.beta_at,
        "prd": None if prd is None else {
            "passed": prd.passed,
            "margins": prd.margins,
            "worst_margin": prd.worst_margin,
            "worst_instrument": prd.worst_ell,
        },
    }
    path = _write_report(out, "diagnose.json", payload)
    _write_csv(out / "diagnostics.csv",
               ["instrument", "sigma_eps_sq", "lambda_tsls", "lambda_egmm", "ratio"],
               [[l + 1, diag.sigma_eps_sq[l], diag.lambda_tsls[l],
                 diag.lambda_egmm[l], diag.ratio[l]] for l in range(ms.L)])
    click.echo(str(path))


@main.command()
@with_dataset_options
@click.option("--grid", "grid_size", default=101, show_default=True)
@click.option("--no-figures", is_flag=True, default=False)
@handle_errors
def frontier(input_path, y_col, d_col, z_cols, cluster, cell, group,
             drop_missing, out_dir, grid_size, no_figures):
    """Variance frontier over target estimands, with CSW/EW marked."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load(input_path, y_col, d_col, z_cols, cluster, cell, group, drop_missing)
    cd = center(ds)
    ms = summarize(cd)
    gw = gamma_wald(cd, ms, cluster_robust=cd.cluster is not None)
    curve = rt.variance_frontier(gw, ms.wald, grid_size=grid_size)
    marks = {}
    for name, omega in (("csw", rt.csw_weights(ms)), ("ew", rt.ew_weights(ms.L))):
        front, cost = rt.efficiency_decomposition(omega, gw, ms.wald)
        marks[name] = {
            "target": float(omega @ ms.wald),
            "variance": front + cost,
            "frontier_variance": front,
            "composition_cost": cost,
        }
    payload = {
        "grid_size": grid_size,
        "wald_range": [float(ms.wald.min()), float(ms.wald.max())],
        "psd_clip": curve.psd_clip,
        "marks": marks,
    }
    path = _write_report(out, "frontier.json", payload)
    _write_csv(out / "frontier.csv",
               ["beta_star", "v_min"] + [f"omega_{l + 1}" for l in range(ms.L)],
               [[curve.grid[j], curve.v_min[j], *curve.omega_star[j]]
                for j in range(curve.grid.size)])
    if not no_figures:
        figures.plot_frontier(
            curve, {k: (m["target"], m["variance"]) for k, m in marks.items()},
            out / "frontier.png")
    click.echo(str(path))


@main.command("target-prte")
@with_dataset_options
@click.option("--policy", "policy_path", required=True, type=click.Path(exists=True),
              help="JSON staircase spec or explicit status-quo/counterfactual tables")
@click.option("--m-multipliers", default="1,3", show_default=True,
              help="Lipschitz constants as multiples of the Wald range")
@click.option("--y-max", default=None, type=float,
              help="outcome bound enabling the linear-programming gap interval")
@click.option("--no-figures", is_flag=True, default=False)
@handle_errors
def target_prte(input_path, y_col, d_col, z_cols, cluster, cell, group,
                drop_missing, out_dir, policy_path, m_multipliers, y_max,
                no_figures):
    """Pick simplex weights whose composite MTE weight tracks a policy weight."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load(input_path, y_col, d_col, z_cols, cluster, cell, group, drop_missing)
    cd = center(ds)
    ms = summarize(cd)
    gw = gamma_wald(cd, ms, cluster_robust=cd.cluster is not None)
    zj = compliance.empirical_joint(ds.z)
    pm = mte.empirical_propensity(zj, ds.z, ds.d)
    hs = [mte.hv_weight(pm, l) for l in range(ds.L)]

    policy = json.loads(Path(policy_path).read_text())
    if "approval_rates" in policy:
        pair = mte.staircase_policy(policy["group_probs"], policy["approval_rates"])
    else:
        pair = mte.PolicyPair(
            status_quo=mte.PropensityModel(
                probs=np.asarray(policy["status_quo"]["probs"], float),
                p_values=np.asarray(policy["status_quo"]["p_values"], float)),
            counterfactual=mte.PropensityModel(
                probs=np.asarray(policy["counterfactual"]["probs"], float),
                p_values=np.asarray(policy["counterfactual"]["p_values"], float)),
        )
    w_p = mte.prte_weight(pair)
    omega, l2_error, rel_l2 = mte.prte_target(hs, w_p, gw)
    res = rt.rt_estimate(ms, gw, omega)

    hbar = mte.composite_weight(omega, hs)
    grid = mte.merge_breaks(hbar, w_p)
    err_fn = mte.WeightFn(grid, hbar.on_grid(grid).values - w_p.on_grid(grid).values)
    wald_range = float(ms.wald.max() - ms.wald.min())
    lipschitz = {}
    for mult in [float(s) for s in m_multipliers.split(",")]:
        lipschitz[f"{mult:g}x"] = mte.gap_lipschitz(mult * wald_range, l2_error)
    gap_interval = None
    if y_max is not None:
        gap_interval = mte.gap_lp(ms.wald, hs, err_fn, y_max=y_max,
                                  monotone_response=True)
    payload = {
        "omega_prte": omega,
        "estimate": res.beta,
        "se": res.se,
        "l2_error": l2_error,
        "relative_l2": rel_l2,
        "wald_range": wald_range,
        "gap_lipschitz": lipschitz,
        "gap_lp": gap_interval,
    }
    path = _write_report(out, "target_prte.json", payload)
    _write_csv(out / "weight_functions.csv",
               ["u_left", "u_right", "composite", "policy"],
               [[grid[j], grid[j + 1], hbar.on_grid(grid).values[j],
                 w_p.on_grid(grid).values[j]] for j in range(grid.size - 1)])
    if not no_figures:
        figures.plot_weight_functions(
            {"composite": hbar, "policy": w_p}, out / "prte_weights.png",
            title="Composite vs. policy weight")
    click.echo(str(path))


@main.command("prd-check")
@with_dataset_options
@handle_errors
def prd_check_cmd(input_path, y_col, d_col, z_cols, cluster, cell, group,
                  drop_missing, out_dir):
    """Upper-set dominance check on the empirical instrument joint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load(input_path, y_col, d_col, z_cols, cluster, cell, group, drop_missing)
    report = compliance.prd_check(compliance.empirical_joint(ds.z))
    payload = {
        "passed": report.passed,
        "margins": report.margins,
        "worst_margin": report.worst_margin,
        "worst_instrument": report.worst_ell,
        "worst_set_mask": report.worst_set_mask,
        "skipped": list(report.skipped),
    }
    path = _write_report(out, "prd.json", payload)
    click.echo(str(path))


def _build_sampler(spec: dict):
    kind = spec.get("kind")
    if kind == "star":
        s = sim.StarDgpSpec(
            shares=spec["shares"], p=spec["p"], late=spec["late"],
            sigma_y0_sq=spec["sigma_y0_sq"], sigma_tau_sq=spec["sigma_tau_sq"])
        return (lambda n, seed, rep: sim.star_sample(s, n, seed, rep)), sim.star_targets(s)
    if kind == "latent":
        s = sim.LatentDgpSpec(
            joint=compliance.InstrumentJoint(np.asarray(spec["joint"], float)),
            p_of_z=np.asarray(spec["p_of_z"], float),
            mte=mte.WeightFn(np.asarray(spec["mte"]["breaks"], float),
                             np.asarray(spec["mte"]["values"], float)),
            noise_scale=float(spec.get("noise_scale", 0.0)),
            baseline_sd=float(spec.get("baseline_sd", 1.0)))
        return (lambda n, seed, rep: sim.latent_sample(s, n, seed, rep)), sim.latent_targets(s)
    raise SchemaError(f"unknown DGP kind {kind!r}")


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("-r", "--replications", default=500, show_default=True)
@click.option("-n", "--sample-size", default=4000, show_default=True)
@click.option("--seed", default=20240801, show_default=True)
@click.option("--trim", default="1,99", show_default=True)
@click.option("--out", "out_dir", default=".", type=click.Path(file_okay=False))
@handle_errors
def simulate(spec_path, replications, sample_size, seed, trim, out_dir):
    """Monte Carlo study against exact population targets."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = json.loads(Path(spec_path).read_text())
    sampler, targets = _build_sampler(spec)
    lo, hi = (float(s) for s in trim.split(","))
    target_map = {
        "tsls": targets.beta_tsls, "egmm": targets.beta_egmm,
        "rt_ew": targets.beta_ew, "rt_csw": targets.beta_csw,
    }
    L = targets.wald.size
    report = sim.monte_carlo(
        sampler, sim.default_estimators(L), target_map,
        R=replications, n=sample_size, seed=seed, trim=(lo, hi))
    payload = {
        "replications": report.replications, "n": report.n,
        "seed": report.seed, "trim": list(report.trim),
        "population": {
            "wald": targets.wald, "lambda_tsls": targets.lambda_tsls,
            "lambda_egmm": targets.lambda_egmm,
            "egmm_fixed_point_residual": targets.egmm_residual,
        },
        "metrics": report.metrics,
        "failures": report.failures,
    }
    path = _write_report(out, "simulate.json", payload)
    names = sorted(report.metrics)
    cols = ["target", "bias", "sd", "rmse", "coverage", "kept"]
    _write_csv(out / "simulate.csv", ["estimator"] + cols,
               [[name] + [report.metrics[name][c] for c in cols] for name in names])
    click.echo(str(path))


if __name__ == "__main__":
    main()
