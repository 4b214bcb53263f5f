"""Weighted-Wald estimation with researcher-chosen simplex weights, the
variance frontier those weights live on, and the covariate-stratified
variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, center
from .errors import InputError, RelevanceError
from .moments import GammaWald, MomentSummary, gamma_wald, summarize
from .optim import QpProblem, psd_repair, simplex_qp

MIN_CELL_SIZE = 30


@dataclass(frozen=True)
class RtResult:
    beta: float
    omega: np.ndarray
    se: float
    per_wald: np.ndarray
    gamma_wald: GammaWald
    n: int


@dataclass(frozen=True)
class FrontierCurve:
    grid: np.ndarray          # target values beta*
    v_min: np.ndarray         # minimum omega' Gamma omega at each target
    omega_star: np.ndarray    # grid_size x L matrix of minimizers
    psd_clip: float = 0.0     # magnitude of any eigenvalue repair on Gamma


def _check_simplex(omega: np.ndarray):
    if abs(omega.sum() - 1.0) > 1e-10 or (omega < -1e-12).any():
        raise InputError("weights must lie on the simplex")


def rt_estimate(ms: MomentSummary, gw: GammaWald, omega) -> RtResult:
    omega = np.asarray(omega, dtype=float)
    _check_simplex(omega)
    if np.any(~np.isfinite(ms.wald) & (omega > 0)):
        raise RelevanceError("a positively weighted instrument has an undefined Wald ratio")
    wald = np.where(np.isfinite(ms.wald), ms.wald, 0.0)
    beta = float(omega @ wald)
    v = float(omega @ gw.values @ omega)
    return RtResult(
        beta=beta, omega=omega, se=float(np.sqrt(max(v, 0.0) / ms.n)),
        per_wald=ms.wald, gamma_wald=gw, n=ms.n,
    )


def csw_weights(ms: MomentSummary) -> np.ndarray:
    """Complier-share weights: omega proportional to the first-stage covariance."""
    if (ms.gamma <= 0).any():
        raise InputError("complier-share weights need positive first stages "
                         "(flip reversed instruments first)")
    return ms.gamma / ms.gamma.sum()


def ew_weights(L: int) -> np.ndarray:
    if L < 1:
        raise InputError("need at least one instrument")
    return np.full(L, 1.0 / L)


def variance_frontier(gw: GammaWald, wald, grid_size: int = 101) -> FrontierCurve:
    """Minimum-variance weights for every attainable target value.

    Solves the simplex-plus-hyperplane QP on an evenly spaced target grid
    spanning the Wald range; the endpoints are vertex weight vectors.
    """
    wald = np.asarray(wald, dtype=float)
    if not np.isfinite(wald).all():
        raise InputError("all Wald ratios must be finite")
    Q, clip = psd_repair(gw.values)
    lo, hi = float(wald.min()), float(wald.max())
    grid = np.linspace(lo, hi, grid_size)
    L = wald.size
    v_min = np.empty(grid_size)
    omega_star = np.empty((grid_size, L))
    for j, target in enumerate(grid):
        x, val, _ = simplex_qp(QpProblem(Q, extra_eq=(wald, np.array([target]))))
        v_min[j] = val
        omega_star[j] = x
    return FrontierCurve(grid=grid, v_min=v_min, omega_star=omega_star, psd_clip=clip)


def frontier_value(gw: GammaWald, wald, target: float) -> tuple[float, np.ndarray]:
    """Frontier variance and minimizing weights at a single target value."""
    wald = np.asarray(wald, dtype=float)
    Q, _ = psd_repair(gw.values)
    x, val, _ = simplex_qp(QpProblem(Q, extra_eq=(wald, np.array([float(target)]))))
    return val, x


def efficiency_decomposition(omega, gw: GammaWald, wald) -> tuple[float, float]:
    """Split the weighting variance into the frontier level at the same target
    and the excess paid for the particular weight composition."""
    omega = np.asarray(omega, dtype=float)
    _check_simplex(omega)
    wald = np.asarray(wald, dtype=float)
    v_rt = float(omega @ gw.values @ omega)
    frontier_part, _ = frontier_value(gw, wald, float(omega @ wald))
    return frontier_part, v_rt - frontier_part


def rt_stratified(
    ds: Dataset,
    omega,
    mode: str = "marginal",
    min_cell_size: int = MIN_CELL_SIZE,
):
    """Cell-by-cell weighted-Wald estimation.

    conditional returns {cell: RtResult}; marginal returns a single RtResult
    whose estimate averages the cell estimates by cell share and whose
    variance adds the across-cell Wald covariance to the mean within-cell
    covariance.
    """
    if ds.cell is None:
        raise InputError("dataset has no cell labels")
    if mode not in ("conditional", "marginal"):
        raise InputError(f"unknown mode {mode!r}")
    omega = np.asarray(omega, dtype=float)
    _check_simplex(omega)
    cells = np.unique(ds.cell)
    results: dict = {}
    shares = {}
    for cell in cells:
        m = ds.cell == cell
        n_x = int(m.sum())
        if n_x < min_cell_size:
            raise InputError(f"cell {cell} has {n_x} rows; need {min_cell_size}")
        sub = Dataset(y=ds.y[m], d=ds.d[m], z=ds.z[m],
                      group=None if ds.group is None else ds.group[m])
        cd = center(sub)
        ms = summarize(cd)
        if not np.isfinite(ms.wald).all():
            raise RelevanceError(f"cell {cell} has an irrelevant instrument")
        gw = gamma_wald(cd, ms)
        results[int(cell)] = rt_estimate(ms, gw, omega)
        shares[int(cell)] = n_x / ds.n
    if mode == "conditional":
        return results
    share_vec = np.array([shares[int(c)] for c in cells])
    walds = np.stack([results[int(c)].per_wald for c in cells])      # C x L
    gammas = np.stack([results[int(c)].gamma_wald.values for c in cells])
    beta = float(share_vec @ np.array([results[int(c)].beta for c in cells]))
    mean_wald = share_vec @ walds
    dev = walds - mean_wald
    between = (dev * share_vec[:, None]).T @ dev
    within = np.tensordot(share_vec, gammas, axes=1)
    gw_tilde = GammaWald(values=within + between)
    v = float(omega @ gw_tilde.values @ omega)
    return RtResult(
        beta=beta, omega=omega, se=float(np.sqrt(max(v, 0.0) / ds.n)),
        per_wald=mean_wald, gamma_wald=gw_tilde, n=ds.n,
    )
