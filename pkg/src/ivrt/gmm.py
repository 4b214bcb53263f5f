"""Closed-form GMM for the single-parameter overidentified design.

Every estimator here is a weighted average of the instrument-specific Wald
ratios; the implied weights are reported alongside the point estimate so the
weighting is never opaque.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc

from .data import CenteredDataset
from .errors import InputError, NumericalError
from .moments import MomentSummary, OmegaMatrix, omega_at
from .optim import spd_solve

RIDGE_FACTOR = 1e-10  # on trace/L, for near-singular Omega


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function (regularized upper incomplete gamma)."""
    if x < 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


@dataclass(frozen=True)
class GmmResult:
    beta: float
    lam: np.ndarray                 # implied Wald weights, sum to 1
    se: float
    weight_matrix_kind: str         # identity | sigma_z_inverse | omega_inverse | custom | targeting
    omega_used: OmegaMatrix
    ridge_used: float = 0.0


@dataclass(frozen=True)
class EgmmResult(GmmResult):
    mode: str = "iterated"          # two_step | iterated
    iterations: int = 0
    fixed_point_residual: float = np.nan
    converged: bool = True
    j_stat: float = np.nan
    j_df: int = 0
    j_pvalue: float = np.nan


def _beta_lambda(ms: MomentSummary, W: np.ndarray) -> tuple[float, np.ndarray]:
    Wg = W @ ms.gamma
    denom = float(ms.gamma @ Wg)
    if denom <= 1e-14:
        raise NumericalError("weighting matrix is degenerate along the first stage")
    beta = float(Wg @ ms.g0) / denom
    lam = ms.gamma * Wg / denom
    return beta, lam


def sandwich_variance(W: np.ndarray, gamma: np.ndarray, omega: np.ndarray) -> float:
    Wg = W @ gamma
    return float(Wg @ omega @ Wg) / float(gamma @ Wg) ** 2


def gmm_estimate(
    ms: MomentSummary,
    cd: CenteredDataset,
    W: np.ndarray,
    kind: str = "custom",
) -> GmmResult:
    """One-shot GMM with a fixed weighting matrix; sandwich SE at the estimate."""
    W = np.asarray(W, dtype=float)
    if np.max(np.abs(W - W.T)) > 1e-10 * max(1.0, np.max(np.abs(W))):
        raise InputError("weighting matrix must be symmetric")
    beta, lam = _beta_lambda(ms, W)
    om = omega_at(cd, beta)
    v = sandwich_variance(W, ms.gamma, om.values)
    return GmmResult(
        beta=beta, lam=lam, se=float(np.sqrt(max(v, 0.0) / ms.n)),
        weight_matrix_kind=kind, omega_used=om,
    )


def tsls(ms: MomentSummary, cd: CenteredDataset) -> GmmResult:
    eigs = np.linalg.eigvalsh(ms.sigma_z)
    if eigs.min() <= 1e-10 * np.trace(ms.sigma_z):
        raise NumericalError("instrument covariance matrix is rank deficient")
    W = spd_solve(ms.sigma_z, np.eye(ms.L))
    return gmm_estimate(ms, cd, W, kind="sigma_z_inverse")


def _inv_with_ridge(values: np.ndarray) -> tuple[np.ndarray, float]:
    try:
        return spd_solve(values, np.eye(values.shape[0])), 0.0
    except NumericalError:
        delta = RIDGE_FACTOR * np.trace(values) / values.shape[0]
        return spd_solve(values + delta * np.eye(values.shape[0]), np.eye(values.shape[0])), delta


def egmm(
    ms: MomentSummary,
    cd: CenteredDataset,
    mode: str = "iterated",
    tol: float = 1e-10,
    max_iter: int = 200,
    cluster_robust: bool = False,
) -> EgmmResult:
    """Efficient GMM started at the 2SLS estimate.

    two_step evaluates the moment covariance once at 2SLS; iterated repeats
    until the estimate is a fixed point of the re-weighting map.
    """
    if mode not in ("two_step", "iterated"):
        raise InputError(f"unknown mode {mode!r}")
    beta = tsls(ms, cd).beta
    ridge_used = 0.0
    iterations = 0
    lam = None
    om = omega_at(cd, beta, cluster_robust)
    for _ in range(1 if mode == "two_step" else max_iter):
        W, ridge = _inv_with_ridge(om.values)
        ridge_used = max(ridge_used, ridge)
        beta_new, lam = _beta_lambda(ms, W)
        iterations += 1
        done = abs(beta_new - beta) <= tol
        beta = beta_new
        om = omega_at(cd, beta, cluster_robust)
        if mode == "iterated" and done:
            break
    W, ridge = _inv_with_ridge(om.values)
    ridge_used = max(ridge_used, ridge)
    beta_check, lam = _beta_lambda(ms, W)
    residual = abs(beta_check - beta)
    converged = mode == "two_step" or residual <= max(tol * 10, 1e-9)
    v = sandwich_variance(W, ms.gamma, om.values)
    if ms.L >= 2:
        g = ms.g_n(beta)
        j = float(ms.n * g @ (W @ g))
        j = max(j, 0.0)
        j_df = ms.L - 1
        j_p = chi2_sf(j, j_df)
    else:
        j, j_df, j_p = np.nan, 0, np.nan
    return EgmmResult(
        beta=beta, lam=lam, se=float(np.sqrt(max(v, 0.0) / ms.n)),
        weight_matrix_kind="omega_inverse", omega_used=om, ridge_used=ridge_used,
        mode=mode, iterations=iterations, fixed_point_residual=residual,
        converged=converged, j_stat=j, j_df=j_df, j_pvalue=j_p,
    )


def j_test(ms: MomentSummary, result: EgmmResult) -> tuple[float, int, float]:
    if ms.L < 2:
        raise InputError("J test needs an overidentified design (L >= 2)")
    return result.j_stat, result.j_df, result.j_pvalue


def _check_simplex(omega: np.ndarray):
    if abs(omega.sum() - 1.0) > 1e-10 or (omega < -1e-12).any():
        raise InputError("weights must lie on the simplex")


def targeting_matrix(omega, gamma) -> np.ndarray:
    """A positive-definite weighting matrix whose implied weights equal omega.

    Interior targets use the diagonal form omega_l / gamma_l^2; zero weights
    need off-diagonal terms that cancel the first-stage loading exactly.
    """
    omega = np.asarray(omega, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    _check_simplex(omega)
    if (gamma <= 0).any():
        raise InputError("targeting requires positive first-stage covariances")
    L = omega.size
    if (omega > 0).all():
        return np.diag(omega / gamma ** 2)
    support = omega > 0
    comp = ~support
    eps = 1e-6 * omega[support].min()
    gs2 = float(gamma[support] @ gamma[support])
    gc2 = float(gamma[comp] @ gamma[comp])
    W = np.zeros((L, L))
    W[np.ix_(comp, comp)] = eps * np.eye(int(comp.sum()))
    cross = -eps * np.outer(gamma[comp], gamma[support]) / gs2
    W[np.ix_(comp, support)] = cross
    W[np.ix_(support, comp)] = cross.T
    idx = np.where(support)[0]
    W[idx, idx] = omega[support] / gamma[support] ** 2 + eps * gc2 / gs2
    return W


def constrained_variance(omega, gamma, om: OmegaMatrix | np.ndarray) -> tuple[float, float]:
    """Sandwich variance shared by every matrix targeting omega, and the
    attainable floor over all weighting matrices."""
    omega = np.asarray(omega, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    values = om.values if isinstance(om, OmegaMatrix) else np.asarray(om, dtype=float)
    _check_simplex(omega)
    w_over_g = omega / gamma
    v_constrained = float(w_over_g @ values @ w_over_g)
    try:
        v_floor = 1.0 / float(gamma @ spd_solve(values, gamma))
    except NumericalError:
        v_floor = np.nan
    return v_constrained, v_floor


def egmm_weights_population(gamma, omega_values) -> np.ndarray:
    """Implied weights of the efficient matrix: gamma_l [Omega^-1 gamma]_l, normalized."""
    gamma = np.asarray(gamma, dtype=float)
    a = spd_solve(np.asarray(omega_values, dtype=float), gamma)
    lam = gamma * a
    return lam / lam.sum()


def penalty_derivative(om: OmegaMatrix | np.ndarray, gamma, ell: int) -> float:
    """Sensitivity of the efficient weight on instrument ell to its own moment
    variance; negative whenever the weight is interior and L >= 2."""
    values = om.values if isinstance(om, OmegaMatrix) else np.asarray(om, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    inv = spd_solve(values, np.eye(gamma.size))
    a = inv @ gamma
    S = float(gamma @ a)
    return float(gamma[ell] * a[ell] / S ** 2 * (a[ell] ** 2 - S * inv[ell, ell]))


@dataclass(frozen=True)
class DiagonalDiagnostics:
    sigma_eps_sq: np.ndarray
    lambda_tsls: np.ndarray
    lambda_egmm: np.ndarray
    ratio: np.ndarray               # lambda_egmm / lambda_tsls, normalized scale
    max_offdiag: float              # of Omega-hat, as a diagonal-validity gauge
    beta_at: float
    decomposition: dict | None = None


def diagonal_diagnostics(
    ms: MomentSummary,
    cd: CenteredDataset,
    oracle: dict | None = None,
) -> DiagonalDiagnostics:
    """Per-instrument residual variances and the diagonal-form weight ratio.

    oracle, when given, supplies {"sigma_y0_sq", "sigma_tau_sq", "late"} so the
    three-component residual-variance decomposition can be reported (used to
    audit simulations).  It may also carry "p", the per-instrument treatment
    probability, which differs from the instrument mean under group demeaning.
    """
    eg = egmm(ms, cd, mode="iterated")
    om = eg.omega_used.values
    var_z = (cd.z_c ** 2).mean(axis=0)
    sigma_eps_sq = np.diag(om) / var_z
    l_tsls = ms.pi * ms.gamma
    l_tsls = l_tsls / l_tsls.sum()
    l_egmm = ms.pi * ms.gamma / sigma_eps_sq
    l_egmm = l_egmm / l_egmm.sum()
    off = om - np.diag(np.diag(om))
    decomposition = None
    if oracle is not None:
        p = np.asarray(oracle.get("p", ms.p), dtype=float)
        gap = np.asarray(oracle["late"], dtype=float) - eg.beta
        parts = {
            "baseline": np.asarray(oracle["sigma_y0_sq"], dtype=float),
            "effect_dispersion": (1.0 - p) * np.asarray(oracle["sigma_tau_sq"], dtype=float),
            "target_misalignment": (1.0 - 3.0 * p * (1.0 - p)) * gap ** 2,
        }
        parts["total"] = parts["baseline"] + parts["effect_dispersion"] + parts["target_misalignment"]
        decomposition = parts
    return DiagonalDiagnostics(
        sigma_eps_sq=sigma_eps_sq,
        lambda_tsls=l_tsls,
        lambda_egmm=l_egmm,
        ratio=l_egmm / l_tsls,
        max_offdiag=float(np.max(np.abs(off))) if ms.L > 1 else 0.0,
        beta_at=eg.beta,
        decomposition=decomposition,
    )
