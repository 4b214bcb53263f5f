"""Sample moment summaries: first stages, Walds, Omega(beta), and the Wald
covariance matrix.

All divisors are n (no degrees-of-freedom correction); data are assumed
FWL-centered, so residual means are zero by construction and residual
centering below is a numerical no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CenteredDataset
from .errors import RelevanceError


@dataclass(frozen=True)
class MomentSummary:
    p: np.ndarray          # instrument means
    pi: np.ndarray         # first-stage coefficients gamma / var(z_c)
    rho: np.ndarray        # reduced-form coefficients
    gamma: np.ndarray      # Cov(D, Z_l) = n^-1 sum d_i z_c[i,l]
    wald: np.ndarray       # rho / pi (NaN where pi == 0)
    sigma_z: np.ndarray    # n^-1 z_c' z_c
    n: int
    g0: np.ndarray         # g_n(0) = n^-1 sum y_i z_c[i,:]
    undefined: tuple[int, ...] = ()   # instruments with pi == 0

    @property
    def L(self) -> int:
        return self.gamma.shape[0]

    def g_n(self, beta: float) -> np.ndarray:
        """Moment vector g_n(beta) = g_n(0) - beta * gamma."""
        return self.g0 - beta * self.gamma


@dataclass(frozen=True)
class OmegaMatrix:
    values: np.ndarray
    beta_at: float
    cluster_robust: bool = False


@dataclass(frozen=True)
class GammaWald:
    values: np.ndarray
    cluster_robust: bool = False


def summarize(cd: CenteredDataset, strict: bool = True) -> MomentSummary:
    """Sample analogues of p, pi, rho, gamma, Wald, Sigma_Z.

    With strict=False an instrument with pi=0 gets a NaN Wald and is listed
    in `undefined` instead of raising.
    """
    n = cd.n
    z_c, y_c, d_c = cd.z_c, cd.y_c, cd.d_c
    gamma = d_c @ z_c / n
    g0 = y_c @ z_c / n
    var_z = (z_c ** 2).mean(axis=0)
    if (var_z <= 0).any():
        raise RelevanceError("constant instrument column after centering")
    pi = gamma / var_z
    rho = g0 / var_z
    undefined = tuple(int(ell) for ell in np.flatnonzero(pi == 0.0))
    if undefined and strict:
        raise RelevanceError(f"first stage is exactly zero for instruments {list(undefined)}")
    wald = np.where(pi != 0.0, rho / np.where(pi != 0.0, pi, 1.0), np.nan)
    return MomentSummary(
        p=cd.p_hat.copy(),
        pi=pi,
        rho=rho,
        gamma=gamma,
        wald=wald,
        sigma_z=z_c.T @ z_c / n,
        n=n,
        g0=g0,
        undefined=undefined,
    )


def _cluster_sums(scores: np.ndarray, cluster: np.ndarray) -> np.ndarray:
    order = np.argsort(cluster, kind="stable")
    sorted_scores = scores[order]
    sorted_lab = cluster[order]
    cuts = np.flatnonzero(np.r_[True, sorted_lab[1:] != sorted_lab[:-1]])
    return np.add.reduceat(sorted_scores, cuts, axis=0)


def omega_at(cd: CenteredDataset, beta: float, cluster_robust: bool = False) -> OmegaMatrix:
    """Moment covariance Omega(beta) evaluated at residuals y_c - beta*d_c."""
    eps = cd.y_c - beta * cd.d_c
    scores = eps[:, None] * cd.z_c
    if cluster_robust:
        if cd.cluster is None:
            raise ValueError("cluster_robust requested but dataset has no cluster labels")
        g = _cluster_sums(scores, cd.cluster)
        values = g.T @ g / cd.n
    else:
        values = scores.T @ scores / cd.n
    values = 0.5 * (values + values.T)
    return OmegaMatrix(values=values, beta_at=float(beta), cluster_robust=cluster_robust)


def gamma_wald(cd: CenteredDataset, ms: MomentSummary | None = None,
               cluster_robust: bool = False) -> GammaWald:
    """Covariance matrix of the instrument-specific Wald estimators.

    [Gamma]_{lk} = (n gamma_l gamma_k)^-1 sum_i eps_il eps_ik z_c[i,l] z_c[i,k]
    with eps_il = y_c - Wald_l * d_c, recentered (a no-op after FWL).
    """
    if ms is None:
        ms = summarize(cd)
    if ms.undefined:
        raise RelevanceError(f"Wald undefined for instruments {list(ms.undefined)}")
    eps = cd.y_c[:, None] - np.outer(cd.d_c, ms.wald)
    eps = eps - eps.mean(axis=0)
    scores = eps * cd.z_c
    if cluster_robust:
        if cd.cluster is None:
            raise ValueError("cluster_robust requested but dataset has no cluster labels")
        scores = _cluster_sums(scores, cd.cluster)
    values = scores.T @ scores / cd.n
    values = values / np.outer(ms.gamma, ms.gamma)
    values = 0.5 * (values + values.T)
    return GammaWald(values=values, cluster_robust=cluster_robust)
