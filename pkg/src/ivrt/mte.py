"""Latent-index machinery: propensity tables, step-function instrument
weights, policy weights, PRTE weight targeting, and identification-gap
bounds.

All weight functions are piecewise constant on (a, b] intervals of [0, 1];
a point evaluation at a breakpoint takes the value of the interval ending
there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compliance import InstrumentJoint
from .errors import (
    DegeneratePolicyError,
    InfeasibleError,
    InputError,
    RelevanceError,
)
from .moments import GammaWald
from .optim import LpProblem, QpProblem, lp_solve, psd_repair, simplex_qp

_BREAK_TOL = 1e-14


@dataclass(frozen=True)
class WeightFn:
    """Piecewise-constant function on [0,1]: values[j] on (breaks[j], breaks[j+1]]."""

    breaks: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        breaks = np.asarray(self.breaks, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if breaks.ndim != 1 or breaks.size < 2:
            raise InputError("breaks must contain at least [0, 1]")
        if abs(breaks[0]) > _BREAK_TOL or abs(breaks[-1] - 1.0) > _BREAK_TOL:
            raise InputError("breaks must start at 0 and end at 1")
        if np.any(np.diff(breaks) <= 0):
            raise InputError("breaks must be strictly increasing")
        if values.shape != (breaks.size - 1,):
            raise InputError("values length must be len(breaks) - 1")
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "values", values)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breaks)

    def integral(self) -> float:
        return float(self.values @ self.widths)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        # (a, b] convention: u equal to a break belongs to the interval ending there.
        j = np.searchsorted(self.breaks, u, side="left") - 1
        j = np.clip(j, 0, self.values.size - 1)
        out = self.values[j]
        return float(out) if out.ndim == 0 else out

    def on_grid(self, breaks: np.ndarray) -> "WeightFn":
        """Re-express on a finer grid that contains all current breaks."""
        mids = 0.5 * (breaks[:-1] + breaks[1:])
        return WeightFn(breaks, self(mids))


def merge_breaks(*fns: WeightFn) -> np.ndarray:
    allb = np.concatenate([f.breaks for f in fns])
    allb = np.sort(allb)
    keep = np.r_[True, np.diff(allb) > _BREAK_TOL]
    out = allb[keep]
    out[0], out[-1] = 0.0, 1.0
    return out


def inner(f: WeightFn, g: WeightFn) -> float:
    """Exact L2 inner product of two step functions."""
    grid = merge_breaks(f, g)
    fv = f.on_grid(grid).values
    gv = g.on_grid(grid).values
    return float((fv * gv) @ np.diff(grid))


def l2_norm(f: WeightFn) -> float:
    return float(np.sqrt(max(inner(f, f), 0.0)))


def combine(coefs, fns) -> WeightFn:
    grid = merge_breaks(*fns)
    vals = sum(c * f.on_grid(grid).values for c, f in zip(coefs, fns))
    return WeightFn(grid, vals)


@dataclass(frozen=True)
class PropensityModel:
    """Discrete distribution of the propensity p(Z).

    probs/p_values enumerate the support; joint carries the underlying
    instrument configuration distribution when the support is {0,1}^L.
    """

    probs: np.ndarray
    p_values: np.ndarray
    joint: InstrumentJoint | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        p_values = np.asarray(self.p_values, dtype=float)
        if probs.shape != p_values.shape:
            raise InputError("probs and p_values must align")
        if (p_values < -1e-12).any() or (p_values > 1 + 1e-12).any():
            raise InputError("propensities must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > 1e-10 or (probs < -1e-15).any():
            raise InputError("support probabilities must sum to 1")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "p_values", np.clip(p_values, 0.0, 1.0))

    def breaks(self) -> np.ndarray:
        b = np.unique(np.concatenate([[0.0, 1.0], self.p_values]))
        keep = np.r_[True, np.diff(b) > _BREAK_TOL]
        return b[keep]

    def survival(self) -> WeightFn:
        """F(u) = P(p(Z) >= u) as a step function on the resistance grid."""
        grid = self.breaks()
        # On (u_{j-1}, u_j], the event {p >= u} equals {p >= u_j}.
        vals = np.array([self.probs[self.p_values >= grid[j + 1] - _BREAK_TOL].sum()
                         for j in range(grid.size - 1)])
        return WeightFn(grid, vals)

    def mean_p(self) -> float:
        return float(self.probs @ self.p_values)

    def check_monotone(self) -> list[tuple[int, int]]:
        """Pairs of support indices (i, j) with z_i <= z_j but p_i > p_j."""
        if self.joint is None:
            return []
        m = self.probs.size
        bad = []
        for i in range(m):
            for j in range(m):
                if i != j and (i & j) == i and self.p_values[i] > self.p_values[j] + 1e-12:
                    bad.append((i, j))
        return bad


def propensity_model(zj: InstrumentJoint, p_of_z) -> PropensityModel:
    p_of_z = np.asarray(p_of_z, dtype=float)
    if p_of_z.shape != zj.probs.shape:
        raise InputError("p_of_z must give a propensity for every configuration")
    return PropensityModel(probs=zj.probs, p_values=p_of_z, joint=zj)


def empirical_propensity(zj: InstrumentJoint, z: np.ndarray, d: np.ndarray) -> PropensityModel:
    """Cell means of d by instrument configuration; every cell must be seen."""
    L = zj.L
    idx = (np.asarray(z).astype(int) * (1 << np.arange(L))).sum(axis=1)
    p = np.zeros(2 ** L)
    for cell in range(2 ** L):
        m = idx == cell
        if zj.probs[cell] > 0 and not m.any():
            raise InputError(f"no observations in instrument cell {cell}")
        p[cell] = np.asarray(d)[m].mean() if m.any() else 0.0
    return PropensityModel(probs=zj.probs, p_values=p, joint=zj)


def hv_weight(pm: PropensityModel, ell: int) -> WeightFn:
    """Instrument-specific MTE weight: normalized difference of conditional
    propensity survival functions given Z_ell = 1 versus 0."""
    if pm.joint is None:
        raise InputError("hv_weight needs an instrument-configuration model")
    zj = pm.joint
    idx = np.arange(pm.probs.size)
    on = ((idx >> ell) & 1) == 1
    p1 = pm.probs[on].sum()
    if p1 <= 0.0 or p1 >= 1.0:
        raise RelevanceError(f"instrument {ell} is degenerate")
    cond1 = np.where(on, pm.probs, 0.0) / p1
    cond0 = np.where(on, 0.0, pm.probs) / (1.0 - p1)
    denom = float((cond1 - cond0) @ pm.p_values)  # E[p|Z=1] - E[p|Z=0]
    if abs(denom) < 1e-14:
        raise RelevanceError(f"instrument {ell} does not move the propensity")
    grid = pm.breaks()
    vals = np.empty(grid.size - 1)
    for j in range(grid.size - 1):
        hi = pm.p_values >= grid[j + 1] - _BREAK_TOL
        vals[j] = (cond1[hi].sum() - cond0[hi].sum()) / denom
    return WeightFn(grid, vals)


def composite_weight(weights, hs) -> WeightFn:
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-10:
        raise InputError("weights must sum to 1")
    return combine(weights, hs)


@dataclass(frozen=True)
class PolicyPair:
    status_quo: PropensityModel
    counterfactual: PropensityModel


def prte_weight(pp: PolicyPair) -> WeightFn:
    """Policy weight w^P(u) proportional to the survival gap F0(u) - F1(u)."""
    f0 = pp.status_quo.survival()
    f1 = pp.counterfactual.survival()
    grid = merge_breaks(f0, f1)
    gap = f0.on_grid(grid).values - f1.on_grid(grid).values
    denom = float(gap @ np.diff(grid))
    if abs(denom) < 1e-14:
        raise DegeneratePolicyError("policy does not shift the propensity distribution")
    return WeightFn(grid, gap / denom)


def staircase_policy(group_probs, approval_rates) -> PolicyPair:
    """Each group adopts the next group's (nondecreasing) rate; top unchanged."""
    probs = np.asarray(group_probs, dtype=float)
    rates = np.asarray(approval_rates, dtype=float)
    if probs.size < 2:
        raise InputError("need at least two groups")
    if np.any(np.diff(rates) < -1e-12):
        raise InputError("approval rates must be nondecreasing")
    shifted = np.r_[rates[1:], rates[-1]]
    return PolicyPair(
        status_quo=PropensityModel(probs=probs, p_values=rates),
        counterfactual=PropensityModel(probs=probs, p_values=shifted),
    )


def _independent_rows(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u, s, _ = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0] if s.size else 1.0)))
    basis = u[:, :rank].T  # maps rows -> independent combinations
    return basis @ A, basis @ b


def prte_target(hs, w_p: WeightFn, gw: GammaWald):
    """Two-stage PRTE weight selection.

    Stage 1 finds simplex weights whose composite weight function is L2-closest
    to the policy weight; stage 2 minimizes the RT variance over the stage-1
    argmin set (the face where both the Gram image and the linear term are
    pinned).  Returns (omega, l2_error, relative_l2).
    """
    L = len(hs)
    grid = merge_breaks(*hs, w_p)
    widths = np.diff(grid)
    H = np.stack([h.on_grid(grid).values for h in hs])   # L x K
    wv = w_p.on_grid(grid).values
    G = (H * widths) @ H.T
    c = (H * widths) @ wv
    G = 0.5 * (G + G.T)

    omega1, _, _ = simplex_qp(QpProblem(G, -2.0 * c), tol=1e-12)

    # Stage-1 optima form the set {omega in simplex: G omega = G omega1,
    # c'omega = c'omega1}; minimize the sampling variance there.
    A = np.vstack([G, c])
    b = np.r_[G @ omega1, c @ omega1]
    A, b = _independent_rows(A, b)
    gamma_mat, _ = psd_repair(gw.values)
    omega, _, _ = simplex_qp(
        QpProblem(gamma_mat, extra_eq=(A, b)), tol=1e-12, x0=omega1
    )

    err_sq = float(omega @ G @ omega - 2.0 * c @ omega + (wv ** 2) @ widths)
    l2_error = float(np.sqrt(max(err_sq, 0.0)))
    norm_wp = float(np.sqrt(max((wv ** 2) @ widths, 1e-300)))
    return omega, l2_error, l2_error / norm_wp


def gap_lipschitz(M: float, e_l2: float) -> float:
    """Worst-case targeting gap for an M-Lipschitz effect curve."""
    if M < 0 or e_l2 < 0:
        raise InputError("M and the error norm must be nonnegative")
    return M * e_l2 / (2.0 * np.sqrt(3.0))


def gap_lp(
    wald,
    hs,
    e: WeightFn,
    y_max: float,
    monotone_response: bool = False,
    monotone_selection: bool = False,
) -> tuple[float, float]:
    """Bounds on the targeting gap over piecewise-constant response curves.

    Optimizes integral of (m1 - m0) against the weighting error e subject to
    each instrument reproducing its Wald value, 0 <= m_d <= y_max, and the
    optional shape restrictions.
    """
    wald = np.asarray(wald, dtype=float)
    grid = merge_breaks(*hs, e)
    widths = np.diff(grid)
    K = widths.size
    H = np.stack([h.on_grid(grid).values for h in hs])
    ev = e.on_grid(grid).values

    # Variables: m1 (K) then m0 (K); objective integrates (m1-m0) * e.
    obj = np.r_[ev * widths, -(ev * widths)]
    a_eq = np.hstack([H * widths, -(H * widths)])
    b_eq = wald
    rows_ub, rhs_ub = [], []
    if monotone_response:
        for j in range(K):
            r = np.zeros(2 * K)
            r[K + j] = 1.0
            r[j] = -1.0
            rows_ub.append(r)      # m0 - m1 <= 0
            rhs_ub.append(0.0)
    if monotone_selection:
        for j in range(K - 1):
            r = np.zeros(2 * K)    # (m1-m0)[j+1] <= (m1-m0)[j]
            r[j + 1], r[K + j + 1] = 1.0, -1.0
            r[j], r[K + j] = -1.0, 1.0
            rows_ub.append(r)
            rhs_ub.append(0.0)
    a_ub = np.array(rows_ub) if rows_ub else None
    b_ub = np.array(rhs_ub) if rhs_ub else None
    lo = np.zeros(2 * K)
    hi = np.full(2 * K, float(y_max))

    out = []
    for sign in (1.0, -1.0):
        res = lp_solve(LpProblem(c=sign * obj, a_eq=a_eq, b_eq=b_eq,
                                 a_ub=a_ub, b_ub=b_ub, lo=lo, hi=hi))
        if res.status != "optimal":
            raise InfeasibleError(f"gap bound LP status: {res.status}")
        out.append(sign * res.value)
    lo_v, hi_v = min(out), max(out)
    return lo_v, hi_v


def gmm_mte_estimand(weights, hs, mte: WeightFn) -> float:
    """Exact integral of the effect curve against the composite weight."""
    hbar = composite_weight(weights, hs)
    return inner(hbar, mte)
