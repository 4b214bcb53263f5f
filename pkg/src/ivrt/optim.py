"""Small dense solvers: simplex-constrained QP, primal simplex LP,
damped scalar fixed-point iteration, and SPD linear solves.

Problem sizes throughout the package are tiny (L instruments, K resistance
intervals), so everything here is dense and exact rather than clever.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, InputError, NumericalError


@dataclass
class QpProblem:
    """min x'Qx + c'x  over the simplex, optionally with extra rows A x = b."""

    Q: np.ndarray
    c: np.ndarray | None = None
    extra_eq: tuple[np.ndarray, np.ndarray] | None = None  # (A, b); A may be 1-D

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        L = self.Q.shape[0]
        if self.Q.shape != (L, L):
            raise InputError("Q must be square")
        if self.c is None:
            self.c = np.zeros(L)
        self.c = np.asarray(self.c, dtype=float)
        if self.extra_eq is not None:
            a, b = self.extra_eq
            a = np.atleast_2d(np.asarray(a, dtype=float))
            b = np.atleast_1d(np.asarray(b, dtype=float))
            self.extra_eq = (a, b)


@dataclass
class LpProblem:
    """min c'x subject to A_eq x = b_eq, A_ub x <= b_ub, lo <= x <= hi."""

    c: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    lo: np.ndarray | None = None  # defaults to 0
    hi: np.ndarray | None = None  # defaults to +inf


@dataclass
class LpResult:
    x: np.ndarray | None
    value: float
    status: str  # optimal | infeasible | unbounded


def _eq_rows(p: QpProblem) -> tuple[np.ndarray, np.ndarray]:
    """Stack the simplex sum row with any extra equality rows."""
    L = p.Q.shape[0]
    rows = [np.ones(L)]
    rhs = [1.0]
    if p.extra_eq is not None:
        a, b = p.extra_eq
        rows.extend(list(a))
        rhs.extend(list(b))
    return np.array(rows), np.array(rhs)


def _feasible_start(p: QpProblem) -> np.ndarray:
    """Find a feasible simplex point; handles the single-extra-row case directly."""
    L = p.Q.shape[0]
    if p.extra_eq is None:
        return np.full(L, 1.0 / L)
    a, b = p.extra_eq
    if a.shape[0] == 1:
        av, bv = a[0], b[0]
        lo_i, hi_i = int(np.argmin(av)), int(np.argmax(av))
        lo_v, hi_v = av[lo_i], av[hi_i]
        if bv < lo_v - 1e-9 or bv > hi_v + 1e-9:
            raise InfeasibleError(
                f"equality target {bv} outside attainable range [{lo_v}, {hi_v}]"
            )
        x = np.zeros(L)
        if hi_v - lo_v < 1e-15:
            return np.full(L, 1.0 / L)
        t = min(max((bv - lo_v) / (hi_v - lo_v), 0.0), 1.0)
        x[lo_i] = 1.0 - t
        x[hi_i] += t
        return x
    # General case: phase-1 LP.
    A, rhs = _eq_rows(p)
    res = lp_solve(LpProblem(c=np.zeros(L), a_eq=A, b_eq=rhs))
    if res.status != "optimal":
        raise InfeasibleError("extra equality constraints infeasible on the simplex")
    return np.clip(res.x, 0.0, None)


def simplex_qp(
    p: QpProblem,
    tol: float = 1e-12,
    x0: np.ndarray | None = None,
    max_iter: int = 500,
) -> tuple[np.ndarray, float, list[int]]:
    """Active-set minimization of x'Qx + c'x over the simplex (plus extra
    equality rows if given).

    Returns (x, value, active_support). Exact equality-constrained solves on
    each face; a tiny ridge is applied inside face solves when the reduced
    Hessian is singular.
    """
    Q = 0.5 * (p.Q + p.Q.T)
    c = p.c
    L = Q.shape[0]
    E, f = _eq_rows(p)
    x = np.asarray(x0, dtype=float).copy() if x0 is not None else _feasible_start(p)
    if np.any(x < -1e-9) or np.max(np.abs(E @ x - f)) > 1e-7:
        raise InputError("x0 is not feasible")
    x = np.clip(x, 0.0, None)
    working = set(np.where(x <= 1e-14)[0].tolist())

    ridge = 1e-12 * (np.trace(Q) / L + 1.0)
    for _ in range(max_iter):
        free = [i for i in range(L) if i not in working]
        g = 2.0 * Q @ x + c
        Ef = E[:, free]
        # Null-space step on the current face.
        _, s, vt = np.linalg.svd(Ef, full_matrices=True)
        rank = int(np.sum(s > 1e-12 * max(1.0, s[0] if len(s) else 1.0)))
        Z = vt[rank:].T  # len(free) x (len(free)-rank)
        if Z.shape[1] == 0:
            d = np.zeros(L)
        else:
            H = Z.T @ (2.0 * Q[np.ix_(free, free)]) @ Z
            rhs = -Z.T @ g[free]
            # Cancellation noise on a flat face must read as exactly zero,
            # otherwise the ridge turns it into a never-ending micro-step.
            rhs[np.abs(rhs) < 1e-11 * max(1.0, float(np.max(np.abs(g))))] = 0.0
            try:
                z = np.linalg.solve(H + ridge * np.eye(H.shape[0]), rhs)
            except np.linalg.LinAlgError:
                raise NumericalError("face solve failed")
            d = np.zeros(L)
            d[free] = Z @ z
        if np.max(np.abs(d)) <= tol * max(1.0, np.max(np.abs(x))):
            # Check multipliers on the working set.
            mu, *_ = np.linalg.lstsq(Ef.T, -g[free], rcond=None)
            sigma = {j: g[j] + E[:, j] @ mu for j in working}
            scale = max(1.0, float(np.max(np.abs(g))))
            if all(v >= -1e-9 * scale for v in sigma.values()):
                val = float(x @ Q @ x + c @ x)
                support = [i for i in range(L) if x[i] > 1e-12]
                return x, val, support
            j = min(sigma, key=sigma.get)
            working.remove(j)
            continue
        # Ratio test against x >= 0.
        alpha = 1.0
        block = None
        for i in free:
            if d[i] < -1e-15:
                a_i = -x[i] / d[i]
                if a_i < alpha - 1e-15:
                    alpha = max(a_i, 0.0)
                    block = i
        x = x + alpha * d
        x = np.clip(x, 0.0, None)
        if block is not None and alpha < 1.0:
            working.add(block)
    raise NumericalError("simplex_qp did not converge")


# ---------------------------------------------------------------------------
# Dense primal simplex with Bland's rule.
# ---------------------------------------------------------------------------


def _to_standard_form(p: LpProblem):
    """Rewrite as min c'x, A x = b, x >= 0 with shifts for lower bounds,
    slack columns for <= rows and upper bounds, and splits for free lowers."""
    c = np.asarray(p.c, dtype=float)
    n = c.size
    lo = np.zeros(n) if p.lo is None else np.asarray(p.lo, dtype=float)
    hi = np.full(n, np.inf) if p.hi is None else np.asarray(p.hi, dtype=float)

    rows_eq = []
    rhs_eq = []
    if p.a_eq is not None:
        a = np.atleast_2d(np.asarray(p.a_eq, dtype=float))
        rows_eq.extend(list(a))
        rhs_eq.extend(list(np.atleast_1d(np.asarray(p.b_eq, dtype=float))))
    rows_ub = []
    rhs_ub = []
    if p.a_ub is not None:
        a = np.atleast_2d(np.asarray(p.a_ub, dtype=float))
        rows_ub.extend(list(a))
        rhs_ub.extend(list(np.atleast_1d(np.asarray(p.b_ub, dtype=float))))

    # Variable transform: x = lo + u (u >= 0) when lo finite, else x = u - v.
    split = ~np.isfinite(lo)
    n_u = n + int(split.sum())
    T = np.zeros((n, n_u))  # x = T @ u + shift
    shift = np.where(np.isfinite(lo), lo, 0.0)
    k = n
    for j in range(n):
        T[j, j] = 1.0
        if split[j]:
            T[j, k] = -1.0
            k += 1
    # Upper bounds -> ub rows in original coordinates.
    for j in range(n):
        if np.isfinite(hi[j]):
            r = np.zeros(n)
            r[j] = 1.0
            rows_ub.append(r)
            rhs_ub.append(hi[j])

    def tx(row):
        return np.asarray(row) @ T

    A_list, b_list = [], []
    for r, b in zip(rows_eq, rhs_eq):
        A_list.append(tx(r))
        b_list.append(b - float(np.asarray(r) @ shift))
    m_eq = len(A_list)
    n_slack = len(rows_ub)
    for i, (r, b) in enumerate(zip(rows_ub, rhs_ub)):
        row = np.concatenate([tx(r), np.zeros(n_slack)])
        row[n_u + i] = 1.0
        A_list.append(row)
        b_list.append(b - float(np.asarray(r) @ shift))
    width = n_u + n_slack
    A = np.zeros((len(A_list), width))
    for i, r in enumerate(A_list):
        A[i, : r.size] = r
    b = np.asarray(b_list, dtype=float)
    c_std = np.concatenate([c @ T, np.zeros(n_slack)])
    const = float(c @ shift)
    return A, b, c_std, const, T, shift, n_u, m_eq


def _pivot(T, basis, leave, enter):
    T[leave] /= T[leave, enter]
    for i in range(T.shape[0]):
        if i != leave and abs(T[i, enter]) > 0.0:
            T[i] -= T[i, enter] * T[leave]
    basis[leave] = enter


def _simplex_core(T, basis, c, ncols, max_iter=50000):
    """Primal simplex with Bland's rule on a canonical tableau.

    T is m x (ncols+1) with T[:, basis] = I and T[:, -1] = b >= 0.
    Mutates T/basis; returns (value, status).
    """
    m = T.shape[0]
    for _ in range(max_iter):
        cb = c[basis]
        red = c - cb @ T[:, :ncols]
        enter = -1
        for j in range(ncols):
            if red[j] < -1e-9:
                enter = j  # Bland: smallest eligible index
                break
        if enter < 0:
            return float(cb @ T[:, ncols]), "optimal"
        best = None
        for i in range(m):
            if T[i, enter] > 1e-11:
                key = (T[i, ncols] / T[i, enter], basis[i])
                if best is None or key < best[0:2]:
                    best = (key[0], key[1], i)
        if best is None:
            return -np.inf, "unbounded"
        _pivot(T, basis, best[2], enter)
    raise NumericalError("simplex iteration limit")


def lp_solve(p: LpProblem) -> LpResult:
    """Two-phase dense primal simplex with Bland's anti-cycling rule."""
    A, b, c, _, Tx, shift, n_u, _ = _to_standard_form(p)
    m, n = A.shape
    if m == 0:
        if (c < -1e-12).any():
            return LpResult(x=None, value=-np.inf, status="unbounded")
        x = shift.copy()
        return LpResult(x=x, value=float(np.asarray(p.c) @ x), status="optimal")
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    # Phase 1 tableau: [A | I | b], artificials basic.
    T = np.hstack([A, np.eye(m), b.reshape(-1, 1)])
    basis = list(range(n, n + m))
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    # Canonicalize reduced costs happen inside the core via cb @ T.
    v1, status = _simplex_core(T, basis, c1, n + m)
    if status != "optimal" or v1 > 1e-7:
        return LpResult(x=None, value=np.nan, status="infeasible")
    # Pivot remaining artificials out; drop redundant rows.
    keep = []
    for i in range(m):
        if basis[i] >= n:
            enter = next((j for j in range(n) if abs(T[i, j]) > 1e-9), None)
            if enter is None:
                continue  # redundant row
            _pivot(T, basis, i, enter)
        keep.append(i)
    T = T[keep]
    basis = [basis[i] for i in keep]
    # Phase 2 on structural columns only.
    T2 = np.hstack([T[:, :n], T[:, -1:]])
    v2, status = _simplex_core(T2, basis, c, n)
    if status != "optimal":
        return LpResult(x=None, value=v2, status=status)
    xs = np.zeros(n)
    xs[basis] = T2[:, n]
    u = xs[:n_u]
    x = Tx @ u + shift
    return LpResult(x=x, value=float(np.asarray(p.c, dtype=float) @ x), status="optimal")


def fixed_point(
    fn,
    start: float,
    tol: float = 1e-10,
    max_iter: int = 200,
    damping: float = 1.0,
) -> tuple[float, int, float, bool]:
    """Damped iteration x <- (1-d)x + d*fn(x); returns (x, iters, residual, converged)."""
    x = float(start)
    for it in range(1, max_iter + 1):
        fx = fn(x)
        if not np.isfinite(fx):
            raise NumericalError(f"map returned non-finite value at x={x}")
        x_new = (1.0 - damping) * x + damping * fx
        if abs(x_new - x) <= tol:
            x = x_new
            resid = abs(fn(x) - x)
            return x, it, resid, resid <= max(tol, 1e-9)
        x = x_new
    return x, max_iter, abs(fn(x) - x), False


def scan_fixed_points(fn, lo: float, hi: float, grid: int = 512) -> list[float]:
    """Bisect sign changes of fn(x) - x on [lo, hi]; returns all roots found."""
    xs = np.linspace(lo, hi, grid)
    gs = np.array([fn(x) - x for x in xs])
    roots = []
    for i in range(grid - 1):
        a, b = xs[i], xs[i + 1]
        ga, gb = gs[i], gs[i + 1]
        if ga == 0.0:
            roots.append(a)
            continue
        if ga * gb < 0:
            for _ in range(80):
                m = 0.5 * (a + b)
                gm = fn(m) - m
                if ga * gm <= 0:
                    b = m
                else:
                    a, ga = m, gm
            roots.append(0.5 * (a + b))
    # Dedup near-identical roots.
    out = []
    for r in roots:
        if not out or abs(r - out[-1]) > 1e-8 * max(1.0, abs(r)):
            out.append(r)
    return out


def spd_solve(A: np.ndarray, B: np.ndarray, ridge_budget: float = 1e-6) -> np.ndarray:
    """Solve A X = B for symmetric positive definite A, with a small ridge
    retry for nearly singular inputs."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if np.max(np.abs(A - A.T)) > 1e-8 * max(1.0, np.max(np.abs(A))):
        raise NumericalError("matrix is not symmetric")
    scale = np.trace(A) / A.shape[0]
    delta = 0.0
    for _ in range(3):
        try:
            cf = np.linalg.cholesky(A + delta * np.eye(A.shape[0]))
            y = np.linalg.solve(cf, B)
            return np.linalg.solve(cf.T, y)
        except np.linalg.LinAlgError:
            delta = max(delta * 100.0, 1e-12 * scale)
            if delta > ridge_budget * scale:
                break
    raise NumericalError("matrix is not positive definite within ridge budget")


def psd_repair(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Clip negative eigenvalues to zero; returns (repaired, clip magnitude)."""
    A = 0.5 * (np.asarray(A, dtype=float) + np.asarray(A, dtype=float).T)
    w, V = np.linalg.eigh(A)
    clip = float(max(0.0, -w.min())) if w.size else 0.0
    w = np.clip(w, 0.0, None)
    return (V * w) @ V.T, clip
