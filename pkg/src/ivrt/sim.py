"""Synthetic data generators with exactly computable population targets, and
a seeded Monte Carlo harness.

Randomness uses the counter-based Philox generator (numpy's implementation,
4x64 with the documented round constants), so replication r of a run with
seed s is the independent stream keyed by (s << 64) + r regardless of how
many replications run or in what order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compliance import InstrumentJoint
from .data import Dataset, center
from .errors import InputError, RelevanceError
from .gmm import egmm, tsls
from .moments import gamma_wald, summarize
from .mte import WeightFn, PropensityModel, propensity_model
from .optim import fixed_point, spd_solve
from .rt import csw_weights, ew_weights, rt_estimate


def _rng(seed: int, rep: int | None = None) -> np.random.Generator:
    key = (int(seed) << 64) + rep if rep is not None else int(seed)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Latent-index DGP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentDgpSpec:
    joint: InstrumentJoint
    p_of_z: np.ndarray               # propensity per instrument configuration
    mte: WeightFn                    # conditional mean effect at resistance u
    noise_scale: float = 0.0         # SD of the idiosyncratic gain
    baseline_sd: float = 1.0         # SD of the untreated outcome

    def __post_init__(self):
        p = np.asarray(self.p_of_z, dtype=float)
        if p.shape != self.joint.probs.shape:
            raise InputError("p_of_z must cover every instrument configuration")
        object.__setattr__(self, "p_of_z", p)

    @property
    def L(self) -> int:
        return self.joint.L

    def propensity(self) -> PropensityModel:
        return propensity_model(self.joint, self.p_of_z)


def latent_sample(spec: LatentDgpSpec, n: int, seed: int, rep: int | None = None) -> Dataset:
    rng = _rng(seed, rep)
    m = spec.joint.probs.size
    idx = rng.choice(m, size=n, p=spec.joint.probs / spec.joint.probs.sum())
    z = ((idx[:, None] >> np.arange(spec.L)) & 1).astype(float)
    u = rng.uniform(size=n)
    d = (u <= spec.p_of_z[idx]).astype(float)
    gain = spec.mte(u) + spec.noise_scale * rng.standard_normal(n)
    y0 = spec.baseline_sd * rng.standard_normal(n)
    return Dataset(y=y0 + gain * d, d=d, z=z)


def _mte_partial_integrals(mte: WeightFn, upper: np.ndarray):
    """∫_0^t of 1, MTE, MTE^2 for each t in `upper` (exact, step function)."""
    cuts = mte.breaks
    w = np.diff(cuts)
    v = mte.values
    cum1 = np.r_[0.0, np.cumsum(w * v)]
    cum2 = np.r_[0.0, np.cumsum(w * v ** 2)]
    j = np.clip(np.searchsorted(cuts, upper, side="left") - 1, 0, v.size - 1)
    extra = upper - cuts[j]
    return upper, cum1[j] + extra * v[j], cum2[j] + extra * v[j] ** 2


@dataclass(frozen=True)
class PopulationTargets:
    wald: np.ndarray
    gamma: np.ndarray
    pi: np.ndarray
    sigma_z: np.ndarray
    gamma_wald: np.ndarray
    lambda_tsls: np.ndarray
    beta_tsls: float
    lambda_egmm: np.ndarray
    beta_egmm: float
    egmm_residual: float
    beta_csw: float
    beta_ew: float
    omega_of_beta: object = field(repr=False, default=None)  # callable beta -> L x L


def _targets_from_moments(gamma, g0, sigma_z, omega_of_beta, wald, gamma_wald_values):
    L = gamma.size
    w_tsls = spd_solve(sigma_z, np.eye(L))
    lam_tsls = gamma * (w_tsls @ gamma) / float(gamma @ w_tsls @ gamma)
    beta_tsls = float(lam_tsls @ wald)

    def t_map(beta):
        a = spd_solve(omega_of_beta(beta), gamma)
        return float(a @ g0) / float(gamma @ a)

    beta_egmm, _, residual, converged = fixed_point(t_map, beta_tsls, tol=1e-13)
    if not converged:
        raise RelevanceError("population efficient-weighting fixed point did not converge")
    a = spd_solve(omega_of_beta(beta_egmm), gamma)
    lam_egmm = gamma * a / float(gamma @ a)
    beta_csw = float((gamma / gamma.sum()) @ wald)
    beta_ew = float(wald.mean())
    return PopulationTargets(
        wald=wald, gamma=gamma, pi=gamma / np.diag(sigma_z), sigma_z=sigma_z,
        gamma_wald=gamma_wald_values,
        lambda_tsls=lam_tsls, beta_tsls=beta_tsls,
        lambda_egmm=lam_egmm, beta_egmm=beta_egmm, egmm_residual=residual,
        beta_csw=beta_csw, beta_ew=beta_ew, omega_of_beta=omega_of_beta,
    )


def latent_targets(spec: LatentDgpSpec) -> PopulationTargets:
    """Exact population moments of the latent-index design (finite support)."""
    probs = spec.joint.probs
    m = probs.size
    L = spec.L
    zmat = ((np.arange(m)[:, None] >> np.arange(L)) & 1).astype(float)
    p_marg = probs @ zmat
    zc = zmat - p_marg
    i0, i1, i2 = _mte_partial_integrals(spec.mte, spec.p_of_z)
    ey_z = i1                                   # E[Y | z], baseline mean 0
    gamma = (probs * spec.p_of_z) @ zc
    g0 = (probs * ey_z) @ zc
    sigma_z = (zc * probs[:, None]).T @ zc
    if np.any(np.abs(gamma) < 1e-14):
        raise RelevanceError("an instrument does not move treatment in this design")
    wald = g0 / gamma
    s0, snu = spec.baseline_sd ** 2, spec.noise_scale ** 2

    def omega_of_beta(beta):
        cond = s0 + i2 - 2.0 * beta * i1 + (beta ** 2 + snu) * i0
        return (zc * (probs * cond)[:, None]).T @ zc

    # Wald covariance: residuals (Y - E[Y]) - Wald_l (D - E[D]).
    ey = float(probs @ ey_z)
    ed = float(probs @ spec.p_of_z)
    gw = np.empty((L, L))
    for l in range(L):
        for k in range(l, L):
            wl, wk = wald[l], wald[k]
            mu_l, mu_k = ey - wl * ed, ey - wk * ed
            eadl = i1 - wl * i0
            eadk = i1 - wk * i0
            eaakd = i2 - (wl + wk) * i1 + (wl * wk + snu) * i0
            cond = s0 + eaakd - mu_k * eadl - mu_l * eadk + mu_l * mu_k
            gw[l, k] = gw[k, l] = float((probs * cond) @ (zc[:, l] * zc[:, k])) / (gamma[l] * gamma[k])
    return _targets_from_moments(gamma, g0, sigma_z, omega_of_beta, wald, gw)


# ---------------------------------------------------------------------------
# Group-randomized DGP (multinomial groups, within-group Bernoulli treatment)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StarDgpSpec:
    shares: np.ndarray
    p: np.ndarray                    # within-group treatment probability
    late: np.ndarray
    sigma_y0_sq: np.ndarray
    sigma_tau_sq: np.ndarray

    def __post_init__(self):
        for name in ("shares", "p", "late", "sigma_y0_sq", "sigma_tau_sq"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if abs(self.shares.sum() - 1.0) > 1e-10 or (self.shares <= 0).any():
            raise InputError("group shares must be positive and sum to 1")
        if (self.sigma_y0_sq < 0).any() or (self.sigma_tau_sq < 0).any():
            raise InputError("variances must be nonnegative")
        if ((self.p <= 0) | (self.p >= 1)).any():
            raise InputError("treatment probabilities must be interior")

    @property
    def L(self) -> int:
        return self.shares.size


def star_sample(spec: StarDgpSpec, n: int, seed: int, rep: int | None = None) -> Dataset:
    """Group-interaction instruments z_l = T * 1{group = l}, with group labels
    carried so centering runs the within-group demeaning."""
    if n < 10 * spec.L:
        raise InputError("sample too small for the group design")
    rng = _rng(seed, rep)
    g = rng.choice(spec.L, size=n, p=spec.shares)
    t = (rng.uniform(size=n) < spec.p[g]).astype(float)
    counts = np.bincount(g, minlength=spec.L)
    if counts.min() < 2:
        raise InputError(f"group {int(np.argmin(counts))} drew fewer than 2 rows")
    y0 = np.sqrt(spec.sigma_y0_sq[g]) * rng.standard_normal(n)
    tau = spec.late[g] + np.sqrt(spec.sigma_tau_sq[g]) * rng.standard_normal(n)
    z = t[:, None] * (g[:, None] == np.arange(spec.L)).astype(float)
    return Dataset(y=y0 + tau * t, d=t, z=z, group=g)


def star_targets(spec: StarDgpSpec) -> PopulationTargets:
    """Exact population moments under within-group demeaning.

    The instruments are disjoint indicators, so all second-moment matrices
    are diagonal, the first stage is 1 for every instrument, and each Wald
    equals the group mean effect.
    """
    s, p, late = spec.shares, spec.p, spec.late
    v = s * p * (1.0 - p)                        # Var of centered instrument
    gamma = v.copy()
    wald = late.copy()
    g0 = gamma * wald
    sigma_z = np.diag(v)
    base = spec.sigma_y0_sq + (1.0 - p) * spec.sigma_tau_sq
    kappa = 1.0 - 3.0 * p * (1.0 - p)

    def omega_of_beta(beta):
        return np.diag(v * (base + kappa * (late - beta) ** 2))

    gw = np.diag(base / v)
    return _targets_from_moments(gamma, g0, sigma_z, omega_of_beta, wald, gw)


def calibrate_sigma_tau(sigma_y1_sq, sigma_y0_sq) -> np.ndarray:
    """Effect-dispersion calibration: excess treated-outcome variance, floored at 0."""
    return np.maximum(0.0, np.asarray(sigma_y1_sq, float) - np.asarray(sigma_y0_sq, float))


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McReport:
    metrics: dict                    # estimator -> {target, bias, sd, rmse, coverage, ...}
    replications: int
    n: int
    seed: int
    trim: tuple[float, float]
    failures: dict


def default_estimators(L: int) -> dict:
    def _rt(weight_fn):
        def run(ds: Dataset) -> dict:
            cd = center(ds)
            ms = summarize(cd)
            gw = gamma_wald(cd, ms)
            res = rt_estimate(ms, gw, weight_fn(ms))
            return {"beta": res.beta, "se": res.se}
        return run

    def _tsls(ds: Dataset) -> dict:
        cd = center(ds)
        ms = summarize(cd)
        res = tsls(ms, cd)
        return {"beta": res.beta, "se": res.se}

    def _egmm(ds: Dataset) -> dict:
        cd = center(ds)
        ms = summarize(cd)
        res = egmm(ms, cd, mode="iterated")
        return {"beta": res.beta, "se": res.se, "j_pvalue": res.j_pvalue}

    return {
        "tsls": _tsls,
        "egmm": _egmm,
        "rt_ew": _rt(lambda ms: ew_weights(ms.L)),
        "rt_csw": _rt(lambda ms: csw_weights(ms)),
    }


def monte_carlo(
    sampler,
    estimators: dict,
    targets: dict,
    R: int,
    n: int,
    seed: int,
    trim: tuple[float, float] = (1.0, 99.0),
    alpha: float = 0.05,
) -> McReport:
    """Run R seeded replications and summarize each estimator against its own
    population target.

    sampler(n, seed, rep) must return a Dataset; estimators map names to
    callables returning {"beta", "se"[, "j_pvalue"]}; metrics are computed on
    the percentile-trimmed replication sample.
    """
    if R < 2:
        raise InputError("need at least 2 replications")
    draws = {name: [] for name in estimators}
    failures = {name: 0 for name in estimators}
    for rep in range(R):
        ds = sampler(n, seed, rep)
        for name, est in estimators.items():
            try:
                draws[name].append(est(ds))
            except Exception:
                failures[name] += 1
    crit = _normal_quantile(1.0 - alpha / 2.0)
    metrics = {}
    for name, rows in draws.items():
        if not rows:
            metrics[name] = {"target": float(targets[name]), "kept": 0}
            continue
        beta = np.array([r["beta"] for r in rows])
        se = np.array([r["se"] for r in rows])
        lo, hi = np.percentile(beta, trim)
        keep = (beta >= lo) & (beta <= hi)
        b = beta[keep]
        target = float(targets[name])
        bias = float(b.mean() - target)
        sd = float(b.std(ddof=0))
        entry = {
            "target": target,
            "bias": bias,
            "sd": sd,
            "rmse": float(np.sqrt(bias ** 2 + sd ** 2)),
            # trimming is for the moment metrics; coverage counts every draw
            "coverage": float(np.mean(np.abs(beta - target) <= crit * se)),
            "kept": int(keep.sum()),
        }
        pvals = [r.get("j_pvalue") for r in rows]
        if all(p is not None and np.isfinite(p) for p in pvals) and pvals:
            entry["j_rejection_rate"] = float(np.mean(np.asarray(pvals) < alpha))
            entry["j_mean_pvalue"] = float(np.mean(pvals))
        metrics[name] = entry
    return McReport(metrics=metrics, replications=R, n=n, seed=seed,
                    trim=(float(trim[0]), float(trim[1])), failures=failures)


def _normal_quantile(q: float) -> float:
    from scipy.special import ndtri

    return float(ndtri(q))
