"""Monotone compliance types and the population Wald/type-weight algebra.

A compliance type is a nondecreasing map t: {0,1}^L -> {0,1}, encoded as a
2^L-bit mask whose bit i gives t at the configuration with z_l = (i >> l) & 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CapacityError, RelevanceError

MAX_INSTRUMENTS = 5  # Dedekind growth: 7581 monotone maps at L=5 is the cap


@dataclass(frozen=True)
class TypeTable:
    L: int
    masks: tuple[int, ...]                 # lexicographically sorted bitmasks
    theta: np.ndarray | None = None        # type probabilities
    late: np.ndarray | None = None         # per-type average effects

    def __len__(self) -> int:
        return len(self.masks)

    def takeup(self) -> np.ndarray:
        """T x 2^L binary matrix: row t gives t(z) over all configurations."""
        idx = np.arange(2 ** self.L)
        masks = np.asarray(self.masks, dtype=np.int64)[:, None]  # 2^L <= 32 bits
        return ((masks >> idx) & 1).astype(float)

    def with_annotations(self, theta, late=None) -> "TypeTable":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (len(self.masks),):
            raise ValueError("theta length must match type count")
        if abs(theta.sum() - 1.0) > 1e-10 or (theta < -1e-15).any():
            raise ValueError("theta must be a probability vector")
        if late is not None:
            late = np.asarray(late, dtype=float)
            if late.shape != (len(self.masks),):
                raise ValueError("late length must match type count")
        return TypeTable(self.L, self.masks, theta, late)


@dataclass(frozen=True)
class InstrumentJoint:
    """Probability distribution over {0,1}^L, indexed by the bit encoding."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        m = probs.shape[0]
        if m & (m - 1) or m == 0:
            raise ValueError("support size must be a power of two")
        if (probs < -1e-15).any() or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")

    @property
    def L(self) -> int:
        return self.probs.shape[0].bit_length() - 1

    def marginal(self, ell: int) -> float:
        idx = np.arange(self.probs.shape[0])
        return float(self.probs[(idx >> ell) & 1 == 1].sum())

    def conditional_rest(self, ell: int, value: int) -> np.ndarray:
        """Distribution of Z_{-ell} (bits repacked) given Z_ell = value."""
        m = self.probs.shape[0]
        idx = np.arange(m)
        keep = ((idx >> ell) & 1) == value
        mass = self.probs[keep].sum()
        if mass <= 0:
            raise RelevanceError(f"conditioning event Z_{ell}={value} has zero probability")
        low = idx[keep] & ((1 << ell) - 1)
        high = idx[keep] >> (ell + 1)
        packed = low | (high << ell)
        out = np.zeros(m // 2)
        out[packed] = self.probs[keep] / mass
        return out


@lru_cache(maxsize=None)
def _monotone_masks(L: int) -> tuple[int, ...]:
    if L == 0:
        return (0, 1)
    half = 2 ** (L - 1)
    prev = _monotone_masks(L - 1)
    out = []
    for f0 in prev:
        for f1 in prev:
            if f0 & ~f1:       # violates f0 <= f1 pointwise
                continue
            out.append(f0 | (f1 << half))
    return tuple(sorted(out))


def enumerate_monotone_types(L: int) -> TypeTable:
    """All nondecreasing maps {0,1}^L -> {0,1}, in bitmask order."""
    if not 1 <= L <= MAX_INSTRUMENTS:
        raise CapacityError(f"type enumeration supports 1 <= L <= {MAX_INSTRUMENTS}")
    return TypeTable(L=L, masks=_monotone_masks(L))


def _insert_bit(rest_idx: np.ndarray, ell: int, value: int) -> np.ndarray:
    low = rest_idx & ((1 << ell) - 1)
    high = rest_idx >> ell
    return low | (value << ell) | (high << (ell + 1))


def type_weights(tt: TypeTable, zj: InstrumentJoint, ell: int):
    """Per-type Wald weights alpha_t(ell) and their direct/indirect split.

    phi_t = sum over z_{-ell} of t(1, z_{-ell}) q1 - t(0, z_{-ell}) q0, with
    q1/q0 the conditionals of Z_{-ell} given Z_ell = 1/0.  Returns
    (alpha, phi_d, phi_i) with phi = phi_d + phi_i and alpha = theta*phi/pi.
    """
    if tt.theta is None:
        raise ValueError("TypeTable needs theta annotations")
    if tt.L != zj.L:
        raise ValueError("type table and joint dimension mismatch")
    q1 = zj.conditional_rest(ell, 1)
    q0 = zj.conditional_rest(ell, 0)
    rest = np.arange(2 ** (tt.L - 1)) if tt.L > 1 else np.array([0])
    idx1 = _insert_bit(rest, ell, 1)
    idx0 = _insert_bit(rest, ell, 0)
    take = tt.takeup()
    t1 = take[:, idx1]
    t0 = take[:, idx0]
    phi_d = (t1 - t0) @ q1
    phi_i = t0 @ (q1 - q0)
    phi = phi_d + phi_i
    pi = float(tt.theta @ phi)
    if pi == 0.0:
        raise RelevanceError(f"instrument {ell} has zero first stage under this type table")
    alpha = tt.theta * phi / pi
    return alpha, phi_d, phi_i


def composite_type_weights(alpha: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """psi_t(omega) = sum_ell omega_ell alpha_t(ell); alpha is L x T."""
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-10:
        raise ValueError("weights must sum to 1")
    return weights @ np.asarray(alpha, dtype=float)


def wald_from_types(tt: TypeTable, zj: InstrumentJoint):
    """Population Wald_l = sum_t alpha_t(l) * LATE_t; returns (wald, pi, rho)."""
    if tt.late is None:
        raise ValueError("TypeTable needs late annotations")
    L = tt.L
    wald = np.empty(L)
    pi = np.empty(L)
    for ell in range(L):
        alpha, phi_d, phi_i = type_weights(tt, zj, ell)
        phi = phi_d + phi_i
        pi[ell] = tt.theta @ phi
        wald[ell] = alpha @ tt.late
    rho = wald * pi
    return wald, pi, rho


def alpha_matrix(tt: TypeTable, zj: InstrumentJoint) -> np.ndarray:
    """L x T matrix of alpha_t(ell) across instruments."""
    return np.stack([type_weights(tt, zj, ell)[0] for ell in range(tt.L)])


@dataclass(frozen=True)
class PrdReport:
    passed: bool
    margins: np.ndarray          # per instrument: worst P(U|1) - P(U|0)
    worst_ell: int
    worst_set_mask: int          # upper set of {0,1}^{L-1} as a bitmask
    worst_margin: float
    tolerance: float
    skipped: tuple[int, ...] = ()  # instruments with a degenerate margin


def empirical_joint(z: np.ndarray) -> InstrumentJoint:
    """Cell-frequency estimate of the instrument joint from binary rows."""
    z = np.asarray(z)
    n, L = z.shape
    idx = (z.astype(int) * (1 << np.arange(L))).sum(axis=1)
    probs = np.bincount(idx, minlength=2 ** L) / n
    return InstrumentJoint(probs)


def prd_check(zj: InstrumentJoint | np.ndarray, tolerance: float = 1e-9) -> PrdReport:
    """Positive-regression-dependence check via upper-set dominance.

    For each ell and every upper set U of {0,1}^{L-1}, require
    P(Z_{-ell} in U | Z_ell=1) >= P(Z_{-ell} in U | Z_ell=0) - tolerance.
    """
    if not isinstance(zj, InstrumentJoint):
        zj = empirical_joint(zj)
    L = zj.L
    if L > MAX_INSTRUMENTS:
        raise CapacityError(f"exact PRD check supports L <= {MAX_INSTRUMENTS}")
    upper_sets = _monotone_masks(L - 1)
    m = 2 ** (L - 1)
    idx = np.arange(m)
    margins = np.full(L, np.inf)
    worst = (0, 0, np.inf)
    skipped = []
    for ell in range(L):
        p = zj.marginal(ell)
        if p <= 0.0 or p >= 1.0:
            skipped.append(ell)
            margins[ell] = np.nan
            continue
        q1 = zj.conditional_rest(ell, 1)
        q0 = zj.conditional_rest(ell, 0)
        for mask in upper_sets:
            member = ((mask >> idx) & 1).astype(bool)
            margin = q1[member].sum() - q0[member].sum()
            if margin < margins[ell]:
                margins[ell] = margin
            if margin < worst[2]:
                worst = (ell, mask, margin)
    checked = [m for m in margins if not np.isnan(m)]
    passed = bool(checked) and min(checked) >= -tolerance
    return PrdReport(
        passed=passed,
        margins=margins,
        worst_ell=worst[0],
        worst_set_mask=worst[1],
        worst_margin=float(worst[2]) if np.isfinite(worst[2]) else 0.0,
        tolerance=tolerance,
        skipped=tuple(skipped),
    )
