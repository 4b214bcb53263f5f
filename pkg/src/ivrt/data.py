"""Dataset ingestion, validation, and (grouped) centering.

Everything downstream consumes :class:`CenteredDataset`; centering subtracts
global means, or within-group means when group labels are supplied (the
fixed-effects / FWL route).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import InputError, RelevanceError, SchemaError

EIG_TOL_FACTOR = 1e-10  # relative to trace, for Sigma_Z positive definiteness


@dataclass(frozen=True)
class Dataset:
    """Raw observations: outcome y, binary treatment d, n x L binary z."""

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    cluster: np.ndarray | None = None
    cell: np.ndarray | None = None
    group: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float))
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        object.__setattr__(self, "z", z)
        n, L = z.shape
        if self.y.shape != (n,) or self.d.shape != (n,):
            raise SchemaError("y, d, z row counts disagree")
        if n < L + 2:
            raise SchemaError(f"need n >= L+2 (n={n}, L={L})")
        for name, arr in (("d", self.d), ("z", z)):
            if not np.isin(arr, (0.0, 1.0)).all():
                bad = np.argwhere(~np.isin(arr, (0.0, 1.0)))
                row = int(bad[0][0])
                raise SchemaError(f"non-binary value in {name!r} at row {row}")
        if np.isnan(self.y).any():
            raise SchemaError("missing values in y")
        for name in ("cluster", "cell", "group"):
            lab = getattr(self, name)
            if lab is not None:
                lab = np.asarray(lab)
                if lab.shape != (n,):
                    raise SchemaError(f"{name} labels must have length n")
                object.__setattr__(self, name, lab)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def L(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class CenteredDataset:
    """FWL-centered data: columns of z_c sum to zero (within each group)."""

    y_c: np.ndarray
    d_c: np.ndarray
    z_c: np.ndarray
    p_hat: np.ndarray
    cluster: np.ndarray | None = None
    cell: np.ndarray | None = None
    group: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.y_c.shape[0]

    @property
    def L(self) -> int:
        return self.z_c.shape[1]


@dataclass
class ValidationReport:
    pi_hat: np.ndarray
    weak: list[int]                  # instruments with pi_hat <= 0 (after any flips)
    flipped: list[int]               # instruments sign-flipped under auto_flip
    sigma_z_min_eig: float
    sigma_z_singular: bool
    centered: CenteredDataset = field(repr=False)

    @property
    def ok(self) -> bool:
        return not self.weak and not self.sigma_z_singular


def load_dataset(
    source,
    schema: dict,
    drop_missing: bool = False,
) -> Dataset:
    """Read a CSV file or stream into a Dataset.

    schema maps roles to column names: {"y": ..., "d": ..., "z": [...],
    "cluster": ..., "cell": ..., "group": ...} (the last three optional).
    """
    try:
        df = pd.read_csv(source)
    except pd.errors.EmptyDataError:
        raise SchemaError("empty input file")
    if df.empty:
        raise SchemaError("empty input file")
    cols = [schema["y"], schema["d"], *schema["z"]]
    for opt in ("cluster", "cell", "group"):
        if schema.get(opt):
            cols.append(schema[opt])
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise SchemaError(f"columns not found: {missing}")
    n_before = len(df)
    if drop_missing:
        df = df.dropna(subset=cols)
    dropped = n_before - len(df)
    nan_mask = df[cols].isna()
    if nan_mask.any().any():
        row = int(np.argwhere(nan_mask.values)[0][0])
        raise SchemaError(f"missing value at row {row}")

    def labels(role):
        col = schema.get(role)
        if not col:
            return None
        codes, _ = pd.factorize(df[col])
        return codes.astype(np.int64)

    # Binary checks with row indices for a useful error message.
    for col in [schema["d"], *schema["z"]]:
        vals = df[col].to_numpy()
        bad = ~np.isin(vals, (0, 1))
        if bad.any():
            row = int(np.argmax(bad))
            raise SchemaError(f"non-binary value {vals[row]!r} in column {col!r} at row {row}")

    ds = Dataset(
        y=df[schema["y"]].to_numpy(dtype=float),
        d=df[schema["d"]].to_numpy(dtype=float),
        z=df[list(schema["z"])].to_numpy(dtype=float),
        cluster=labels("cluster"),
        cell=labels("cell"),
        group=labels("group"),
    )
    object.__setattr__(ds, "dropped_rows", dropped)  # informational, for the CLI
    return ds


def _demean(x: np.ndarray, group: np.ndarray | None) -> np.ndarray:
    if group is None:
        return x - x.mean(axis=0)
    out = x.astype(float).copy()
    for g in np.unique(group):
        m = group == g
        out[m] = out[m] - out[m].mean(axis=0)
    return out


def center(ds: Dataset) -> CenteredDataset:
    """Subtract (group-wise) means from y, d, and each instrument column.

    p_hat is always the global instrument mean; a constant instrument column
    (p_hat in {0,1}) is a relevance failure.
    """
    if ds.group is not None:
        _, counts = np.unique(ds.group, return_counts=True)
        if counts.min() < 2:
            raise InputError("each group needs at least 2 rows for demeaning")
    p_hat = ds.z.mean(axis=0)
    for ell, p in enumerate(p_hat):
        if p <= 0.0 or p >= 1.0:
            raise RelevanceError(f"instrument {ell} is constant (p_hat={p})")
    return CenteredDataset(
        y_c=_demean(ds.y.reshape(-1, 1), ds.group)[:, 0],
        d_c=_demean(ds.d.reshape(-1, 1), ds.group)[:, 0],
        z_c=_demean(ds.z, ds.group),
        p_hat=p_hat,
        cluster=ds.cluster,
        cell=ds.cell,
        group=ds.group,
    )


def validate(cd: CenteredDataset, auto_flip: bool = False) -> ValidationReport:
    """Report-only relevance and rank checks on centered data.

    With auto_flip, instruments with negative first stage have their centered
    column negated (and p_hat mapped to 1-p), and the flip is recorded.
    """
    n = cd.n
    z_c = cd.z_c.copy()
    p_hat = cd.p_hat.copy()
    gamma = cd.d_c @ z_c / n
    var_z = (z_c ** 2).mean(axis=0)
    pi_hat = np.where(var_z > 0, gamma / np.where(var_z > 0, var_z, 1.0), 0.0)

    flipped = []
    if auto_flip:
        for ell in range(cd.L):
            if pi_hat[ell] < 0:
                z_c[:, ell] *= -1.0
                p_hat[ell] = 1.0 - p_hat[ell]
                pi_hat[ell] *= -1.0
                flipped.append(ell)

    sigma_z = z_c.T @ z_c / n
    eigs = np.linalg.eigvalsh(sigma_z)
    min_eig = float(eigs.min())
    singular = min_eig <= EIG_TOL_FACTOR * float(np.trace(sigma_z))
    weak = [int(ell) for ell in range(cd.L) if pi_hat[ell] <= 0]
    centered = replace(cd, z_c=z_c, p_hat=p_hat) if flipped else cd
    return ValidationReport(
        pi_hat=pi_hat,
        weak=weak,
        flipped=flipped,
        sigma_z_min_eig=min_eig,
        sigma_z_singular=bool(singular),
        centered=centered,
    )
