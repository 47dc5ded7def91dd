"""Construction and preprocessing of shift-share variables.

Covers the exposure inner product, the three-way decomposition of a
share-weighted aggregate, share completion with the fictitious zero shift,
small-denominator shift replacement, weighted residualization of shifts on
fixed effects and covariates, and leave-one-out shift estimation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._wls import wls_coefficients
from .data import Dataset, ShareMatrix, ShiftTable
from .errors import EstimationError, NumericalError, ShiftShareWarning, ValidationError

COMPLEMENT_ID = "__complement__"
REAL_SHIFT_COVARIATE = "p_real"
DEFAULT_REPLACE_THRESHOLD = 0.03


def build_exposure(shares: ShareMatrix, shifts: ShiftTable | np.ndarray) -> np.ndarray:
    """Exposure of each unit: the share-weighted sum of shift values."""
    values = shifts.values if isinstance(shifts, ShiftTable) else np.asarray(shifts, dtype=float)
    if values.shape != (shares.n_shifts,):
        raise ValidationError(
            f"dimension mismatch: {shares.n_shifts} share columns vs {values.shape[0]} shifts"
        )
    return shares.weights @ values


@dataclass(frozen=True)
class DecompositionResult:
    """Additive split of a share-weighted aggregate.

    ``expected`` holds initial shares times reference shifts, ``shock`` the
    initial-share-weighted deviations from the reference, ``share_change``
    the share drift times reference shifts, and ``interaction`` the
    share-drift-times-deviation cross term needed for the four pieces to sum
    to the observed aggregate exactly.
    """

    expected: np.ndarray
    shock: np.ndarray
    share_change: np.ndarray
    interaction: np.ndarray
    observed: np.ndarray
    reference_shifts: np.ndarray

    @property
    def components(self) -> tuple[np.ndarray, ...]:
        return (self.expected, self.shock, self.share_change, self.interaction)

    def total(self) -> np.ndarray:
        return self.expected + self.shock + self.share_change + self.interaction


def decompose(
    initial_shares: ShareMatrix,
    current_shares: ShareMatrix,
    unit_shifts: np.ndarray,
    reference_shifts: np.ndarray | None = None,
) -> DecompositionResult:
    """Decompose the observed aggregate ``sum_j w_ijt D_ijt`` per unit.

    ``reference_shifts`` defaults to the current-share-weighted mean of the
    unit-level shifts per column.
    """
    w0 = initial_shares.weights
    wt = current_shares.weights
    d = np.asarray(unit_shifts, dtype=float)
    if w0.shape != wt.shape or d.shape != wt.shape:
        raise ValidationError(
            f"dimension mismatch: initial {w0.shape}, current {wt.shape}, unit shifts {d.shape}"
        )
    if not np.all(np.isfinite(d)):
        raise ValidationError("unit shifts contain non-finite values")
    if reference_shifts is None:
        mass = wt.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            ref = np.where(mass > 0, (wt * d).sum(axis=0) / np.where(mass > 0, mass, 1.0), 0.0)
    else:
        ref = np.asarray(reference_shifts, dtype=float)
        if ref.shape != (wt.shape[1],):
            raise ValidationError("reference shifts must have one value per shift column")
    dev = d - ref[None, :]
    return DecompositionResult(
        expected=w0 @ ref,
        shock=(w0 * dev).sum(axis=1),
        share_change=(wt - w0) @ ref,
        interaction=((wt - w0) * dev).sum(axis=1),
        observed=(wt * d).sum(axis=1),
        reference_shifts=ref,
    )


@dataclass(frozen=True)
class CompletedShares:
    """Shares with the complementary column appended and, when shifts were
    supplied, the zero-valued fictitious shift with its indicator covariate."""

    shares: ShareMatrix
    shifts: ShiftTable | None
    sum_of_shares: np.ndarray


def complete_shares(shares: ShareMatrix, shifts: ShiftTable | None = None) -> CompletedShares:
    """Append the complementary share column so every row sums to one.

    The appended shift value is fixed at zero; when a shift table is given,
    it gains a ``p_real`` indicator covariate (1 for real shifts, 0 for the
    complement) so the complement can be distinguished in shift-level
    regressions. Existing covariate columns are zero-filled for the
    complement. The returned ``sum_of_shares`` control is the original row
    sum per unit.
    """
    sums = shares.row_sums()
    complement = np.clip(1.0 - sums, 0.0, None)
    new_w = np.hstack([shares.weights, complement[:, None]])
    new_shares = ShareMatrix(
        weights=new_w,
        row_ids=shares.row_ids,
        col_ids=shares.col_ids + (COMPLEMENT_ID,),
    )
    new_shifts = None
    if shifts is not None:
        if shifts.n_shifts != shares.n_shifts:
            raise ValidationError("shift table does not match the share matrix")
        m = shifts.n_shifts
        indicator = np.concatenate([np.ones(m), [0.0]])
        if shifts.covariates is not None:
            cov = np.vstack([shifts.covariates, np.zeros((1, shifts.covariates.shape[1]))])
            cov = np.hstack([cov, indicator[:, None]])
            names = shifts.covariate_names + (REAL_SHIFT_COVARIATE,)
        else:
            cov = indicator[:, None]
            names = (REAL_SHIFT_COVARIATE,)

        def _extend(labels):
            if labels is None:
                return None
            return np.concatenate([labels, [COMPLEMENT_ID]])

        new_shifts = ShiftTable(
            values=np.concatenate([shifts.values, [0.0]]),
            shift_ids=shifts.shift_ids + (COMPLEMENT_ID,),
            cluster=_extend(shifts.cluster),
            period=_extend(shifts.period),
            exchange_group=_extend(shifts.exchange_group),
            covariates=cov,
            covariate_names=names,
        )
    return CompletedShares(shares=new_shares, shifts=new_shifts, sum_of_shares=sums)


@dataclass(frozen=True)
class ShiftReplacement:
    """Shifts after zeroing those with small aggregate shares."""

    shifts: ShiftTable
    replaced: np.ndarray
    threshold: float

    @property
    def n_replaced(self) -> int:
        return int(self.replaced.sum())

    @property
    def replaced_fraction(self) -> float:
        return float(self.replaced.mean()) if self.replaced.size else 0.0


def replace_shifts(
    shifts: ShiftTable,
    aggregate_shares: np.ndarray,
    threshold: float = DEFAULT_REPLACE_THRESHOLD,
) -> ShiftReplacement:
    """Set shift values to zero wherever the aggregate share falls below ``threshold``."""
    if not 0.0 <= threshold < 1.0:
        raise ValidationError(f"replacement threshold must be in [0, 1), got {threshold!r}")
    agg = np.asarray(aggregate_shares, dtype=float)
    if agg.shape != (shifts.n_shifts,):
        raise ValidationError(
            f"aggregate shares ({agg.shape[0]}) misaligned with shifts ({shifts.n_shifts})"
        )
    mask = agg < threshold
    values = np.where(mask, 0.0, shifts.values)
    return ShiftReplacement(shifts=shifts.with_values(values), replaced=mask, threshold=threshold)


def zero_share_columns(shares: ShareMatrix, replaced: np.ndarray) -> ShareMatrix:
    """Optional mirror of the replacement rule on the independent-variable shares."""
    replaced = np.asarray(replaced, dtype=bool)
    if replaced.shape != (shares.n_shifts,):
        raise ValidationError("replacement mask misaligned with share columns")
    w = shares.weights.copy()
    w[:, replaced] = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ShiftShareWarning)
        return ShareMatrix(weights=w, row_ids=shares.row_ids, col_ids=shares.col_ids)


@dataclass(frozen=True)
class ShiftResiduals:
    """Residualized shifts together with the specification that produced them."""

    eta_hat: np.ndarray
    fitted: np.ndarray
    spec: tuple[str, ...]
    weights_used: np.ndarray
    sse_ratio: float

    @property
    def n_shifts(self) -> int:
        return self.eta_hat.shape[0]


def _group_codes(labels: np.ndarray) -> np.ndarray:
    _, codes = np.unique(np.asarray(labels, dtype=object).astype(str), return_inverse=True)
    return codes


def _weighted_group_demean(
    columns: np.ndarray, weights: np.ndarray, codes_list: list[np.ndarray], tol: float, max_iter: int
) -> np.ndarray:
    """Alternating weighted demeaning over each fixed-effect dimension.

    Avoids materializing the dummy matrix; converges to the same projection
    as a dense weighted dummy regression. Groups with zero total weight get
    mean zero.
    """
    out = columns.copy()
    scale = max(1.0, float(np.max(np.abs(out))) if out.size else 1.0)
    group_weights = []
    for codes in codes_list:
        gw = np.bincount(codes, weights=weights)
        group_weights.append(np.where(gw > 0, gw, 1.0))
    if len(codes_list) == 1:
        codes = codes_list[0]
        means = np.vstack(
            [np.bincount(codes, weights=weights * col) for col in out.T]
        ).T / group_weights[0][:, None]
        return out - means[codes]
    for _ in range(max_iter):
        biggest = 0.0
        for codes, gw in zip(codes_list, group_weights):
            means = np.vstack(
                [np.bincount(codes, weights=weights * col) for col in out.T]
            ).T / gw[:, None]
            out -= means[codes]
            if means.size:
                biggest = max(biggest, float(np.max(np.abs(means))))
        if biggest <= tol * scale:
            return out
    raise NumericalError(
        f"alternating demeaning did not converge within {max_iter} iterations"
    )


def residualize_shifts(
    shifts: ShiftTable,
    spec: Sequence[str],
    shift_weights: np.ndarray,
    intercept: bool = True,
    tol: float = 1e-10,
    max_iter: int = 10000,
) -> ShiftResiduals:
    """Residualize shift values on fixed effects and covariates by weighted least squares.

    ``spec`` lists terms by name: label columns of the shift table
    (``cluster``, ``period``, ``exchange_group``, or any extra column) enter
    as fixed effects, covariate names enter linearly. Fixed effects are
    absorbed by alternating weighted demeaning rather than dummy expansion.
    An empty spec with ``intercept=False`` returns the raw values.

    The universe of shifts residualized here may be larger than the set that
    later enters a regression; pass the wider table with its own weights.
    """
    w = np.asarray(shift_weights, dtype=float)
    if w.shape != (shifts.n_shifts,):
        raise ValidationError("shift weights must have one value per shift")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("shift weights must be finite and nonnegative")
    if w.sum() <= 0:
        raise ValidationError("shift weights must not all be zero")

    fe_codes: list[np.ndarray] = []
    cov_cols: list[np.ndarray] = []
    cov_names: list[str] = []
    label_names = {"cluster", "period", "exchange_group", *shifts.extras}
    for term in spec:
        if term in label_names:
            fe_codes.append(_group_codes(shifts.label_column(term)))
        elif shifts.covariates is not None and term in shifts.covariate_names:
            k = shifts.covariate_names.index(term)
            cov_cols.append(shifts.covariates[:, k])
            cov_names.append(term)
        else:
            raise ValidationError(f"unknown residualization term {term!r}")

    d = shifts.values.astype(float)
    absorbs_constant = bool(fe_codes) or intercept
    if fe_codes:
        stacked = np.column_stack([d] + cov_cols) if cov_cols else d[:, None]
        demeaned = _weighted_group_demean(stacked, w, fe_codes, tol, max_iter)
        d_dm = demeaned[:, 0]
        if cov_cols:
            x_dm = demeaned[:, 1:]
            norms = np.sqrt((w[:, None] * x_dm**2).sum(axis=0))
            base = np.sqrt((w[:, None] * np.column_stack(cov_cols) ** 2).sum(axis=0))
            dead = norms <= 1e-10 * np.maximum(base, 1.0)
            if np.any(dead):
                bad = ", ".join(n for n, flag in zip(cov_names, dead) if flag)
                raise EstimationError(
                    f"rank-deficient design; collinear terms: {bad} (absorbed by fixed effects)"
                )
            coef = wls_coefficients(x_dm, d_dm, w, tuple(cov_names))
            eta = d_dm - x_dm @ coef
        else:
            eta = d_dm
    elif cov_cols or intercept:
        cols = []
        names = []
        if intercept:
            cols.append(np.ones_like(d))
            names.append("intercept")
        cols.extend(cov_cols)
        names.extend(cov_names)
        design = np.column_stack(cols)
        coef = wls_coefficients(design, d, w, tuple(names))
        eta = d - design @ coef
    else:
        eta = d.copy()

    fitted = d - eta
    wsum = w.sum()
    if absorbs_constant:
        mean_raw = float((w * d).sum() / wsum)
        denom = float((w * (d - mean_raw) ** 2).sum())
    else:
        denom = float((w * d**2).sum())
    num = float((w * eta**2).sum())
    sse_ratio = 1.0 if denom == 0.0 else min(max(num / denom, 0.0), 1.0)
    if absorbs_constant:
        mean_eta = abs(float((w * eta).sum() / wsum))
        if mean_eta > 1e-8 * max(1.0, float(np.max(np.abs(d))) if d.size else 1.0):
            raise NumericalError(f"residualized shifts have weighted mean {mean_eta!r}, not 0")
    return ShiftResiduals(
        eta_hat=eta,
        fitted=fitted,
        spec=tuple(spec),
        weights_used=w,
        sse_ratio=sse_ratio,
    )


def shift_weights_from(dataset: Dataset, shares: ShareMatrix) -> np.ndarray:
    """Importance-weighted aggregate share of each shift: ``w_j = sum_i e_i w_ij``."""
    if dataset.n_units != shares.n_units:
        raise ValidationError("dataset and share matrix have different unit counts")
    return dataset.unit_weights @ shares.weights


@dataclass(frozen=True)
class LeaveOneOutInstrument:
    """Per-unit instrument built from leave-one-out aggregated shifts."""

    z: np.ndarray
    undefined: np.ndarray
    normalized: bool

    @property
    def n_undefined(self) -> int:
        return int(self.undefined.sum())


def leave_one_out_shifts(
    unit_shifts: np.ndarray,
    shares: ShareMatrix,
    normalize: bool = True,
) -> LeaveOneOutInstrument:
    """Instrument each unit with shifts re-aggregated over all *other* units.

    For unit ``k`` and shift ``j`` the leave-one-out shift excludes row
    ``k``'s contribution, weighting by shares; with ``normalize=True``
    (default) the sum is divided by the remaining share mass so it stays a
    weighted average. A shift whose entire weight comes from one unit has no
    leave-one-out value for that unit: the pair is flagged, excluded from the
    instrument with a warning.
    """
    d = np.asarray(unit_shifts, dtype=float)
    w = shares.weights
    if d.shape != w.shape:
        raise ValidationError(f"unit shifts {d.shape} misaligned with shares {w.shape}")
    if not np.all(np.isfinite(d)):
        raise ValidationError("unit shifts contain non-finite values")
    totals = (w * d).sum(axis=0)
    mass = w.sum(axis=0)
    numer = totals[None, :] - w * d
    undefined = np.zeros_like(w, dtype=bool)
    if normalize:
        denom = mass[None, :] - w
        undefined = (w > 0) & (denom <= 0)
        safe = np.where(denom > 0, denom, 1.0)
        loo = np.where(denom > 0, numer / safe, 0.0)
    else:
        loo = numer
    contrib = np.where(undefined, 0.0, w * loo)
    if undefined.any():
        warnings.warn(
            f"{int(undefined.sum())} unit-shift pair(s) have no leave-one-out value "
            "(entire shift weight from one unit); excluded from the instrument",
            ShiftShareWarning,
            stacklevel=2,
        )
    return LeaveOneOutInstrument(z=contrib.sum(axis=1), undefined=undefined, normalized=normalize)
