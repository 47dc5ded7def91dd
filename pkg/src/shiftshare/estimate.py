"""Shift-share estimation and the standard-error menu.

Point estimation runs through one just-identified weighted moment solve, so
the self-instrumenting identity (instrumenting the regressor with itself
reproduces weighted OLS) holds exactly. On top of that sit:

* conventional cluster-robust covariance at a user-supplied unit clustering,
  with the standard small-cluster factor;
* the shift-level inverted regression -- unit-level variables are first
  residualized on the unit controls, then aggregated to shift level with
  weights ``e_i w_ij / w_j`` -- whose heteroskedasticity- or cluster-robust
  sandwich gives exposure-robust standard errors;
* the residualized-shift standard errors evaluated directly from the unit
  data, plus the effective first-stage F of the inverted regression;
* the decomposition of the estimate into per-share just-identified
  estimates with their Rotemberg weights, and the share-moment GMM
  equivalence with shift-proportional weights.

Exposure-robust and residualized standard errors are uncorrected asymptotic
forms; only the conventional cluster estimator carries a degrees-of-freedom
correction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._wls import add_intercept, solve_square, wls_coefficients, wls_residualize
from .construct import COMPLEMENT_ID, ShiftResiduals, build_exposure
from .data import Dataset, ShareMatrix, ShiftTable
from .errors import EstimationError, ShiftShareWarning, ValidationError

WEAK_FIRST_STAGE_TOL = 1e-12
DOMINANT_SHARE_RATIO = 0.10
DOMINANT_SHARE_SQ_RATIO = 0.25


@dataclass
class EstimateReport:
    """Point estimate with whichever standard-error variants were computed.

    ``se_variants`` keys follow the fixed vocabulary ``conventional_hc``,
    ``conventional_cluster``, ``hc_exposure_robust``,
    ``cluster_exposure_robust``, ``residualized``, ``residualized_cluster``.
    """

    beta_hat: float
    gamma_hat: np.ndarray
    gamma_names: tuple[str, ...]
    se_variants: dict[str, float]
    first_stage_f: dict[str, float]
    residuals: np.ndarray
    x_perp: np.ndarray
    n_units: int | None = None
    m_shifts: int | None = None
    n_clusters: int | None = None

    def t_stat(self, variant: str) -> float:
        se = self.se_variants[variant]
        if se == 0.0:
            return float("inf") if self.beta_hat != 0 else 0.0
        return self.beta_hat / se

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat,
            "gamma_hat": {n: float(g) for n, g in zip(self.gamma_names, self.gamma_hat)},
            "se": dict(self.se_variants),
            "first_stage_f": dict(self.first_stage_f),
            "n_units": self.n_units,
            "m_shifts": self.m_shifts,
            "n_clusters": self.n_clusters,
        }


def _resolve_labels(source, labels) -> np.ndarray | None:
    if labels is None:
        return None
    if isinstance(labels, str):
        if isinstance(source, Dataset):
            return source.extra_column(labels)
        if isinstance(source, ShiftTable):
            return source.label_column(labels)
        raise ValidationError(
            f"cluster column name {labels!r} cannot be resolved here; pass a label array"
        )
    out = np.asarray(labels, dtype=object).astype(str)
    return out


def _cluster_codes(labels: np.ndarray) -> np.ndarray:
    _, codes = np.unique(labels, return_inverse=True)
    return codes


def _cluster_meat(scores: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Sum of outer products of within-cluster score sums."""
    k = scores.shape[1]
    sums = np.zeros((codes.max() + 1, k))
    np.add.at(sums, codes, scores)
    return sums.T @ sums


def _iv_solve(
    regressors: np.ndarray,
    instruments: np.ndarray,
    response: np.ndarray,
    weights: np.ndarray,
    names: tuple[str, ...],
):
    """Just-identified weighted IV: solve ``Q'E R theta = Q'E y``."""
    qe = instruments * weights[:, None]
    theta = solve_square(qe.T @ regressors, qe.T @ response, names)
    resid = response - regressors @ theta
    return theta, resid


def _sandwich_se(
    regressors: np.ndarray,
    instruments: np.ndarray,
    weights: np.ndarray,
    resid: np.ndarray,
    codes: np.ndarray,
    correction: float,
) -> float:
    """Cluster-robust sandwich SE of the first coefficient of the IV solve."""
    qe = instruments * weights[:, None]
    bread = np.linalg.inv(qe.T @ regressors)
    meat = _cluster_meat(qe * resid[:, None], codes)
    cov = bread @ meat @ bread.T * correction
    var = cov[0, 0]
    return float(np.sqrt(max(var, 0.0)))


def _unit_design(dataset: Dataset):
    controls, names = add_intercept(dataset.controls, dataset.n_units)
    if dataset.controls is not None and dataset.control_names:
        names = ("intercept",) + dataset.control_names
    return controls, names


def shiftshare_2sls(
    dataset: Dataset,
    instrument: np.ndarray,
    cluster=None,
    regressor: np.ndarray | None = None,
) -> EstimateReport:
    """Just-identified weighted 2SLS of the outcome on the endogenous regressor.

    ``instrument`` is the shift-share instrument per unit. The regressor
    defaults to ``dataset.regressor``. Conventional (cluster-)robust standard
    errors use the small-cluster factor ``G/(G-1) * (n-1)/(n-k)``; without
    cluster labels each unit is its own cluster, which reduces the factor to
    ``n/(n-k)``.
    """
    z = np.asarray(instrument, dtype=float)
    n = dataset.n_units
    if z.shape != (n,):
        raise ValidationError("instrument must have one value per unit")
    if regressor is None:
        regressor = dataset.regressor
    if regressor is None:
        raise ValidationError("dataset has no endogenous regressor; pass one explicitly")
    x = np.asarray(regressor, dtype=float)
    if x.shape != (n,):
        raise ValidationError("regressor must have one value per unit")
    e = dataset.unit_weights
    y = dataset.outcome
    controls, control_names = _unit_design(dataset)
    names = ("x",) + control_names

    x_perp = wls_residualize(controls, x, e, control_names)
    z_perp = wls_residualize(controls, z, e, control_names)
    first_stage_cov = float(np.sum(e * z * x_perp))
    if abs(first_stage_cov) < WEAK_FIRST_STAGE_TOL:
        raise EstimationError(
            f"weak or zero first stage: |cov(Z, X-perp)| = {abs(first_stage_cov):.3e}"
        )

    regressors = np.column_stack([x, controls])
    instruments = np.column_stack([z, controls])
    theta, resid = _iv_solve(regressors, instruments, y, e, names)

    labels = _resolve_labels(dataset, cluster)
    if labels is not None:
        codes = _cluster_codes(labels)
        n_clusters = int(codes.max()) + 1
        if n_clusters < 2:
            raise EstimationError("clustered standard errors need at least 2 clusters")
        key = "conventional_cluster"
    else:
        codes = np.arange(n)
        n_clusters = None
        key = "conventional_hc"
    g = int(codes.max()) + 1
    k = regressors.shape[1]
    correction = (g / (g - 1)) * ((n - 1) / (n - k)) if g > 1 and n > k else 1.0
    se = _sandwich_se(regressors, instruments, e, resid, codes, correction)

    # conventional first-stage F: squared t of the instrument in the first stage
    fs_design = np.column_stack([z, controls])
    fs_coef = wls_coefficients(fs_design, x, e, ("z",) + control_names)
    fs_resid = x - fs_design @ fs_coef
    fs_se = _sandwich_se(fs_design, fs_design, e, fs_resid, codes, correction)
    fs_f = float((fs_coef[0] / fs_se) ** 2) if fs_se > 0 else float("inf")

    return EstimateReport(
        beta_hat=float(theta[0]),
        gamma_hat=theta[1:].copy(),
        gamma_names=control_names,
        se_variants={key: se},
        first_stage_f={"conventional": fs_f},
        residuals=resid,
        x_perp=x_perp,
        n_units=n,
        n_clusters=n_clusters,
    )


def shiftshare_ols(dataset: Dataset, exposure: np.ndarray, cluster=None) -> EstimateReport:
    """Weighted OLS of the outcome on the shift-share exposure and controls.

    Runs as 2SLS with the exposure instrumenting itself, which is the same
    linear system solved the same way.
    """
    exposure = np.asarray(exposure, dtype=float)
    report = shiftshare_2sls(dataset, exposure, cluster=cluster, regressor=exposure)
    report.first_stage_f = {}
    return report


# ---------------------------------------------------------------------------
# Rotemberg decomposition and share-moment GMM


@dataclass
class RotembergTable:
    """Per-share weights and just-identified estimates whose weighted average
    reproduces the shift-share estimate."""

    shift_ids: tuple[str, ...]
    alpha_hat: np.ndarray
    beta_j: np.ndarray
    beta_hat: float
    negative_weight_share: float
    top: list[dict] = field(default_factory=list)

    def recombined(self) -> float:
        """Sum of ``alpha_j * beta_j`` over shifts where ``beta_j`` is defined."""
        ok = np.isfinite(self.beta_j)
        return float(np.sum(self.alpha_hat[ok] * self.beta_j[ok]))

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat,
            "negative_weight_share": self.negative_weight_share,
            "alpha_sum": float(self.alpha_hat.sum()),
            "top": self.top,
        }


def _endogenous(dataset: Dataset, shares: ShareMatrix, shifts: ShiftTable) -> np.ndarray:
    if dataset.regressor is not None:
        return dataset.regressor
    return build_exposure(shares, shifts)


def rotemberg(
    dataset: Dataset,
    shares: ShareMatrix,
    shifts: ShiftTable,
    top_k: int = 10,
) -> RotembergTable:
    """Decompose the shift-share estimate over the per-share instruments.

    Weights depend only on shifts and the covariance of each share column
    with the residualized regressor; they sum to one. Shares whose column
    has (numerically) zero covariance with the residualized regressor get an
    undefined per-share estimate (NaN) but still receive a weight.
    """
    if shares.n_units != dataset.n_units:
        raise ValidationError("share matrix and dataset have different unit counts")
    x = _endogenous(dataset, shares, shifts)
    e = dataset.unit_weights
    controls, control_names = _unit_design(dataset)
    y_perp = wls_residualize(controls, dataset.outcome, e, control_names)
    x_perp = wls_residualize(controls, x, e, control_names)
    a = (e * y_perp) @ shares.weights
    c = (e * x_perp) @ shares.weights
    d = shifts.values
    denom = float(np.dot(d, c))
    if abs(denom) < WEAK_FIRST_STAGE_TOL:
        raise EstimationError("shift-share instrument has zero covariance with the regressor")
    alpha = d * c / denom
    tol = WEAK_FIRST_STAGE_TOL * max(1.0, float(np.max(np.abs(c))))
    defined = np.abs(c) > tol
    if not defined.any():
        raise EstimationError("no share column has a usable first stage; all beta_j undefined")
    beta_j = np.full(d.shape, np.nan)
    beta_j[defined] = a[defined] / c[defined]
    abs_alpha = np.abs(alpha)
    total = abs_alpha.sum()
    negative = float(abs_alpha[alpha < 0].sum() / total) if total > 0 else 0.0
    order = np.argsort(-abs_alpha)[: max(top_k, 0)]
    top = [
        {
            "shift_id": shifts.shift_ids[j],
            "alpha": float(alpha[j]),
            "beta_j": (float(beta_j[j]) if np.isfinite(beta_j[j]) else None),
            "shift": float(d[j]),
        }
        for j in order
    ]
    return RotembergTable(
        shift_ids=shifts.shift_ids,
        alpha_hat=alpha,
        beta_j=beta_j,
        beta_hat=float(np.dot(d, a) / denom),
        negative_weight_share=negative,
        top=top,
    )


def gmm_share_instruments(dataset: Dataset, shares: ShareMatrix, shifts: ShiftTable) -> float:
    """GMM over the per-share moment conditions with shift-proportional weights.

    Fixing the moment weights at the shift values collapses the ``m`` share
    moments into the single shift-share moment, so this recovers the
    shift-share estimate (generally with suboptimal efficiency).
    """
    x = _endogenous(dataset, shares, shifts)
    e = dataset.unit_weights
    controls, control_names = _unit_design(dataset)
    y_perp = wls_residualize(controls, dataset.outcome, e, control_names)
    x_perp = wls_residualize(controls, x, e, control_names)
    a = (e * y_perp) @ shares.weights
    c = (e * x_perp) @ shares.weights
    denom = float(np.dot(shifts.values, c))
    if abs(denom) < WEAK_FIRST_STAGE_TOL:
        raise EstimationError("shift-weighted share moments do not identify the coefficient")
    return float(np.dot(shifts.values, a) / denom)


# ---------------------------------------------------------------------------
# inverted (shift-level) regression


@dataclass
class InvertedDataset:
    """Shift-level aggregates of the unit data, one observation per shift.

    Aggregation weights are ``e_i w_ij / w_j``; each observation carries the
    aggregate share ``w_j = sum_i e_i w_ij`` as its regression weight. With
    ``partialled`` set, the outcome/regressor aggregates were built from
    unit-level variables residualized on the unit controls, which is what
    makes the shift-level point estimate reproduce the unit-level one.
    """

    ybar: np.ndarray
    xbar: np.ndarray
    control_bar: np.ndarray
    weight: np.ndarray
    instrument: np.ndarray
    shift_values: np.ndarray
    shift_ids: tuple[str, ...]
    cluster: np.ndarray | None
    partialled: bool
    kept: np.ndarray
    n_units: int

    @property
    def n_shifts(self) -> int:
        return self.ybar.shape[0]


def invert(
    dataset: Dataset,
    shares: ShareMatrix,
    shifts: ShiftTable,
    residuals: ShiftResiduals | None = None,
    partial_controls: bool = True,
    incomplete_ok: bool = False,
) -> InvertedDataset:
    """Aggregate the regression to shift level ("turn shifts into observations").

    The instrument is the raw shift value, or the residualized shift when
    ``residuals`` is given. Shares should be completed first (or the
    sum-of-shares control included in the dataset controls and
    ``incomplete_ok`` set). Shifts with zero aggregate weight are dropped
    with a warning.
    """
    if shares.n_units != dataset.n_units:
        raise ValidationError("share matrix and dataset have different unit counts")
    if shares.n_shifts != shifts.n_shifts:
        raise ValidationError("share matrix and shift table have different shift counts")
    if not incomplete_ok and not shares.is_complete(tol=1e-8):
        raise ValidationError(
            "shares are incomplete; run complete_shares first or include the "
            "sum-of-shares control and pass incomplete_ok=True"
        )
    instrument = shifts.values if residuals is None else residuals.eta_hat
    if instrument.shape != (shares.n_shifts,):
        raise ValidationError("instrument values misaligned with share columns")

    e = dataset.unit_weights
    x = _endogenous(dataset, shares, shifts)
    controls, control_names = _unit_design(dataset)
    if partial_controls:
        y_use = wls_residualize(controls, dataset.outcome, e, control_names)
        x_use = wls_residualize(controls, x, e, control_names)
    else:
        y_use = dataset.outcome
        x_use = x

    w_j = e @ shares.weights
    kept = w_j > 0
    if not kept.all():
        warnings.warn(
            f"dropping {int((~kept).sum())} shift(s) with zero aggregate weight",
            ShiftShareWarning,
            stacklevel=2,
        )
    w = w_j[kept]
    wt = shares.weights[:, kept]
    ybar = (e * y_use) @ wt / w
    xbar = (e * x_use) @ wt / w
    control_bar = (wt.T @ (controls * e[:, None])) / w[:, None]
    cluster = shifts.cluster[kept] if shifts.cluster is not None else None
    return InvertedDataset(
        ybar=ybar,
        xbar=xbar,
        control_bar=control_bar,
        weight=w,
        instrument=instrument[kept],
        shift_values=shifts.values[kept],
        shift_ids=tuple(np.array(shifts.shift_ids, dtype=object)[kept]),
        cluster=cluster,
        partialled=partial_controls,
        kept=kept,
        n_units=dataset.n_units,
    )


def _negligibility_check(weight: np.ndarray, shift_ids: tuple[str, ...]) -> None:
    # the fictitious complement share is excluded from the negligibility
    # conditions, so it must not trigger the dominance warning
    real = np.array([sid != COMPLEMENT_ID for sid in shift_ids])
    weight = weight[real]
    if weight.size == 0:
        return
    total = weight.sum()
    total_sq = float((weight**2).sum())
    if total <= 0 or total_sq <= 0:
        return
    ratio = float(weight.max() / total)
    ratio_sq = float((weight**2).max() / total_sq)
    if ratio > DOMINANT_SHARE_RATIO or ratio_sq > DOMINANT_SHARE_SQ_RATIO:
        warnings.warn(
            f"a single shift carries {ratio:.0%} of aggregate shares "
            f"({ratio_sq:.0%} of squared shares); exposure-robust asymptotics "
            "assume no shift dominates",
            ShiftShareWarning,
            stacklevel=3,
        )


def estimate_inverted(
    inverted: InvertedDataset,
    shift_controls: np.ndarray | None = None,
    cluster=None,
) -> EstimateReport:
    """Weighted IV in the inverted regression with exposure-robust standard errors.

    Observations are shifts, weighted by their aggregate share, instrumented
    by the (possibly residualized) shift value. ``shift_controls`` are
    shift-level covariate columns aligned with the original shift table
    (subset to the kept shifts internally); an intercept is always included.
    Reports the heteroskedasticity-robust sandwich and, when shift cluster
    labels are available, the cluster-robust one, both without
    degrees-of-freedom corrections, plus conventional and effective
    first-stage F statistics.
    """
    w = inverted.weight
    m = inverted.n_shifts
    if m < 2:
        raise EstimationError("inverted regression needs at least 2 shifts with positive weight")
    _negligibility_check(w, inverted.shift_ids)

    q_cols = np.ones((m, 1))
    q_names: tuple[str, ...] = ("intercept",)
    if shift_controls is not None:
        q = np.atleast_2d(np.asarray(shift_controls, dtype=float))
        if q.shape[0] != m:
            if q.shape[0] == inverted.kept.shape[0]:
                q = q[inverted.kept]
            elif q.T.shape[0] in (m, inverted.kept.shape[0]):
                q = q.T
                if q.shape[0] != m:
                    q = q[inverted.kept]
            else:
                raise ValidationError("shift controls misaligned with shifts")
        q_cols = np.hstack([q_cols, q])
        q_names = q_names + tuple(f"q_{k + 1}" for k in range(q.shape[1]))

    inst = inverted.instrument
    names = ("instrument",) + q_names
    inst_perp = wls_residualize(q_cols, inst, w, q_names)
    x_perp = wls_residualize(q_cols, inverted.xbar, w, q_names)
    denom = float(np.sum(w * inst_perp * inverted.xbar))
    if abs(denom) < WEAK_FIRST_STAGE_TOL or float(np.sum(w * inst_perp**2)) == 0.0:
        raise EstimationError("instrument has no variation after shift-level controls")

    regressors = np.column_stack([inverted.xbar, q_cols])
    instruments = np.column_stack([inst, q_cols])
    theta, resid = _iv_solve(regressors, instruments, inverted.ybar, w, names)

    se_variants = {
        "hc_exposure_robust": _sandwich_se(regressors, instruments, w, resid, np.arange(m), 1.0)
    }
    labels = _resolve_labels(None, cluster) if cluster is not None else inverted.cluster
    n_clusters = None
    if labels is not None:
        labels = np.asarray(labels, dtype=object).astype(str)
        if labels.shape[0] == inverted.kept.shape[0] and labels.shape[0] != m:
            labels = labels[inverted.kept]
        if labels.shape[0] != m:
            raise ValidationError("cluster labels misaligned with shifts")
        codes = _cluster_codes(labels)
        n_clusters = int(codes.max()) + 1
        if n_clusters < 2:
            raise EstimationError("clustered standard errors need at least 2 shift clusters")
        se_variants["cluster_exposure_robust"] = _sandwich_se(
            regressors, instruments, w, resid, codes, 1.0
        )

    fs_coef = wls_coefficients(instruments, inverted.xbar, w, names)
    fs_resid = inverted.xbar - instruments @ fs_coef
    fs_se = _sandwich_se(instruments, instruments, w, fs_resid, np.arange(m), 1.0)
    conventional_f = float((fs_coef[0] / fs_se) ** 2) if fs_se > 0 else float("inf")
    try:
        eff_f = effective_f(x_perp, inst_perp, w, shift_values=inverted.shift_values)
    except EstimationError:
        eff_f = float("nan")

    return EstimateReport(
        beta_hat=float(theta[0]),
        gamma_hat=theta[1:].copy(),
        gamma_names=q_names,
        se_variants=se_variants,
        first_stage_f={"conventional": conventional_f, "effective": eff_f},
        residuals=resid,
        x_perp=x_perp,
        n_units=inverted.n_units,
        m_shifts=m,
        n_clusters=n_clusters,
    )


# ---------------------------------------------------------------------------
# residualized-shift standard errors and effective F


def residualized_se(
    unit_weights: np.ndarray,
    shares: ShareMatrix,
    eta_hat: np.ndarray,
    residuals: np.ndarray,
    x_perp: np.ndarray,
) -> float:
    """Exposure-robust SE built directly from residualized shifts.

    Evaluates ``sqrt(sum_j (sum_i e_i w_ij eps_i)^2 eta_j^2)`` over
    ``|sum_i e_i x_perp_i z_i|`` with ``z = W eta``. With ``eta`` estimated
    by the aggregate-share-weighted regression of shifts on shift-level
    controls, this equals the heteroskedasticity-robust sandwich of the
    inverted regression.
    """
    e = np.asarray(unit_weights, dtype=float)
    eta = np.asarray(eta_hat, dtype=float)
    eps = np.asarray(residuals, dtype=float)
    xp = np.asarray(x_perp, dtype=float)
    if eta.shape != (shares.n_shifts,):
        raise ValidationError("eta misaligned with share columns")
    if eps.shape != (shares.n_units,) or xp.shape != (shares.n_units,):
        raise ValidationError("residuals and x_perp must have one value per unit")
    z = shares.weights @ eta
    denom = abs(float(np.sum(e * xp * z)))
    if denom == 0.0:
        raise EstimationError("degenerate first stage: sum e * x_perp * z is zero")
    t = (e * eps) @ shares.weights
    # sorted reduction: the singleton-cluster version must reproduce this
    # value bit for bit regardless of label order
    return float(np.sqrt(np.sum(np.sort((t * eta) ** 2))) / denom)


def residualized_se_clustered(
    unit_weights: np.ndarray,
    shares: ShareMatrix,
    eta_hat: np.ndarray,
    residuals: np.ndarray,
    x_perp: np.ndarray,
    clusters,
) -> float:
    """Cluster-robust version of :func:`residualized_se` over shift clusters.

    Reduces exactly to the unclustered estimator when every cluster is a
    singleton.
    """
    e = np.asarray(unit_weights, dtype=float)
    eta = np.asarray(eta_hat, dtype=float)
    eps = np.asarray(residuals, dtype=float)
    xp = np.asarray(x_perp, dtype=float)
    labels = np.asarray(clusters, dtype=object).astype(str)
    if labels.shape != (shares.n_shifts,):
        raise ValidationError("cluster labels must cover all shifts")
    z = shares.weights @ eta
    denom = abs(float(np.sum(e * xp * z)))
    if denom == 0.0:
        raise EstimationError("degenerate first stage: sum e * x_perp * z is zero")
    t = (e * eps) @ shares.weights
    codes = _cluster_codes(labels)
    per_cluster = np.bincount(codes, weights=t * eta)
    return float(np.sqrt(np.sum(np.sort(per_cluster**2))) / denom)


def effective_f(
    xbar_perp: np.ndarray,
    eta_hat: np.ndarray,
    shift_weights: np.ndarray,
    shift_values: np.ndarray | None = None,
) -> float:
    """Effective first-stage F statistic of the inverted regression.

    Fits the weighted first stage of the aggregated residualized regressor
    on the residualized shift (with intercept), takes the
    heteroskedasticity-robust covariance of the two coefficients, and forms
    the ratio of the weighted mean squared fitted value to the trace term
    built from the shift second moments. ``shift_values`` defaults to
    ``eta_hat``.
    """
    xb = np.asarray(xbar_perp, dtype=float)
    eta = np.asarray(eta_hat, dtype=float)
    w = np.asarray(shift_weights, dtype=float)
    d = eta if shift_values is None else np.asarray(shift_values, dtype=float)
    if not (xb.shape == eta.shape == w.shape == d.shape):
        raise ValidationError("effective F inputs must be aligned vectors")
    design = np.column_stack([np.ones_like(eta), eta])
    coef = wls_coefficients(design, xb, w, ("intercept", "eta"))
    fitted = design @ coef
    v = xb - fitted
    bread = np.linalg.inv(design.T @ (design * w[:, None]))
    meat = (design * (w * v)[:, None]).T @ (design * (w * v)[:, None])
    cov = bread @ meat @ bread.T
    numerator = float(np.sum(w * fitted**2))
    denominator = float(
        cov[1, 1] * np.sum(w * d**2) + 2.0 * cov[0, 1] * np.sum(w * d) + cov[0, 0] * np.sum(w)
    )
    if denominator <= 0.0:
        return float("inf") if numerator > 0 else 0.0
    return numerator / denominator


def demean_via_controls(shares: ShareMatrix, shift_covariates: np.ndarray) -> np.ndarray:
    """Aggregate shift-level covariates into unit-level control columns.

    Controlling for these columns in the shift-share regression is the
    exact counterpart of demeaning the shifts on the same covariates; with
    ``p_j = 1`` the single column is the sum of shares (the incomplete-share
    control).
    """
    p = np.atleast_2d(np.asarray(shift_covariates, dtype=float))
    if p.shape[0] != shares.n_shifts:
        p = p.T
    if p.shape[0] != shares.n_shifts:
        raise ValidationError("shift covariates must have one row per shift")
    return shares.weights @ p
