"""Estimation and inference for pooled categorical-biomarker associations.

``fit_pooled`` implements the two-step pseudo-maximum-likelihood estimator:
study-specific multinomial calibration models are fitted first, then the
pooled pseudo-log-likelihood is maximized in the regression coefficients
with the calibration estimates plugged in.  ``sandwich_covariance`` stacks
the calibration and regression estimating equations to propagate the
calibration-estimation uncertainty into the reported variance.

Comparator fits: ``naive_fit`` pools and categorizes the local measurements
directly, ``linear_calibration_fit`` imputes the continuous reference
measurement per study by least squares before categorizing, and ``clr_fit``
is the classical conditional-logistic fit with fully observed categories.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._optim import central_difference_jacobian, maximize_bfgs, maximize_newton
from .calibration import (
    CalibrationModel,
    LinearCalibrationModel,
    _category_prob_matrix,
    _multinomial_hessian,
    fit_all_calibrations,
    fit_linear_calibration,
)
from .data import CategoryScheme, PooledDataset, categorize
from .errors import PoolcalError, RankDefectError, ValidationError
from .likelihood import (
    FULL,
    INTERNALIZED,
    Beta,
    PooledObjective,
    build_prob_tables,
    normalize_method,
    prob_tables_from_params,
)

__all__ = [
    "FitResult",
    "fit_pooled",
    "sandwich_covariance",
    "clr_fit",
    "naive_fit",
    "linear_calibration_fit",
]

WALD_QUANTILE = 1.959964
GRADIENT_TOL = 1e-8
MAX_ITERATIONS = 200
LARGE_EFFECT_THRESHOLD = math.log(2.0)

METHOD_LABELS = {
    FULL: "Full",
    INTERNALIZED: "Internalized",
}


@dataclass
class FitResult:
    """Coefficient estimates with sandwich or model-based uncertainty."""

    method: str
    beta: Beta
    covariance: np.ndarray
    standard_errors: np.ndarray
    coefficient_names: list[str]
    wald_ci_95: np.ndarray
    relative_risks: np.ndarray
    rr_ci_95: np.ndarray
    converged: bool
    iterations: int
    gradient_norm: float
    calibration: CalibrationModel | None = None
    linear_calibration: dict[str, LinearCalibrationModel] | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def n_category_coefficients(self) -> int:
        return len(self.beta.beta_x)

    def to_json_dict(self) -> dict:
        coef = []
        n_cat = self.n_category_coefficients
        for i, name in enumerate(self.coefficient_names):
            entry = {
                "name": name,
                "estimate": float(self.beta.as_array()[i]),
                "se": _json_float(self.standard_errors[i]),
                "ci_lo": _json_float(self.wald_ci_95[i, 0]),
                "ci_hi": _json_float(self.wald_ci_95[i, 1]),
            }
            if i < n_cat:
                entry["rr"] = _json_float(self.relative_risks[i])
                entry["rr_ci_lo"] = _json_float(self.rr_ci_95[i, 0])
                entry["rr_ci_hi"] = _json_float(self.rr_ci_95[i, 1])
            else:
                entry["rr"] = None
                entry["rr_ci_lo"] = None
                entry["rr_ci_hi"] = None
            coef.append(entry)
        payload = {
            "method": self.method,
            "coefficients": coef,
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "gradient_norm": _json_float(self.gradient_norm),
            },
            "calibration": self.calibration.to_json_dict() if self.calibration else None,
            "notes": list(self.notes),
        }
        if self.linear_calibration:
            payload["linear_calibration"] = {
                sid: {"intercept": m.intercept, "slope": m.slope}
                for sid, m in self.linear_calibration.items()
            }
        return payload

    def rr_table(self) -> str:
        """Relative risks with confidence intervals as an aligned text table."""
        lines = [f"{'Category':<12}{'RR':>10}  {'95% CI':>18}"]
        lines.append(f"{'cat1':<12}{'1 (reference)':>10}")
        for i in range(self.n_category_coefficients):
            rr = self.relative_risks[i]
            lo, hi = self.rr_ci_95[i]
            lines.append(f"{f'cat{i + 2}':<12}{rr:>10.4f}  [{lo:.4f}, {hi:.4f}]")
        return "\n".join(lines)


def _json_float(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def _coefficient_names(category_count: int, covariate_count: int) -> list[str]:
    names = [f"cat{p}" for p in range(2, category_count + 1)]
    names += [f"z{k}" for k in range(1, covariate_count + 1)]
    return names


def _assemble_result(
    method: str,
    beta: Beta,
    covariance: np.ndarray,
    converged: bool,
    iterations: int,
    gradient_norm: float,
    *,
    calibration: CalibrationModel | None = None,
    linear_calibration: dict[str, LinearCalibrationModel] | None = None,
    notes: list[str] | None = None,
) -> FitResult:
    estimates = beta.as_array()
    covariance = np.asarray(covariance, dtype=float)
    with np.errstate(invalid="ignore"):
        se = np.sqrt(np.diag(covariance))
    half = WALD_QUANTILE * se
    ci = np.column_stack([estimates - half, estimates + half])
    n_cat = len(beta.beta_x)
    rr = np.exp(estimates[:n_cat])
    rr_ci = np.exp(ci[:n_cat])
    return FitResult(
        method=method,
        beta=beta,
        covariance=covariance,
        standard_errors=se,
        coefficient_names=_coefficient_names(beta.category_count, beta.covariate_count),
        wald_ci_95=ci,
        relative_risks=rr,
        rr_ci_95=rr_ci,
        converged=converged,
        iterations=iterations,
        gradient_norm=gradient_norm,
        calibration=calibration,
        linear_calibration=linear_calibration,
        notes=list(notes or []),
    )


# ---------------------------------------------------------------------------
# Two-step pseudo-maximum-likelihood fit
# ---------------------------------------------------------------------------


def fit_pooled(
    dataset: PooledDataset,
    scheme: CategoryScheme | None = None,
    method: str = FULL,
    *,
    on_separation: str = "error",
) -> FitResult:
    """Two-step pseudo-MLE with the stacked sandwich covariance.

    Step 1 fits every study's multinomial calibration model on its
    calibration subset; step 2 maximizes the pooled pseudo-log-likelihood by
    quasi-Newton ascent with the analytic gradient, starting from zero.
    Hitting the iteration cap yields ``converged=False`` rather than an
    exception.  ``on_separation`` controls whether a quasi-separated
    calibration subset raises or is stopped at the coefficient bound
    (see :func:`poolcal.calibration.fit_multinomial_logit`).
    """
    method = normalize_method(method)
    if scheme is not None and scheme.category_count != dataset.category_count:
        raise ValidationError(
            f"scheme has {scheme.category_count} categories, "
            f"dataset has {dataset.category_count}"
        )
    calibration = fit_all_calibrations(dataset, on_separation=on_separation)
    tables = build_prob_tables(dataset, calibration, method)
    objective = PooledObjective(dataset, tables)

    x0 = np.zeros(objective.n_parameters)
    if not np.isfinite(objective.value(Beta.from_array(
            x0, dataset.category_count, dataset.covariate_count))):
        raise PoolcalError("pooled objective is not finite at the zero start")

    def value_and_grad(x):
        b = Beta.from_array(x, dataset.category_count, dataset.covariate_count)
        return objective.value_and_score(b)

    result = maximize_bfgs(
        value_and_grad, x0, gtol=GRADIENT_TOL, max_iterations=MAX_ITERATIONS
    )
    beta = Beta.from_array(result.x, dataset.category_count, dataset.covariate_count)

    covariance = sandwich_covariance(beta, calibration, dataset, method)

    notes = []
    if any(block.controls_only for block in calibration.studies.values()):
        big = np.abs(beta.beta_x) > LARGE_EFFECT_THRESHOLD
        if np.any(big):
            msg = (
                "control-only calibration assumes a small biomarker effect; "
                "estimated |log RR| exceeds log(2) for "
                + ", ".join(
                    f"cat{p + 2}" for p in np.flatnonzero(big)
                )
            )
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)

    return _assemble_result(
        METHOD_LABELS[method],
        beta,
        covariance,
        result.converged,
        result.iterations,
        result.gradient_norm,
        calibration=calibration,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# Stacked sandwich covariance
# ---------------------------------------------------------------------------


def _calibration_member_scores(dataset, calibration):
    """Per-stratum calibration-score rows, (n_strata, 2*(P-1)*S).

    Stratum rows hold the summed multinomial score contributions of the
    stratum's calibration-subset members, placed in their study's block;
    strata without calibration members contribute zero rows.
    """
    P = dataset.category_count
    pm1 = P - 1
    block = 2 * pm1
    n_cal_params = block * len(dataset.studies)
    rows = np.zeros((dataset.n_strata, n_cal_params))
    for idx, (si, study, stratum) in enumerate(dataset.iter_strata()):
        members = [p for p in stratum.participants if p.in_calibration]
        if not members:
            continue
        cal = calibration.study(study.study_id)
        w = np.array([p.local_value for p in members])
        probs = _category_prob_matrix(cal.intercepts, cal.slopes, w)[:, 1:]
        onehot = np.zeros((len(members), pm1))
        for i, p in enumerate(members):
            if p.ref_category >= 2:
                onehot[i, p.ref_category - 2] = 1.0
        resid = onehot - probs
        offset = si * block
        rows[idx, offset : offset + pm1] = resid.sum(axis=0)
        rows[idx, offset + pm1 : offset + block] = (resid * w[:, None]).sum(axis=0)
    return rows


def _calibration_information(dataset, calibration):
    """Block-diagonal observed information of the calibration fits."""
    P = dataset.category_count
    pm1 = P - 1
    block = 2 * pm1
    info = np.zeros((block * len(dataset.studies), block * len(dataset.studies)))
    for si, study in enumerate(dataset.studies):
        members = study.calibration_participants()
        cal = calibration.study(study.study_id)
        w = np.array([p.local_value for p in members])
        onehot = np.zeros((len(members), pm1))
        for i, p in enumerate(members):
            if p.ref_category >= 2:
                onehot[i, p.ref_category - 2] = 1.0
        params = np.concatenate([cal.intercepts, cal.slopes])
        hess = _multinomial_hessian(params, w, onehot)
        info[si * block : (si + 1) * block, si * block : (si + 1) * block] = -hess
    return info


def sandwich_covariance(
    beta: Beta,
    calibration: CalibrationModel,
    dataset: PooledDataset,
    method: str,
    *,
    return_full: bool = False,
):
    """Stacked-estimating-equation covariance of the fitted coefficients.

    The parameter stack is (per-study calibration intercepts and slopes,
    regression coefficients); the independent unit is the stratum, whose
    estimating function concatenates its members' calibration scores with
    its pseudo-likelihood score.  With A the negative Jacobian of the summed
    estimating functions and B the sum of their outer products, the
    covariance is A^-1 B A^-T; the regression block is returned.

    Cross Jacobian blocks (regression score vs calibration parameters) are
    computed by central finite differences on the analytic scores.
    """
    method = normalize_method(method)
    P = dataset.category_count
    K = dataset.covariate_count
    pm1 = P - 1
    block = 2 * pm1
    study_ids = dataset.study_ids
    n_cal = block * len(study_ids)
    d = pm1 + K

    cal_vec = np.concatenate(
        [
            np.concatenate(
                [calibration.study(sid).intercepts, calibration.study(sid).slopes]
            )
            for sid in study_ids
        ]
    )

    def tables_at(vec):
        params = {}
        for si, sid in enumerate(study_ids):
            chunk = vec[si * block : (si + 1) * block]
            params[sid] = (chunk[:pm1], chunk[pm1:])
        return prob_tables_from_params(dataset, params, method)

    objective = PooledObjective(dataset, tables_at(cal_vec))
    beta_score_total = objective.score(beta)
    if np.max(np.abs(beta_score_total)) > 1e-6:
        warnings.warn(
            "regression score is not at a stationary point "
            f"(inf-norm {np.max(np.abs(beta_score_total)):.2e})",
            stacklevel=2,
        )

    # B: per-stratum estimating-function outer products
    psi = np.zeros((dataset.n_strata, n_cal + d))
    psi[:, :n_cal] = _calibration_member_scores(dataset, calibration)
    psi[:, n_cal:] = objective.per_stratum_scores(beta)
    bread_b = psi.T @ psi

    # A: stacked negative Jacobian
    a_matrix = np.zeros((n_cal + d, n_cal + d))
    a_matrix[:n_cal, :n_cal] = _calibration_information(dataset, calibration)

    def beta_score_at_cal(vec):
        return PooledObjective(dataset, tables_at(vec)).score(beta)

    a_matrix[n_cal:, :n_cal] = -central_difference_jacobian(
        beta_score_at_cal, cal_vec
    )

    def beta_score_at_beta(x):
        return objective.score(Beta.from_array(x, P, K))

    hess_beta = central_difference_jacobian(beta_score_at_beta, beta.as_array())
    a_matrix[n_cal:, n_cal:] = -0.5 * (hess_beta + hess_beta.T)

    rank = np.linalg.matrix_rank(a_matrix)
    if rank < n_cal + d:
        raise RankDefectError(
            f"stacked information matrix is rank deficient ({rank} < {n_cal + d}); "
            "an unidentified calibration category is the usual cause"
        )

    inner = np.linalg.solve(a_matrix, bread_b)
    full_cov = np.linalg.solve(a_matrix, inner.T).T
    full_cov = 0.5 * (full_cov + full_cov.T)
    beta_cov = full_cov[n_cal:, n_cal:]
    if return_full:
        return beta_cov, full_cov
    return beta_cov


# ---------------------------------------------------------------------------
# Conditional-logistic fits with known categories
# ---------------------------------------------------------------------------


def _one_hot_tables(dataset: PooledDataset, categories) -> list[np.ndarray]:
    P = dataset.category_count
    tables = []
    for cats in categories:
        cats = np.asarray(cats, dtype=int)
        t = np.zeros((cats.size, P))
        t[np.arange(cats.size), cats - 1] = 1.0
        tables.append(t)
    return tables


def _observed_categories(dataset: PooledDataset) -> list[np.ndarray]:
    categories = []
    for _, study, stratum in dataset.iter_strata():
        cats = []
        for p in stratum.participants:
            if p.ref_category is None:
                raise ValidationError(
                    f"stratum {stratum.stratum_id!r} of study {study.study_id!r} "
                    "has a participant without an observed category"
                )
            cats.append(p.ref_category)
        categories.append(np.array(cats))
    return categories


def _clr_maximize(dataset: PooledDataset, categories, method_label: str,
                  **result_kwargs) -> FitResult:
    P = dataset.category_count
    K = dataset.covariate_count
    tables = _one_hot_tables(dataset, categories)
    objective = PooledObjective(dataset, tables)

    counts = np.zeros(P, dtype=int)
    for cats in categories:
        for c in np.asarray(cats, dtype=int):
            counts[c - 1] += 1
    empty = np.flatnonzero(counts == 0) + 1
    force_nonconverged = False
    if empty.size:
        warnings.warn(
            f"categories {empty.tolist()} never observed; the corresponding "
            "coefficients are unidentified",
            stacklevel=3,
        )
        force_nonconverged = True

    def value_and_grad(x):
        return objective.value_and_score(Beta.from_array(x, P, K))

    def score_only(x):
        return objective.score(Beta.from_array(x, P, K))

    def hessian(x):
        h = central_difference_jacobian(score_only, x)
        return 0.5 * (h + h.T)

    d = (P - 1) + K
    result = maximize_newton(
        value_and_grad, hessian, np.zeros(d),
        gtol=GRADIENT_TOL, max_iterations=100,
    )
    beta = Beta.from_array(result.x, P, K)

    info = -hessian(result.x)
    try:
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        covariance = np.full((d, d), np.nan)
        force_nonconverged = True

    return _assemble_result(
        method_label,
        beta,
        covariance,
        result.converged and not force_nonconverged,
        result.iterations,
        result.gradient_norm,
        **result_kwargs,
    )


def clr_fit(dataset: PooledDataset, categories=None) -> FitResult:
    """Classical conditional-logistic fit with fully observed categories.

    ``categories`` is a list of per-stratum category arrays in canonical
    order; when omitted, every participant's observed reference category is
    used (and must be present).  The covariance is model based (inverse
    observed information).
    """
    if categories is None:
        categories = _observed_categories(dataset)
    return _clr_maximize(dataset, categories, "CLR-knownX")


def naive_fit(dataset: PooledDataset, scheme: CategoryScheme) -> FitResult:
    """Conditional-logistic fit on locally measured values categorized as-is."""
    if scheme.cut_points is None:
        raise ValidationError("naive_fit requires a cut-point scheme")
    if scheme.category_count != dataset.category_count:
        raise ValidationError("scheme and dataset category counts differ")
    categories = [
        np.array([categorize(p.local_value, scheme) for p in stratum.participants])
        for _, _, stratum in dataset.iter_strata()
    ]
    return _clr_maximize(dataset, categories, "Naive")


def linear_calibration_fit(dataset: PooledDataset, scheme: CategoryScheme) -> FitResult:
    """Comparator fit imputing the continuous reference measurement per study.

    A least-squares line fitted in each calibration subset imputes the
    reference measurement for every participant; the imputed values are then
    categorized and passed to the conditional-logistic fit.
    """
    if scheme.cut_points is None:
        raise ValidationError("linear_calibration_fit requires a cut-point scheme")
    if scheme.category_count != dataset.category_count:
        raise ValidationError("scheme and dataset category counts differ")
    models = {
        sid: fit_linear_calibration(dataset, sid) for sid in dataset.study_ids
    }
    categories = []
    for _, study, stratum in dataset.iter_strata():
        model = models[study.study_id]
        imputed = model.impute([p.local_value for p in stratum.participants])
        categories.append(np.array([categorize(v, scheme) for v in imputed]))
    return _clr_maximize(
        dataset, categories, "LinearCalibration", linear_calibration=models
    )
