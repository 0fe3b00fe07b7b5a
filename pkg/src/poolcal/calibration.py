"""Study-specific calibration of local biomarker measurements.

Each study's calibration subset (participants re-assayed at the reference
laboratory) supports a multinomial logistic model for the probability that
the reference measurement falls in each category given the local
measurement:

    log Pr(category p | w) / Pr(category 1 | w) = a_p + b_p * w,  p = 2..P.

The model conditions on the local measurement only; adjustment covariates
are assumed to carry no additional information about the reference category
and are never used here.  A linear-regression calibration of the continuous
reference measurement is also provided as a comparator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import PooledDataset
from .errors import CalibrationError, SeparationError

__all__ = [
    "StudyCalibration",
    "CalibrationModel",
    "LinearCalibrationModel",
    "fit_calibration",
    "fit_all_calibrations",
    "fit_multinomial_logit",
    "predict_category_probs",
    "fit_linear_calibration",
]

GRADIENT_TOL = 1e-8
MAX_ITERATIONS = 100
COEFFICIENT_BOUND = 50.0
MAX_NEWTON_STEP = 10.0

ON_SEPARATION_ERROR = "error"
ON_SEPARATION_CAP = "cap"


@dataclass(frozen=True)
class StudyCalibration:
    """Fitted multinomial calibration coefficients for one study.

    ``intercepts[p-2]`` and ``slopes[p-2]`` hold a_p and b_p for category p.
    ``controls_only`` records whether the subset contained controls only
    (None when unknown, e.g. after JSON round-trip).  ``separated`` marks a
    quasi-separated subset whose coefficients were stopped at the magnitude
    bound instead of diverging.
    """

    study_id: str
    intercepts: np.ndarray
    slopes: np.ndarray
    n_calibration: int
    controls_only: bool | None = None
    separated: bool = False

    def __post_init__(self):
        a = np.asarray(self.intercepts, dtype=float)
        b = np.asarray(self.slopes, dtype=float)
        if a.shape != b.shape or a.ndim != 1:
            raise CalibrationError("intercepts and slopes must be equal-length vectors")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise CalibrationError("calibration coefficients must be finite")
        object.__setattr__(self, "intercepts", a)
        object.__setattr__(self, "slopes", b)

    @property
    def category_count(self) -> int:
        return len(self.intercepts) + 1


@dataclass(frozen=True)
class CalibrationModel:
    """Calibration blocks for every study, keyed by study id."""

    category_count: int
    studies: dict[str, StudyCalibration]

    def study(self, study_id: str) -> StudyCalibration:
        try:
            return self.studies[study_id]
        except KeyError:
            raise CalibrationError(f"no calibration model for study {study_id!r}") from None

    def to_json_dict(self) -> dict:
        return {
            sid: {
                "a": [float(v) for v in block.intercepts],
                "b": [float(v) for v in block.slopes],
                "n": block.n_calibration,
            }
            for sid, block in self.studies.items()
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "CalibrationModel":
        studies = {}
        category_count = None
        for sid, block in payload.items():
            sc = StudyCalibration(
                study_id=sid,
                intercepts=np.asarray(block["a"], dtype=float),
                slopes=np.asarray(block["b"], dtype=float),
                n_calibration=int(block["n"]),
                controls_only=None,
            )
            if category_count is None:
                category_count = sc.category_count
            elif category_count != sc.category_count:
                raise CalibrationError("inconsistent category counts across studies")
            studies[sid] = sc
        if category_count is None:
            raise CalibrationError("empty calibration payload")
        return cls(category_count=category_count, studies=studies)


@dataclass(frozen=True)
class LinearCalibrationModel:
    """Least-squares line relating the reference to the local measurement."""

    study_id: str
    intercept: float
    slope: float

    def __post_init__(self):
        if not (math.isfinite(self.intercept) and math.isfinite(self.slope)):
            raise CalibrationError("linear calibration coefficients must be finite")

    def impute(self, w):
        return self.intercept + self.slope * np.asarray(w, dtype=float)


# ---------------------------------------------------------------------------
# Multinomial logistic fit
# ---------------------------------------------------------------------------


def _category_prob_matrix(intercepts, slopes, w):
    """Probability matrix (n, P) of the multinomial model at measurements w."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    eta = np.zeros((w.size, len(intercepts) + 1))
    eta[:, 1:] = intercepts[None, :] + slopes[None, :] * w[:, None]
    eta -= eta.max(axis=1, keepdims=True)
    p = np.exp(eta)
    p /= p.sum(axis=1, keepdims=True)
    return p


def _multinomial_loglik_grad(params, w, onehot):
    """Log-likelihood and gradient; params = [a_2..a_P, b_2..b_P]."""
    pm1 = onehot.shape[1]
    a, b = params[:pm1], params[pm1:]
    probs = _category_prob_matrix(a, b, w)
    eta = np.zeros_like(probs)
    eta[:, 1:] = a[None, :] + b[None, :] * w[:, None]
    m = eta.max(axis=1)
    logden = m + np.log(np.exp(eta - m[:, None]).sum(axis=1))
    eta_obs = (eta[:, 1:] * onehot).sum(axis=1)
    loglik = float((eta_obs - logden).sum())
    resid = onehot - probs[:, 1:]
    grad = np.concatenate([resid.sum(axis=0), (resid * w[:, None]).sum(axis=0)])
    return loglik, grad


def _multinomial_hessian(params, w, onehot):
    """Hessian of the multinomial log-likelihood at params."""
    pm1 = onehot.shape[1]
    a, b = params[:pm1], params[pm1:]
    probs = _category_prob_matrix(a, b, w)[:, 1:]
    # per-row curvature: diag(pi) - pi pi^T, scaled by [1, w] x [1, w]
    n = len(w)
    curv = -np.einsum("np,nq->npq", probs, probs)
    idx = np.arange(pm1)
    curv[:, idx, idx] += probs
    features = np.stack([np.ones(n), w], axis=1)
    fk = np.einsum("na,nb->nab", features, features)
    hess = -np.einsum("nab,npq->apbq", fk, curv).reshape(2 * pm1, 2 * pm1)
    return hess


def fit_multinomial_logit(w, categories, category_count: int,
                          *, gtol: float = GRADIENT_TOL,
                          max_iterations: int = MAX_ITERATIONS,
                          on_separation: str = ON_SEPARATION_ERROR):
    """Maximum-likelihood multinomial logistic fit of categories on w.

    Damped Newton iteration from the zero vector with a per-iteration step
    cap; the log-likelihood is concave so the start point is immaterial.
    Returns ``(intercepts, slopes, separated)``.

    Quasi-complete separation makes the likelihood maximum run to infinity;
    it is detected when a coefficient magnitude would exceed
    ``COEFFICIENT_BOUND``.  With ``on_separation="error"`` a
    :class:`SeparationError` is raised; with ``"cap"`` the last iterate
    inside the bound is returned with ``separated=True`` (the curve is then
    effectively a step function at the separating boundary, matching how
    iteration-capped solvers in standard software behave on such subsets).
    """
    if on_separation not in (ON_SEPARATION_ERROR, ON_SEPARATION_CAP):
        raise CalibrationError(f"unknown on_separation mode {on_separation!r}")
    w = np.asarray(w, dtype=float)
    categories = np.asarray(categories, dtype=int)
    if w.shape != categories.shape or w.ndim != 1:
        raise CalibrationError("w and categories must be equal-length vectors")
    pm1 = category_count - 1
    onehot = np.zeros((len(w), pm1))
    for p in range(2, category_count + 1):
        onehot[categories == p, p - 2] = 1.0

    def separated_result(params):
        if on_separation == ON_SEPARATION_ERROR:
            raise SeparationError(
                "quasi-complete separation: coefficient magnitude exceeded "
                f"{COEFFICIENT_BOUND:g}"
            )
        return params[:pm1].copy(), params[pm1:].copy(), True

    params = np.zeros(2 * pm1)
    loglik, grad = _multinomial_loglik_grad(params, w, onehot)
    for _ in range(max_iterations):
        if np.max(np.abs(grad)) <= gtol:
            return params[:pm1].copy(), params[pm1:].copy(), False
        hess = _multinomial_hessian(params, w, onehot)
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise CalibrationError(
                "singular design in calibration fit (degenerate measurements)"
            ) from None
        if float(grad @ step) <= 0.0:
            step = grad
        too_big = np.max(np.abs(step))
        if too_big > MAX_NEWTON_STEP:
            step = step * (MAX_NEWTON_STEP / too_big)
        t = 1.0
        slack = 1e-10 * max(1.0, abs(loglik))  # tolerate sub-ulp improvements
        for _ in range(60):
            candidate = params + t * step
            new_loglik, new_grad = _multinomial_loglik_grad(candidate, w, onehot)
            if np.isfinite(new_loglik) and new_loglik > loglik - slack:
                break
            t *= 0.5
        else:
            return separated_result(params)
        if np.max(np.abs(candidate)) > COEFFICIENT_BOUND:
            return separated_result(params)
        params, loglik, grad = candidate, new_loglik, new_grad
    return separated_result(params)


def _calibration_arrays(dataset: PooledDataset, study_id: str):
    study = dataset.study(study_id)
    rows = study.calibration_participants()
    w = np.array([p.local_value for p in rows], dtype=float)
    cat = np.array([p.ref_category for p in rows], dtype=int)
    outcome = np.array([p.outcome for p in rows], dtype=int)
    return w, cat, outcome


def fit_calibration(
    dataset: PooledDataset,
    study_id: str,
    *,
    on_separation: str = ON_SEPARATION_ERROR,
) -> StudyCalibration:
    """Fit one study's multinomial calibration model on its calibration subset."""
    P = dataset.category_count
    w, cat, outcome = _calibration_arrays(dataset, study_id)
    if len(w) == 0:
        raise CalibrationError(f"study {study_id!r} has an empty calibration subset")
    if len(w) < P:
        raise CalibrationError(
            f"study {study_id!r}: calibration subset has {len(w)} rows, "
            f"need at least {P}"
        )
    present = set(int(c) for c in cat)
    missing = [p for p in range(1, P + 1) if p not in present]
    if missing:
        raise SeparationError(
            f"study {study_id!r}: categories {missing} absent from the calibration subset"
        )
    try:
        intercepts, slopes, separated = fit_multinomial_logit(
            w, cat, P, on_separation=on_separation
        )
    except SeparationError as exc:
        raise SeparationError(f"study {study_id!r}: {exc}") from None
    return StudyCalibration(
        study_id=study_id,
        intercepts=intercepts,
        slopes=slopes,
        n_calibration=len(w),
        controls_only=bool(np.all(outcome == 0)),
        separated=separated,
    )


def fit_all_calibrations(
    dataset: PooledDataset, *, on_separation: str = ON_SEPARATION_ERROR
) -> CalibrationModel:
    """Fit every study's calibration block (independent fits per study)."""
    studies = {
        sid: fit_calibration(dataset, sid, on_separation=on_separation)
        for sid in dataset.study_ids
    }
    return CalibrationModel(category_count=dataset.category_count, studies=studies)


def predict_category_probs(model: CalibrationModel, study_id: str, w) -> np.ndarray:
    """Estimated category-membership probabilities at measurement(s) w.

    Returns a probability vector of length P for scalar w, or an (n, P)
    matrix for a vector of measurements.  Computed with max-centering so the
    components always sum to 1 within 1e-12.
    """
    block = model.study(study_id)
    w_arr = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w_arr)):
        raise CalibrationError("w must be finite")
    probs = _category_prob_matrix(block.intercepts, block.slopes, w_arr)
    if w_arr.ndim == 0:
        return probs[0]
    return probs


def fit_linear_calibration(dataset: PooledDataset, study_id: str) -> LinearCalibrationModel:
    """Ordinary least squares of the continuous reference measurement on w."""
    study = dataset.study(study_id)
    pairs = [
        (p.local_value, p.ref_value)
        for p in study.calibration_participants()
        if p.ref_value is not None
    ]
    if len(pairs) < 2:
        raise CalibrationError(
            f"study {study_id!r}: linear calibration needs at least 2 rows "
            "with continuous reference values"
        )
    w = np.array([q[0] for q in pairs])
    x = np.array([q[1] for q in pairs])
    sxx = float(np.sum((w - w.mean()) ** 2))
    if sxx == 0.0:
        raise CalibrationError(
            f"study {study_id!r}: all local measurements identical (singular design)"
        )
    slope = float(np.sum((w - w.mean()) * (x - x.mean())) / sxx)
    intercept = float(x.mean() - slope * w.mean())
    return LinearCalibrationModel(study_id=study_id, intercept=intercept, slope=slope)
