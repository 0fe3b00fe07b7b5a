"""Conditional-logistic and calibrated pseudo-likelihoods for matched strata.

With fully observed categories, a stratum of one case and M controls
contributes the classical conditional-logistic term

    exp(eta_case) / sum_i exp(eta_i),    eta_i = beta_x . B(cat_i) + beta_z . z_i,

where B is the dummy coding of the category.  When only the local
measurement is observed, the contribution marginalizes over all P^(M+1)
joint category assignments, weighting each assignment by the product of the
participants' estimated category-membership probabilities:

    sum over assignments  [ prod_i probs[i][p_i] ] * exp(eta_1) / sum_i exp(eta_i).

Under Full calibration every participant's probability row comes from the
calibration model; under Internalized calibration, calibration-subset
members instead contribute a degenerate (one-hot) row at their observed
reference category.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .calibration import CalibrationModel
from .data import PooledDataset
from .errors import EnumerationLimitError, PoolcalError

__all__ = [
    "Beta",
    "FULL",
    "INTERNALIZED",
    "clr_stratum_loglik",
    "pseudo_stratum_loglik",
    "build_prob_tables",
    "pooled_logpseudolik",
    "pooled_score",
    "PooledObjective",
]

FULL = "full"
INTERNALIZED = "internalized"

MAX_ENUMERATION_TERMS = 1_000_000


def normalize_method(method: str) -> str:
    m = str(method).strip().lower()
    if m not in (FULL, INTERNALIZED):
        raise PoolcalError(f"unknown calibration method {method!r}")
    return m


@dataclass(frozen=True)
class Beta:
    """Regression coefficients: category log relative risks plus covariate effects."""

    beta_x: np.ndarray
    beta_z: np.ndarray

    def __post_init__(self):
        bx = np.atleast_1d(np.asarray(self.beta_x, dtype=float))
        bz = np.asarray(self.beta_z, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(bx)) and np.all(np.isfinite(bz))):
            raise PoolcalError("beta components must be finite")
        object.__setattr__(self, "beta_x", bx)
        object.__setattr__(self, "beta_z", bz)

    @classmethod
    def zeros(cls, category_count: int, covariate_count: int = 0) -> "Beta":
        return cls(np.zeros(category_count - 1), np.zeros(covariate_count))

    @classmethod
    def from_array(cls, values, category_count: int, covariate_count: int = 0) -> "Beta":
        values = np.asarray(values, dtype=float)
        pm1 = category_count - 1
        if values.size != pm1 + covariate_count:
            raise PoolcalError(
                f"expected {pm1 + covariate_count} coefficients, got {values.size}"
            )
        return cls(values[:pm1], values[pm1:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.beta_x, self.beta_z])

    @property
    def category_count(self) -> int:
        return len(self.beta_x) + 1

    @property
    def covariate_count(self) -> int:
        return len(self.beta_z)


def _category_effects(beta: Beta) -> np.ndarray:
    """Per-category linear predictor contribution, 0 for the reference level."""
    return np.concatenate([[0.0], beta.beta_x])


def _linear_predictors(beta: Beta, categories, covariates) -> np.ndarray:
    cats = np.asarray(categories, dtype=int)
    eta = _category_effects(beta)[cats - 1]
    if covariates is not None and beta.covariate_count:
        eta = eta + np.asarray(covariates, dtype=float) @ beta.beta_z
    return eta


def clr_stratum_loglik(beta: Beta, categories, covariates=None) -> float:
    """Log conditional-logistic contribution of one stratum (case first)."""
    eta = _linear_predictors(beta, categories, covariates)
    return float(eta[0] - logsumexp(eta))


@lru_cache(maxsize=None)
def _assignment_grid(n_members: int, category_count: int) -> np.ndarray:
    """All joint category assignments as an (n_assign, n_members) index array.

    Entries are 0-based category indices; row order is fixed so that sums
    are reproducible.
    """
    grid = np.indices((category_count,) * n_members).reshape(n_members, -1).T
    grid = np.ascontiguousarray(grid)
    grid.setflags(write=False)
    return grid


@lru_cache(maxsize=None)
def _assignment_indicators(n_members: int, category_count: int) -> np.ndarray:
    """Dummy coding of every assignment: (n_assign, n_members, P-1)."""
    grid = _assignment_grid(n_members, category_count)
    ind = np.zeros(grid.shape + (category_count - 1,))
    for p in range(1, category_count):
        ind[..., p - 1] = grid == p
    ind.setflags(write=False)
    return ind


def _check_enumeration_size(n_members: int, category_count: int) -> None:
    if category_count ** n_members > MAX_ENUMERATION_TERMS:
        raise EnumerationLimitError(
            f"stratum with {n_members - 1} controls and {category_count} categories "
            f"needs {category_count ** n_members} enumeration terms "
            f"(limit {MAX_ENUMERATION_TERMS}); the matching ratio is too large "
            "for exact enumeration"
        )


def pseudo_stratum_loglik(beta: Beta, probs, covariates=None) -> float:
    """Log pseudo-likelihood contribution of one stratum.

    ``probs`` is an (M+1, P) matrix whose rows are the participants'
    category-membership probabilities (case first).  The exact sum over all
    P^(M+1) assignments is accumulated with compensated summation in a fixed
    order.
    """
    probs = np.asarray(probs, dtype=float)
    n_members, P = probs.shape
    _check_enumeration_size(n_members, P)
    if np.any(probs < -1e-12):
        raise PoolcalError("probability table has negative entries")

    grid = _assignment_grid(n_members, P)
    eta_cat = _category_effects(beta)
    eta = eta_cat[grid]
    if covariates is not None and beta.covariate_count:
        eta = eta + (np.asarray(covariates, dtype=float) @ beta.beta_z)[None, :]
    log_clr = eta[:, 0] - logsumexp(eta, axis=1)
    weights = probs[np.arange(n_members)[None, :], grid].prod(axis=1)
    total = math.fsum((weights * np.exp(log_clr)).tolist())
    if total <= 0.0:
        raise PoolcalError("pseudo-likelihood underflowed to zero")
    return math.log(total)


def build_prob_tables(
    dataset: PooledDataset,
    calibration: CalibrationModel,
    method: str,
) -> list[np.ndarray]:
    """Per-stratum probability tables in canonical stratum order.

    Full: every row is the calibration model's prediction at the local
    measurement, even when the reference category was observed.
    Internalized: calibration-subset members get a one-hot row at their
    observed category; everyone else gets the model prediction.
    """
    params = {
        sid: (calibration.study(sid).intercepts, calibration.study(sid).slopes)
        for sid in dataset.study_ids
    }
    return prob_tables_from_params(dataset, params, method)


def prob_tables_from_params(dataset, per_study_params, method) -> list[np.ndarray]:
    """Probability tables from raw per-study (intercepts, slopes) pairs.

    The prediction is vectorized over each whole study, which keeps
    repeated table rebuilds (as in the sandwich variance Jacobians) cheap.
    """
    method = normalize_method(method)
    P = dataset.category_count
    tables: list[np.ndarray] = [None] * dataset.n_strata  # type: ignore[list-item]
    offset = 0
    for study in dataset.studies:
        intercepts, slopes = per_study_params[study.study_id]
        intercepts = np.asarray(intercepts, dtype=float)
        slopes = np.asarray(slopes, dtype=float)
        w, sizes, onehot_rows = _study_layout(study, P)
        eta = np.zeros((w.size, P))
        eta[:, 1:] = intercepts[None, :] + slopes[None, :] * w[:, None]
        eta -= eta.max(axis=1, keepdims=True)
        probs = np.exp(eta)
        probs /= probs.sum(axis=1, keepdims=True)
        if method == INTERNALIZED and onehot_rows is not None:
            probs[onehot_rows[0]] = 0.0
            probs[onehot_rows] = 1.0
        start = 0
        for j, size in enumerate(sizes):
            tables[offset + j] = probs[start : start + size]
            start += size
        offset += len(sizes)
    return tables


def _study_layout(study, category_count: int):
    """Flattened measurement vector, stratum sizes, and one-hot indices."""
    w = []
    sizes = []
    cal_rows = []
    cal_cats = []
    pos = 0
    for stratum in study.strata:
        sizes.append(len(stratum.participants))
        for p in stratum.participants:
            w.append(p.local_value)
            if p.in_calibration:
                cal_rows.append(pos)
                cal_cats.append(p.ref_category - 1)
            pos += 1
    onehot_rows = None
    if cal_rows:
        onehot_rows = (np.array(cal_rows), np.array(cal_cats))
    return np.array(w, dtype=float), tuple(sizes), onehot_rows


class PooledObjective:
    """Vectorized pooled pseudo-log-likelihood and its gradient.

    Strata are grouped by matched-set size so the assignment enumeration can
    be evaluated as dense tensor operations.  Group reductions run in the
    canonical stratum order, making every evaluation bit-reproducible.
    """

    def __init__(self, dataset: PooledDataset, tables):
        P = dataset.category_count
        K = dataset.covariate_count
        self.category_count = P
        self.covariate_count = K
        self.n_parameters = (P - 1) + K
        self.n_strata = dataset.n_strata

        strata = [(si, st) for si, _, st in dataset.iter_strata()]
        if len(tables) != len(strata):
            raise PoolcalError("one probability table per stratum required")

        by_size: dict[int, list[int]] = {}
        for idx, (_, st) in enumerate(strata):
            by_size.setdefault(len(st.participants), []).append(idx)

        self._groups = []
        for n_members, indices in sorted(by_size.items()):
            _check_enumeration_size(n_members, P)
            grid = _assignment_grid(n_members, P)
            probs = np.stack([np.asarray(tables[i], dtype=float) for i in indices])
            if probs.shape[1:] != (n_members, P):
                raise PoolcalError("probability table shape mismatch")
            weights = probs[:, np.arange(n_members)[None, :], grid].prod(axis=2)
            z = None
            if K:
                z = np.stack(
                    [
                        np.array([p.covariates for p in strata[i][1].participants])
                        for i in indices
                    ]
                )
            self._groups.append(
                {
                    "indices": np.array(indices),
                    "grid": grid,
                    "indicators": _assignment_indicators(n_members, P),
                    "weights": weights,
                    "z": z,
                }
            )

    def _eta(self, beta: Beta, group):
        eta = _category_effects(beta)[group["grid"]][None, :, :]
        if group["z"] is not None and beta.covariate_count:
            eta = eta + (group["z"] @ beta.beta_z)[:, None, :]
        return eta

    def value(self, beta: Beta) -> float:
        total = 0.0
        for group in self._groups:
            eta = self._eta(beta, group)
            log_clr = eta[:, :, 0] - logsumexp(eta, axis=2)
            per_stratum = (group["weights"] * np.exp(log_clr)).sum(axis=1)
            if np.any(per_stratum <= 0.0):
                return -np.inf
            total += float(np.log(per_stratum).sum())
        return total

    def value_and_score(self, beta: Beta):
        value = 0.0
        score = np.zeros(self.n_parameters)
        for group, contrib in self._iter_group_scores(beta):
            value += contrib["value"]
            score += contrib["score"]
        return value, score

    def score(self, beta: Beta) -> np.ndarray:
        return self.value_and_score(beta)[1]

    def per_stratum_scores(self, beta: Beta) -> np.ndarray:
        """Score contributions per stratum, (n_strata, n_parameters)."""
        out = np.zeros((self.n_strata, self.n_parameters))
        for group, contrib in self._iter_group_scores(beta):
            out[group["indices"]] = contrib["per_stratum"]
        return out

    def _iter_group_scores(self, beta: Beta):
        pm1 = self.category_count - 1
        for group in self._groups:
            eta = self._eta(beta, group)
            lse = logsumexp(eta, axis=2)
            log_clr = eta[:, :, 0] - lse
            t = group["weights"] * np.exp(log_clr)
            per_stratum_lik = t.sum(axis=1)
            if np.any(per_stratum_lik <= 0.0):
                yield group, {
                    "value": -np.inf,
                    "score": np.full(self.n_parameters, np.nan),
                    "per_stratum": np.full(
                        (len(group["indices"]), self.n_parameters), np.nan
                    ),
                }
                continue
            posterior = t / per_stratum_lik[:, None]
            members_soft = np.exp(eta - lse[:, :, None])

            ind = group["indicators"]
            gx = ind[None, :, 0, :] - np.einsum(
                "sai,aik->sak", members_soft, ind, optimize=True
            )
            per_stratum = np.einsum("sa,sak->sk", posterior, gx, optimize=True)
            if group["z"] is not None and self.covariate_count:
                gz = group["z"][:, None, 0, :] - np.einsum(
                    "sai,sij->saj", members_soft, group["z"], optimize=True
                )
                per_z = np.einsum("sa,saj->sj", posterior, gz, optimize=True)
                per_stratum = np.concatenate([per_stratum, per_z], axis=1)
            yield group, {
                "value": float(np.log(per_stratum_lik).sum()),
                "score": per_stratum.sum(axis=0),
                "per_stratum": per_stratum,
            }


def pooled_logpseudolik(beta: Beta, dataset: PooledDataset, tables) -> float:
    """Pooled pseudo-log-likelihood: sum of stratum contributions."""
    return PooledObjective(dataset, tables).value(beta)


def pooled_score(beta: Beta, dataset: PooledDataset, tables) -> np.ndarray:
    """Analytic gradient of the pooled pseudo-log-likelihood."""
    return PooledObjective(dataset, tables).score(beta)
