"""Monte Carlo harness: dataset generators and replicate studies.

Two data-generating designs are supported.  In the direct-multinomial
design, local measurements are normal within study and the reference
category is drawn from the multinomial model at fixed true coefficients.
In the bivariate-normal design, a latent exposure generates both the local
and the continuous reference measurement, and the reference category comes
from fixed cut points.

Matched sets share a stratum-specific logistic intercept and are assembled
by role-conditioned rejection sampling: the case is a candidate accepted on
drawing outcome 1, each control a candidate accepted on drawing outcome 0.
Given the assembled set, the probability that any particular member is the
case has exactly the conditional-logistic form (the stratum intercept
cancels from the odds), so the matched-set likelihood is the estimand the
fitters target.

Replicate streams are counter-based: the generator for each stratum is
seeded by (seed, replicate, study, stratum slot), so any replicate can be
regenerated independently, in any order, on any number of workers.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit

from .data import CategoryScheme, Participant, PooledDataset, Stratum, Study
from .errors import PoolcalError, ValidationError
from .inference import (
    WALD_QUANTILE,
    FitResult,
    clr_fit,
    fit_pooled,
    linear_calibration_fit,
    naive_fit,
)
from .likelihood import FULL, INTERNALIZED

__all__ = [
    "ScenarioConfig",
    "DatasetTruth",
    "SimulationReport",
    "simulate_dataset",
    "run_simulation",
    "mc_standard_error",
    "SIM_METHODS",
]

DIRECT_MULTINOMIAL = "direct_multinomial"
BIVARIATE_NORMAL = "bivariate_normal"

SIM_METHODS = ("full", "internalized", "naive", "linear", "clr_known_x")

_MAX_REJECTION_ATTEMPTS = 100_000


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete parameterization of one simulation scenario."""

    design: str
    n_studies: int
    strata_per_study: tuple[int, ...]
    controls_per_case: int
    w_means: tuple[float, ...]
    beta_x: tuple[float, ...]
    n_calibration: int
    replicates: int
    seed: int
    intercept_mean: float = -1.0
    intercept_sd: float = 0.1
    # direct-multinomial design
    w_sd: float | None = None
    multinomial_a: tuple[tuple[float, ...], ...] | None = None
    multinomial_b: tuple[tuple[float, ...], ...] | None = None
    # bivariate-normal design
    latent_variance: float | None = None
    error_variance_w: float | None = None
    error_variance_x: float | None = None
    reference_intercept: float | None = None
    reference_slope: float | None = None
    cut_points: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.design not in (DIRECT_MULTINOMIAL, BIVARIATE_NORMAL):
            raise ValidationError(f"unknown design {self.design!r}")
        if self.n_studies < 1 or len(self.w_means) != self.n_studies:
            raise ValidationError("w_means must list one mean per study")
        if len(self.strata_per_study) != self.n_studies:
            raise ValidationError("strata_per_study must list one size per study")
        if any(n < 1 for n in self.strata_per_study):
            raise ValidationError("strata_per_study entries must be positive")
        if self.controls_per_case < 1:
            raise ValidationError("controls_per_case must be at least 1")
        if self.n_calibration < 1:
            raise ValidationError("n_calibration must be positive")
        if self.replicates < 1:
            raise ValidationError("replicates must be positive")
        if self.intercept_sd <= 0:
            raise ValidationError("intercept_sd must be positive")
        if self.design == DIRECT_MULTINOMIAL:
            if self.w_sd is None or self.w_sd <= 0:
                raise ValidationError("direct design requires positive w_sd")
            if self.multinomial_a is None or self.multinomial_b is None:
                raise ValidationError("direct design requires multinomial_a and multinomial_b")
            if len(self.multinomial_a) != self.n_studies or len(
                self.multinomial_b
            ) != self.n_studies:
                raise ValidationError("one multinomial parameter row per study required")
            widths = {len(r) for r in self.multinomial_a} | {
                len(r) for r in self.multinomial_b
            }
            if len(widths) != 1 or widths.pop() != len(self.beta_x):
                raise ValidationError(
                    "multinomial parameter rows must match the beta_x length"
                )
        else:
            for name in (
                "latent_variance",
                "error_variance_w",
                "error_variance_x",
                "reference_intercept",
                "reference_slope",
            ):
                if getattr(self, name) is None:
                    raise ValidationError(f"bivariate design requires {name}")
            if self.latent_variance <= 0 or self.error_variance_w < 0 or (
                self.error_variance_x < 0
            ):
                raise ValidationError("variance parameters must be positive")
            if self.cut_points is None or len(self.cut_points) != len(self.beta_x):
                raise ValidationError(
                    "cut_points must define one threshold per non-reference category"
                )
            if any(b <= a for a, b in zip(self.cut_points, self.cut_points[1:])):
                raise ValidationError("cut_points must be strictly increasing")

    @property
    def category_count(self) -> int:
        return len(self.beta_x) + 1

    def scheme(self) -> CategoryScheme:
        if self.design == BIVARIATE_NORMAL:
            return CategoryScheme.from_cut_points(self.cut_points)
        return CategoryScheme.direct(self.category_count)

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ScenarioConfig":
        data = dict(payload)
        try:
            n_studies = int(data.pop("studies"))
            strata = data.pop("strata_per_study")
            if isinstance(strata, (int, float)):
                strata = (int(strata),) * n_studies
            else:
                strata = tuple(int(v) for v in strata)
            kwargs = {
                "design": data.pop("design"),
                "n_studies": n_studies,
                "strata_per_study": strata,
                "controls_per_case": int(data.pop("controls_per_case", 1)),
                "w_means": tuple(float(v) for v in data.pop("w_means")),
                "beta_x": tuple(float(v) for v in data.pop("beta_x")),
                "n_calibration": int(data.pop("n_calibration")),
                "replicates": int(data.pop("replicates")),
                "seed": int(data.pop("seed")),
            }
        except KeyError as exc:
            raise ValidationError(f"config is missing required key {exc.args[0]!r}") from None
        for name in ("intercept_mean", "intercept_sd", "w_sd", "latent_variance",
                     "error_variance_w", "error_variance_x", "reference_intercept",
                     "reference_slope"):
            if name in data:
                kwargs[name] = float(data.pop(name))
        if "multinomial_a" in data:
            kwargs["multinomial_a"] = tuple(
                tuple(float(v) for v in row) for row in data.pop("multinomial_a")
            )
            kwargs["multinomial_b"] = tuple(
                tuple(float(v) for v in row) for row in data.pop("multinomial_b")
            )
        if "cut_points" in data:
            kwargs["cut_points"] = tuple(float(v) for v in data.pop("cut_points"))
        if data:
            raise ValidationError(f"unknown config keys: {sorted(data)}")
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as handle:
            return cls.from_json_dict(json.load(handle))

    def to_json_dict(self) -> dict:
        payload = {
            "design": self.design,
            "studies": self.n_studies,
            "strata_per_study": list(self.strata_per_study),
            "controls_per_case": self.controls_per_case,
            "w_means": list(self.w_means),
            "beta_x": list(self.beta_x),
            "intercept_mean": self.intercept_mean,
            "intercept_sd": self.intercept_sd,
            "n_calibration": self.n_calibration,
            "replicates": self.replicates,
            "seed": self.seed,
        }
        if self.design == DIRECT_MULTINOMIAL:
            payload["w_sd"] = self.w_sd
            payload["multinomial_a"] = [list(r) for r in self.multinomial_a]
            payload["multinomial_b"] = [list(r) for r in self.multinomial_b]
        else:
            payload["latent_variance"] = self.latent_variance
            payload["error_variance_w"] = self.error_variance_w
            payload["error_variance_x"] = self.error_variance_x
            payload["reference_intercept"] = self.reference_intercept
            payload["reference_slope"] = self.reference_slope
            payload["cut_points"] = list(self.cut_points)
        return payload

    def with_overrides(self, **changes) -> "ScenarioConfig":
        payload = self.to_json_dict()
        for key, value in changes.items():
            payload[key] = value
        return ScenarioConfig.from_json_dict(payload)


@dataclass(frozen=True)
class DatasetTruth:
    """Hidden generator state kept for auditing and known-category fits."""

    categories: list[np.ndarray]
    x_values: list[np.ndarray] | None


def _stratum_rng(config: ScenarioConfig, replicate: int, study: int, slot: int):
    seq = np.random.SeedSequence((config.seed, replicate, study, slot))
    return np.random.Generator(np.random.Philox(seq))


def _draw_candidates_direct(rng, config: ScenarioConfig, study_index: int, n: int):
    """Candidate (w, category) draws for the direct-multinomial design."""
    w = rng.normal(config.w_means[study_index], config.w_sd, size=n)
    a = np.asarray(config.multinomial_a[study_index])
    b = np.asarray(config.multinomial_b[study_index])
    eta = np.zeros((n, config.category_count))
    eta[:, 1:] = a[None, :] + b[None, :] * w[:, None]
    eta -= eta.max(axis=1, keepdims=True)
    probs = np.exp(eta)
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(n)
    cats = 1 + (u[:, None] > cdf).sum(axis=1)
    return w, cats.astype(int), None


def _draw_candidates_bivariate(rng, config: ScenarioConfig, study_index: int, n: int):
    """Candidate (w, category, x) draws for the bivariate-normal design.

    The latent exposure decomposition reproduces the joint normal with
    Cov(W, X) = slope * latent_variance (independent measurement errors).
    """
    latent = rng.normal(
        config.w_means[study_index], math.sqrt(config.latent_variance), size=n
    )
    w = latent + rng.normal(0.0, math.sqrt(config.error_variance_w), size=n)
    x = (
        config.reference_intercept
        + config.reference_slope * latent
        + rng.normal(0.0, math.sqrt(config.error_variance_x), size=n)
    )
    cuts = np.asarray(config.cut_points)
    cats = 1 + np.searchsorted(cuts, x, side="right")
    return w, cats.astype(int), x


_REJECTION_BATCH = 8


def _draw_members_with_outcome(rng, draw, config, study_index, intercept, outcome, count):
    """Accept ``count`` candidates whose sampled outcome equals ``outcome``.

    Candidates are drawn in fixed-size batches (a deterministic consumption
    pattern for the substream) and receive outcomes from the logistic model
    at the stratum intercept.
    """
    beta = np.asarray(config.beta_x)
    got_w, got_c, got_x = [], [], []
    for _ in range(_MAX_REJECTION_ATTEMPTS):
        w, cats, x = draw(rng, config, study_index, _REJECTION_BATCH)
        effects = np.where(cats > 1, beta[np.maximum(cats - 2, 0)], 0.0)
        y = rng.random(_REJECTION_BATCH) < expit(intercept + effects)
        keep = np.flatnonzero(y == outcome)
        for i in keep:
            got_w.append(w[i])
            got_c.append(cats[i])
            got_x.append(None if x is None else x[i])
            if len(got_w) == count:
                return got_w, got_c, got_x
    raise PoolcalError(  # pragma: no cover - unreachable for sane configs
        "rejection sampling failed to produce a matched set"
    )


def simulate_dataset(
    config: ScenarioConfig, replicate_index: int
) -> tuple[PooledDataset, DatasetTruth]:
    """Generate one replicate dataset plus its hidden truth.

    Deterministic in (config.seed, replicate_index).  Each matched set
    draws a stratum intercept, then accepts one candidate as the case
    (sampled outcome 1) and M candidates as controls (sampled outcome 0),
    case stored first.  Calibration subsets are simple random samples of
    controls, without replacement, per study; their members keep the
    reference category (and, in the bivariate design, the continuous
    reference value).
    """
    m1 = config.controls_per_case + 1
    draw = (
        _draw_candidates_direct
        if config.design == DIRECT_MULTINOMIAL
        else _draw_candidates_bivariate
    )

    studies = []
    truth_cats: list[np.ndarray] = []
    truth_x: list[np.ndarray] | None = (
        [] if config.design == BIVARIATE_NORMAL else None
    )
    for si in range(config.n_studies):
        raw_strata = []
        for j in range(config.strata_per_study[si]):
            rng = _stratum_rng(config, replicate_index, si, j + 1)
            intercept = rng.normal(config.intercept_mean, config.intercept_sd)
            case_w, case_c, case_x = _draw_members_with_outcome(
                rng, draw, config, si, intercept, 1, 1
            )
            ctrl_w, ctrl_c, ctrl_x = _draw_members_with_outcome(
                rng, draw, config, si, intercept, 0, config.controls_per_case
            )
            xs = case_x + ctrl_x
            raw_strata.append(
                {
                    "w": np.array(case_w + ctrl_w),
                    "cats": np.array(case_c + ctrl_c, dtype=int),
                    "x": None if xs[0] is None else np.array(xs, dtype=float),
                    "y": np.array([1] + [0] * config.controls_per_case),
                }
            )

        # sample calibration controls for this study
        controls = [
            (j, i)
            for j, stratum in enumerate(raw_strata)
            for i in range(1, m1)
        ]
        n_cal = min(config.n_calibration, len(controls))
        if n_cal < config.n_calibration:
            warnings.warn(
                f"study {si + 1}: only {len(controls)} controls available for "
                f"a calibration subset of {config.n_calibration}",
                stacklevel=2,
            )
        study_rng = _stratum_rng(config, replicate_index, si, 0)
        chosen = study_rng.choice(len(controls), size=n_cal, replace=False)
        selected = {controls[k] for k in np.sort(chosen)}

        strata = []
        for j, raw in enumerate(raw_strata):
            participants = []
            for i in range(m1):
                in_cal = (j, i) in selected
                participants.append(
                    Participant(
                        outcome=int(raw["y"][i]),
                        local_value=float(raw["w"][i]),
                        ref_category=int(raw["cats"][i]) if in_cal else None,
                        ref_value=(
                            float(raw["x"][i])
                            if in_cal and raw["x"] is not None
                            else None
                        ),
                        in_calibration=in_cal,
                    )
                )
            strata.append(
                Stratum(stratum_id=f"s{si + 1}-{j + 1}", participants=tuple(participants))
            )
            truth_cats.append(raw["cats"].astype(int))
            if truth_x is not None:
                truth_x.append(np.asarray(raw["x"], dtype=float))
        studies.append(Study(study_id=f"study{si + 1}", strata=tuple(strata)))

    dataset = PooledDataset(
        studies=tuple(studies),
        covariate_count=0,
        category_count=config.category_count,
    )
    return dataset, DatasetTruth(categories=truth_cats, x_values=truth_x)


# ---------------------------------------------------------------------------
# Replicate studies
# ---------------------------------------------------------------------------


@dataclass
class CoefficientSummary:
    name: str
    truth: float
    n_used: int
    mean_estimate: float
    percent_bias: float
    percent_bias_mc_se: float
    coverage: float
    coverage_mc_se: float
    mean_se: float
    mean_se_mc_se: float
    empirical_se: float | None
    empirical_se_mc_se: float | None


@dataclass
class MethodSummary:
    method: str
    n_used: int
    n_failed: int
    coefficients: list[CoefficientSummary]


@dataclass
class SimulationReport:
    config: dict
    replicates: int
    methods: dict[str, MethodSummary] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "replicates": self.replicates,
            "methods": {
                name: {
                    "n_used": m.n_used,
                    "n_failed": m.n_failed,
                    "coefficients": [vars(c) for c in m.coefficients],
                }
                for name, m in self.methods.items()
            },
        }

    def to_text_table(self) -> str:
        header = (
            f"{'method':<16}{'coef':<7}{'pct_bias':>9}{'(mc_se)':>9}"
            f"{'coverage':>10}{'(mc_se)':>9}{'mean_se':>9}{'(ese)':>9}"
            f"{'n':>6}{'fail':>6}"
        )
        lines = [header, "-" * len(header)]
        for name, m in self.methods.items():
            for c in m.coefficients:
                ese = "n/a" if c.empirical_se is None else f"{c.empirical_se:.4f}"
                lines.append(
                    f"{name:<16}{c.name:<7}{c.percent_bias:>9.2f}{c.percent_bias_mc_se:>9.2f}"
                    f"{c.coverage:>10.3f}{c.coverage_mc_se:>9.3f}{c.mean_se:>9.4f}{ese:>9}"
                    f"{m.n_used:>6}{m.n_failed:>6}"
                )
        return "\n".join(lines)


def mc_standard_error(estimates) -> float:
    """Monte Carlo standard error of a mean: sample sd over sqrt(n)."""
    values = np.asarray(estimates, dtype=float)
    if values.size < 2:
        raise ValidationError("mc_standard_error needs at least 2 values")
    return float(values.std(ddof=1) / math.sqrt(values.size))


def _fit_one_method(method: str, dataset, truth, scheme, config) -> FitResult:
    # quasi-separated calibration subsets are a regular occurrence at small
    # calibration sizes; replicate studies stop them at the coefficient
    # bound instead of discarding the replicate
    if method == "full":
        return fit_pooled(dataset, None, FULL, on_separation="cap")
    if method == "internalized":
        return fit_pooled(dataset, None, INTERNALIZED, on_separation="cap")
    if method == "naive":
        return naive_fit(dataset, scheme)
    if method == "linear":
        return linear_calibration_fit(dataset, scheme)
    if method == "clr_known_x":
        return clr_fit(dataset, categories=truth.categories)
    raise ValidationError(f"unknown method {method!r}")


def _run_replicate(config: ScenarioConfig, methods, replicate: int):
    dataset, truth = simulate_dataset(config, replicate)
    scheme = config.scheme()
    out = {}
    for method in methods:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                fit = _fit_one_method(method, dataset, truth, scheme, config)
            except PoolcalError as exc:
                out[method] = {"ok": False, "error": str(exc)}
                continue
        n_cat = len(config.beta_x)
        out[method] = {
            "ok": bool(fit.converged),
            "estimates": fit.beta.beta_x.tolist(),
            "se": fit.standard_errors[:n_cat].tolist(),
        }
    return replicate, out


def _validate_methods(config: ScenarioConfig, methods: Sequence[str]) -> list[str]:
    normalized = []
    for method in methods:
        m = str(method).strip().lower()
        if m not in SIM_METHODS:
            raise ValidationError(
                f"unknown method {method!r}; choose from {', '.join(SIM_METHODS)}"
            )
        if m in ("naive", "linear") and config.design != BIVARIATE_NORMAL:
            raise ValidationError(
                f"method {m!r} requires the bivariate-normal design (cut points)"
            )
        normalized.append(m)
    if not normalized:
        raise ValidationError("no methods requested")
    return normalized


def run_simulation(
    config: ScenarioConfig,
    methods: Sequence[str],
    *,
    replicates: int | None = None,
    n_jobs: int = 1,
) -> SimulationReport:
    """Replicate study over the requested methods.

    Fits every method on each replicate dataset, then aggregates percent
    bias, coverage of the 95% intervals, mean estimated standard error and
    the empirical standard error, each with its Monte Carlo standard error.
    Replicates where a method fails or does not converge are excluded from
    that method's summaries and counted.
    """
    methods = _validate_methods(config, methods)
    n_reps = config.replicates if replicates is None else int(replicates)
    if n_reps < 1:
        raise ValidationError("replicates must be positive")

    if n_jobs > 1:
        rows = Parallel(n_jobs=n_jobs)(
            delayed(_run_replicate)(config, methods, r) for r in range(n_reps)
        )
    else:
        rows = [_run_replicate(config, methods, r) for r in range(n_reps)]
    rows.sort(key=lambda item: item[0])

    truth = np.asarray(config.beta_x)
    n_cat = truth.size
    report = SimulationReport(config=config.to_json_dict(), replicates=n_reps)
    any_success = False
    for method in methods:
        estimates, ses = [], []
        n_failed = 0
        for _, row in rows:
            cell = row[method]
            if not cell["ok"]:
                n_failed += 1
                continue
            estimates.append(cell["estimates"])
            ses.append(cell["se"])
        n_used = len(estimates)
        if n_used == 0:
            report.methods[method] = MethodSummary(method, 0, n_failed, [])
            continue
        any_success = True
        est = np.asarray(estimates)
        se = np.asarray(ses)
        if n_used == 1:
            warnings.warn(
                "a single usable replicate: empirical standard errors are undefined",
                stacklevel=2,
            )
        coefs = []
        for k in range(n_cat):
            mean_est = float(est[:, k].mean())
            bias = 100.0 * (mean_est - truth[k]) / truth[k] if truth[k] != 0 else float(
                "nan"
            )
            half = WALD_QUANTILE * se[:, k]
            cover = (est[:, k] - half <= truth[k]) & (truth[k] <= est[:, k] + half)
            coverage = float(cover.mean())
            if n_used >= 2:
                est_mc = mc_standard_error(est[:, k])
                bias_mc = (
                    100.0 * est_mc / abs(truth[k]) if truth[k] != 0 else float("nan")
                )
                ese = float(est[:, k].std(ddof=1))
                ese_mc = ese / math.sqrt(2.0 * (n_used - 1))
                se_mc = mc_standard_error(se[:, k])
            else:
                bias_mc = float("nan")
                ese = None
                ese_mc = None
                se_mc = float("nan")
            coefs.append(
                CoefficientSummary(
                    name=f"cat{k + 2}",
                    truth=float(truth[k]),
                    n_used=n_used,
                    mean_estimate=mean_est,
                    percent_bias=bias,
                    percent_bias_mc_se=bias_mc,
                    coverage=coverage,
                    coverage_mc_se=float(
                        math.sqrt(max(coverage * (1 - coverage), 1e-12) / n_used)
                    ),
                    mean_se=float(se[:, k].mean()),
                    mean_se_mc_se=se_mc,
                    empirical_se=ese,
                    empirical_se_mc_se=ese_mc,
                )
            )
        report.methods[method] = MethodSummary(method, n_used, n_failed, coefs)
    if not any_success:
        raise PoolcalError("every method failed on every replicate")
    return report
