import math

import numpy as np
import pytest

from poolcal import (
    CategoryScheme,
    ScenarioConfig,
    ValidationError,
    clr_fit,
    fit_pooled,
    linear_calibration_fit,
    naive_fit,
    sandwich_covariance,
    simulate_dataset,
)
from poolcal.inference import WALD_QUANTILE

from conftest import make_dataset, make_participant, make_stratum


def small_config(**overrides):
    base = {
        "design": "direct_multinomial",
        "studies": 2,
        "strata_per_study": 120,
        "controls_per_case": 1,
        "w_means": [40.0, 46.0],
        "w_sd": 12.0,
        "multinomial_a": [[-6.0, -13.0], [-6.2, -12.5]],
        "multinomial_b": [[0.15, 0.28], [0.16, 0.27]],
        "beta_x": [-0.2, -0.4],
        "n_calibration": 60,
        "replicates": 4,
        "seed": 4242,
    }
    base.update(overrides)
    return ScenarioConfig.from_json_dict(base)


def all_calibrated_dataset(seed=5, n_strata=150):
    """Simulated dataset where every participant joins the calibration subset."""
    from poolcal import Participant, PooledDataset, Stratum, Study

    cfg = small_config(strata_per_study=n_strata, seed=seed)
    ds, truth = simulate_dataset(cfg, 0)
    studies = []
    idx = 0
    for study in ds.studies:
        strata = []
        for stratum in study.strata:
            cats = truth.categories[idx]
            idx += 1
            members = tuple(
                Participant(
                    outcome=p.outcome,
                    local_value=p.local_value,
                    covariates=p.covariates,
                    ref_category=int(cats[i]),
                    in_calibration=True,
                )
                for i, p in enumerate(stratum.participants)
            )
            strata.append(Stratum(stratum.stratum_id, members))
        studies.append(Study(study.study_id, tuple(strata)))
    return PooledDataset(tuple(studies), 0, cfg.category_count)


# ---------------------------------------------------------------------------
# clr_fit
# ---------------------------------------------------------------------------


def _discordant_fixture(n10, n01, n_same=3):
    """1:1 binary-exposure strata: n10 case-exposed, n01 control-exposed."""
    strata = []
    k = 0
    for _ in range(n10):
        strata.append(make_stratum(f"d{k}", [
            make_participant(1, 1.0, cat=2),
            make_participant(0, 0.0, cat=1),
        ]))
        k += 1
    for _ in range(n01):
        strata.append(make_stratum(f"d{k}", [
            make_participant(1, 0.0, cat=1),
            make_participant(0, 1.0, cat=2),
        ]))
        k += 1
    for _ in range(n_same):
        strata.append(make_stratum(f"c{k}", [
            make_participant(1, 1.0, cat=2),
            make_participant(0, 1.0, cat=2),
        ]))
        k += 1
    return make_dataset([("a", strata)], category_count=2)


def test_clr_matches_discordant_pair_closed_form():
    # 1:1 matching with binary exposure: estimate = log(n10 / n01)
    ds = _discordant_fixture(9, 3)
    fit = clr_fit(ds)
    assert fit.converged
    assert fit.beta.beta_x[0] == pytest.approx(math.log(3.0), abs=1e-8)
    # model-based variance of the discordant-pair estimator: 1/n10 + 1/n01
    assert fit.covariance[0, 0] == pytest.approx(1 / 9 + 1 / 3, rel=1e-6)


def test_clr_invariant_to_stratum_relabeling():
    ds = _discordant_fixture(6, 2)
    fit1 = clr_fit(ds)

    from poolcal import PooledDataset, Study, Stratum

    relabeled = []
    for study in ds.studies:
        strata = tuple(
            Stratum(f"renamed-{i}", s.participants)
            for i, s in enumerate(study.strata)
        )
        relabeled.append(Study(study.study_id, strata))
    ds2 = PooledDataset(tuple(relabeled), 0, 2)
    fit2 = clr_fit(ds2)
    assert np.allclose(fit1.beta.beta_x, fit2.beta.beta_x, atol=1e-12)


def test_clr_gradient_at_solution():
    ds = _discordant_fixture(9, 3)
    fit = clr_fit(ds)
    assert fit.gradient_norm <= 1e-8


def test_clr_requires_observed_categories():
    strata = [make_stratum("s", [make_participant(1, 1.0), make_participant(0, 2.0)])]
    ds = make_dataset([("a", strata)], category_count=2)
    with pytest.raises(ValidationError, match="without an observed category"):
        clr_fit(ds)


def test_clr_warns_on_empty_category():
    ds = _discordant_fixture(4, 2)  # only categories 1..2 present
    from poolcal import PooledDataset

    ds3 = PooledDataset(ds.studies, 0, 3)  # declare a third, never observed
    with pytest.warns(UserWarning, match="never observed"):
        fit = clr_fit(ds3)
    assert not fit.converged


# ---------------------------------------------------------------------------
# fit_pooled
# ---------------------------------------------------------------------------


def test_reduction_identity_all_calibrated():
    # every participant calibrated: internalized fit equals classical CLR
    ds = all_calibrated_dataset()
    pooled = fit_pooled(ds, None, "internalized")
    classical = clr_fit(ds)
    assert pooled.converged and classical.converged
    assert np.max(np.abs(pooled.beta.beta_x - classical.beta.beta_x)) <= 1e-8


def test_fit_pooled_consistency_large_n():
    # large single replicate with a generous calibration subset recovers truth
    cfg = small_config(strata_per_study=2500, n_calibration=600, seed=77)
    ds, _ = simulate_dataset(cfg, 0)
    fit = fit_pooled(ds, None, "full", on_separation="cap")
    assert fit.converged
    # within 3 crude standard errors of the truth
    err = np.abs(fit.beta.beta_x - np.array(cfg.beta_x))
    assert np.all(err <= 3.5 * fit.standard_errors)


def test_fit_pooled_rejects_mismatched_scheme():
    ds = all_calibrated_dataset()
    with pytest.raises(ValidationError):
        fit_pooled(ds, CategoryScheme.direct(5), "full")


def test_fit_result_wald_cis_and_rrs():
    ds = all_calibrated_dataset()
    fit = fit_pooled(ds, None, "internalized")
    est = fit.beta.as_array()
    assert np.allclose(
        fit.wald_ci_95[:, 0], est - WALD_QUANTILE * fit.standard_errors, atol=1e-12
    )
    assert np.allclose(
        fit.wald_ci_95[:, 1], est + WALD_QUANTILE * fit.standard_errors, atol=1e-12
    )
    assert np.allclose(fit.relative_risks, np.exp(fit.beta.beta_x))
    assert np.allclose(fit.rr_ci_95, np.exp(fit.wald_ci_95[:2]))
    payload = fit.to_json_dict()
    assert payload["method"] == "Internalized"
    assert [c["name"] for c in payload["coefficients"]] == ["cat2", "cat3"]
    assert payload["convergence"]["converged"] is True
    table = fit.rr_table()
    assert "1 (reference)" in table


def test_full_and_internalized_agree_when_w_is_informative():
    # categories live in w clusters far apart, so the fitted calibration
    # curve saturates: predicted rows are one-hot at every observed w and
    # both methods effectively see the observed categories
    rng = np.random.default_rng(99)
    centers = {1: -50.0, 2: 0.0, 3: 50.0}
    studies = []
    for sid in ("a", "b"):
        strata = []
        for j in range(40):
            cats = rng.integers(1, 4, size=2)
            members = []
            for i in range(2):
                cat = int(cats[i])
                in_cal = j < 12  # first strata supply the calibration subset
                members.append(make_participant(
                    1 if i == 0 else 0,
                    centers[cat] + rng.normal(0.0, 2.0),
                    cat=cat if in_cal else None,
                ))
            strata.append(make_stratum(f"{sid}{j}", members))
        studies.append((sid, strata))
    ds = make_dataset(studies, category_count=3)
    full = fit_pooled(ds, None, "full")
    internal = fit_pooled(ds, None, "internalized")
    assert np.max(np.abs(full.beta.beta_x - internal.beta.beta_x)) <= 1e-3


# ---------------------------------------------------------------------------
# sandwich covariance
# ---------------------------------------------------------------------------


def test_sandwich_symmetric_and_psd():
    cfg = small_config(seed=100)
    ds, _ = simulate_dataset(cfg, 0)
    fit = fit_pooled(ds, None, "full", on_separation="cap")
    cov = fit.covariance
    assert np.allclose(cov, cov.T, atol=1e-12)
    eigs = np.linalg.eigvalsh(cov)
    assert eigs.min() >= -1e-8 * np.trace(cov)


def test_sandwich_invariant_to_study_reordering():
    cfg = small_config(seed=101)
    ds, _ = simulate_dataset(cfg, 0)
    fit = fit_pooled(ds, None, "full", on_separation="cap")

    from poolcal import PooledDataset

    reordered = PooledDataset(ds.studies[::-1], 0, ds.category_count)
    cov2 = sandwich_covariance(fit.beta, fit.calibration, reordered, "full")
    assert np.max(np.abs(cov2 - fit.covariance)) <= 1e-10


def test_sandwich_matches_model_based_when_all_calibrated():
    # internalized fit on fully calibrated data reduces to classical CLR;
    # its robust covariance should approach the model-based one
    ds = all_calibrated_dataset(seed=8, n_strata=400)
    pooled = fit_pooled(ds, None, "internalized")
    classical = clr_fit(ds)
    ratio = np.diag(pooled.covariance) / np.diag(classical.covariance)
    assert np.all(ratio > 0.85)
    assert np.all(ratio < 1.15)


# ---------------------------------------------------------------------------
# naive and linear-calibration comparators
# ---------------------------------------------------------------------------


def _bivariate_config(**overrides):
    base = {
        "design": "bivariate_normal",
        "studies": 2,
        "strata_per_study": 150,
        "controls_per_case": 1,
        "w_means": [38.0, 45.0],
        "latent_variance": 240.89,
        "error_variance_w": 16.0,
        "error_variance_x": 16.0,
        "reference_intercept": 5.0,
        "reference_slope": 1.4,
        "cut_points": [62.9, 76.3],
        "beta_x": [-0.2, -0.4],
        "n_calibration": 60,
        "replicates": 2,
        "seed": 314,
    }
    base.update(overrides)
    return ScenarioConfig.from_json_dict(base)


def test_naive_requires_cut_points():
    ds = all_calibrated_dataset()
    with pytest.raises(ValidationError):
        naive_fit(ds, CategoryScheme.direct(3))


def test_naive_equals_known_x_when_w_is_x():
    # local measurement identical to the reference: no measurement error
    cfg = _bivariate_config(error_variance_w=1e-12, error_variance_x=1e-12,
                            reference_intercept=0.0, reference_slope=1.0,
                            cut_points=[35.0, 50.0])
    ds, truth = simulate_dataset(cfg, 0)
    scheme = cfg.scheme()
    naive = naive_fit(ds, scheme)
    known = clr_fit(ds, categories=truth.categories)
    assert np.allclose(naive.beta.beta_x, known.beta.beta_x, atol=1e-8)


def test_linear_recovers_known_x_under_exact_line():
    # X = a + b W with no residual: imputation reproduces X exactly
    cfg = _bivariate_config(error_variance_w=1e-12, error_variance_x=1e-12,
                            seed=1000)
    ds, truth = simulate_dataset(cfg, 0)
    fit = linear_calibration_fit(ds, cfg.scheme())
    known = clr_fit(ds, categories=truth.categories)
    assert np.allclose(fit.beta.beta_x, known.beta.beta_x, atol=1e-8)
    assert fit.linear_calibration is not None
    for model in fit.linear_calibration.values():
        assert model.intercept == pytest.approx(5.0, abs=1e-4)
        assert model.slope == pytest.approx(1.4, abs=1e-5)


def test_linear_fit_serializes_models():
    cfg = _bivariate_config(seed=2)
    ds, _ = simulate_dataset(cfg, 0)
    fit = linear_calibration_fit(ds, cfg.scheme())
    payload = fit.to_json_dict()
    assert set(payload["linear_calibration"]) == {"study1", "study2"}
