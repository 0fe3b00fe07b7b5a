import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poolcal import (
    CalibrationError,
    CalibrationModel,
    SeparationError,
    StudyCalibration,
    fit_calibration,
    fit_linear_calibration,
    fit_multinomial_logit,
    predict_category_probs,
)
from poolcal.calibration import _multinomial_loglik_grad

from conftest import make_dataset, make_participant, make_stratum


def _calibration_dataset(pairs, P=3, study="a"):
    """One study whose calibration subset is given by (w, cat) pairs."""
    strata = []
    for j, (w, cat) in enumerate(pairs):
        case = make_participant(1, 0.0)
        control = make_participant(0, w, cat=cat)
        strata.append(make_stratum(f"s{j}", [case, control]))
    return make_dataset([(study, strata)], category_count=P)


# ---------------------------------------------------------------------------
# fit_calibration / fit_multinomial_logit
# ---------------------------------------------------------------------------


def test_balanced_binary_subset_gives_null_model():
    # perfectly balanced at every measurement value: symmetry forces a=b=0
    ds = _calibration_dataset([(1.0, 1), (1.0, 2), (-1.0, 1), (-1.0, 2)], P=2)
    block = fit_calibration(ds, "a")
    assert np.allclose(block.intercepts, 0.0, atol=1e-8)
    assert np.allclose(block.slopes, 0.0, atol=1e-8)
    assert block.n_calibration == 4
    assert block.controls_only is True
    assert block.separated is False


# Independent oracle: the same 9-row fixture maximized by coarse grid search
# plus derivative-free polish (Nelder-Mead, then high-order finite-difference
# Newton refinement), run outside this package.  Frozen values:
ORACLE_9ROW = {
    "w": [10.0, 10.0, 20.0, 10.0, 20.0, 30.0, 20.0, 30.0, 30.0],
    "cat": [1, 1, 1, 2, 2, 2, 3, 3, 3],
    "a": [-2.4876750884362555, -6.092589688963568],
    "b": [0.15231474209813428, 0.3046294843521898],
    "loglik": -7.474889907388084,
}


def test_nine_row_fixture_matches_bruteforce_oracle():
    pairs = list(zip(ORACLE_9ROW["w"], ORACLE_9ROW["cat"]))
    ds = _calibration_dataset(pairs, P=3)
    block = fit_calibration(ds, "a")
    assert np.allclose(block.intercepts, ORACLE_9ROW["a"], atol=1e-6)
    assert np.allclose(block.slopes, ORACLE_9ROW["b"], atol=1e-6)


def test_nine_row_loglik_at_estimate_beats_null():
    w = np.array(ORACLE_9ROW["w"])
    cat = np.array(ORACLE_9ROW["cat"])
    onehot = np.zeros((9, 2))
    for p in (2, 3):
        onehot[cat == p, p - 2] = 1.0
    params = np.concatenate([ORACLE_9ROW["a"], ORACLE_9ROW["b"]])
    ll, grad = _multinomial_loglik_grad(params, w, onehot)
    assert ll == pytest.approx(ORACLE_9ROW["loglik"], abs=1e-9)
    ll0, _ = _multinomial_loglik_grad(np.zeros(4), w, onehot)
    assert ll >= ll0


def test_gradient_norm_small_at_estimate():
    pairs = list(zip(ORACLE_9ROW["w"], ORACLE_9ROW["cat"]))
    ds = _calibration_dataset(pairs, P=3)
    block = fit_calibration(ds, "a")
    onehot = np.zeros((9, 2))
    cat = np.array(ORACLE_9ROW["cat"])
    for p in (2, 3):
        onehot[cat == p, p - 2] = 1.0
    _, grad = _multinomial_loglik_grad(
        np.concatenate([block.intercepts, block.slopes]),
        np.array(ORACLE_9ROW["w"]),
        onehot,
    )
    assert np.max(np.abs(grad)) <= 1e-8


def test_missing_category_raises_separation_error():
    ds = _calibration_dataset([(1.0, 1), (2.0, 2), (3.0, 1), (4.0, 2)], P=3)
    with pytest.raises(SeparationError, match="absent"):
        fit_calibration(ds, "a")


def test_empty_calibration_subset_raises():
    strata = [make_stratum("s0", [(1, 1.0), (0, 2.0)])]
    ds = make_dataset([("a", strata)], category_count=2)
    with pytest.raises(CalibrationError, match="empty"):
        fit_calibration(ds, "a")


def test_separated_subset_raises_by_default_and_caps_on_request():
    # category 2 occupies strictly larger w with a narrow gap: the
    # likelihood maximum diverges and coefficients grow past the bound
    pairs = [(0.0, 1), (1.0, 1), (2.0, 1), (2.5, 2), (3.0, 2), (4.0, 2)]
    ds = _calibration_dataset(pairs, P=2)
    with pytest.raises(SeparationError):
        fit_calibration(ds, "a")
    block = fit_calibration(ds, "a", on_separation="cap")
    assert block.separated is True
    assert np.max(np.abs(np.concatenate([block.intercepts, block.slopes]))) <= 50.0
    # the capped curve is a near-step function between the two groups
    model = CalibrationModel(2, {"a": block})
    assert predict_category_probs(model, "a", 0.0)[1] < 1e-3
    assert predict_category_probs(model, "a", 4.0)[1] > 1 - 1e-3


def test_shift_invariance_of_multinomial_fit(rng):
    # adding c to every w shifts intercepts by -b*c and leaves slopes alone
    w = rng.normal(20.0, 5.0, size=60)
    probs = np.column_stack([
        np.ones(60),
        np.exp(0.5 + 0.1 * w),
        np.exp(-2.0 + 0.15 * w),
    ])
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(60)
    cat = 1 + (u[:, None] > probs.cumsum(axis=1)).sum(axis=1)
    a1, b1, _ = fit_multinomial_logit(w, cat, 3)
    c = 7.25
    a2, b2, _ = fit_multinomial_logit(w + c, cat, 3)
    assert np.allclose(b1, b2, atol=1e-6)
    assert np.allclose(a2, a1 - b1 * c, atol=1e-6)


# ---------------------------------------------------------------------------
# predict_category_probs
# ---------------------------------------------------------------------------


def _model(a, b, P, study="s1"):
    block = StudyCalibration(study, np.asarray(a, float), np.asarray(b, float), 10)
    return CalibrationModel(P, {study: block})


def test_predict_uniform_when_all_zero():
    model = _model([0.0, 0.0], [0.0, 0.0], 3)
    p = predict_category_probs(model, "s1", 123.4)
    assert np.allclose(p, [1 / 3, 1 / 3, 1 / 3])


def test_predict_binary_analytic():
    model = _model([np.log(2.0)], [0.0], 2)
    for w in (-50.0, 0.0, 50.0):
        p = predict_category_probs(model, "s1", w)
        assert np.allclose(p, [1 / 3, 2 / 3])


def test_predict_matches_high_precision_oracle():
    # direct evaluation at 50-digit precision, frozen:
    expected = [0.274127667558292, 0.6562842072400348, 0.0695881252016732]
    model = _model([-13.7925, -29.8290], [0.3259, 0.6324], 3)
    p = predict_category_probs(model, "s1", 45.0)
    assert np.allclose(p, expected, atol=1e-14)


def test_predict_unknown_study_raises():
    model = _model([0.0], [0.0], 2)
    with pytest.raises(CalibrationError):
        predict_category_probs(model, "other", 1.0)


@given(st.floats(min_value=-200.0, max_value=200.0, allow_nan=False))
def test_predict_is_simplex_point(w):
    model = _model([-13.7925, -29.8290], [0.3259, 0.6324], 3)
    p = predict_category_probs(model, "s1", w)
    assert np.all(p >= 0.0)
    assert np.all(p <= 1.0)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_predict_vectorized_matches_scalar():
    model = _model([-1.0, -2.0], [0.1, 0.2], 3)
    ws = np.array([-10.0, 0.0, 35.0])
    mat = predict_category_probs(model, "s1", ws)
    for i, w in enumerate(ws):
        assert np.allclose(mat[i], predict_category_probs(model, "s1", float(w)))


# ---------------------------------------------------------------------------
# linear calibration
# ---------------------------------------------------------------------------


def _linear_dataset(pairs, study="a"):
    strata = []
    for j, (w, x) in enumerate(pairs):
        case = make_participant(1, 0.0)
        control = make_participant(0, w, cat=1, x=x)
        strata.append(make_stratum(f"s{j}", [case, control]))
    return make_dataset([(study, strata)], category_count=2)


def test_linear_two_points_exact():
    ds = _linear_dataset([(0.0, 5.0), (10.0, 19.0)])
    model = fit_linear_calibration(ds, "a")
    assert model.intercept == pytest.approx(5.0, abs=1e-12)
    assert model.slope == pytest.approx(1.4, abs=1e-12)


def test_linear_identity_relation():
    ds = _linear_dataset([(1.0, 1.0), (2.0, 2.0), (5.0, 5.0)])
    model = fit_linear_calibration(ds, "a")
    assert model.intercept == pytest.approx(0.0, abs=1e-12)
    assert model.slope == pytest.approx(1.0, abs=1e-12)


def test_linear_matches_normal_equations_oracle(rng):
    # 50 rows from the joint-normal measurement model
    latent = rng.normal(41.3, np.sqrt(240.89), size=50)
    w = latent + rng.normal(0, 4.0, size=50)
    x = 5.0 + 1.4 * latent + rng.normal(0, 4.0, size=50)
    ds = _linear_dataset(list(zip(w, x)))
    model = fit_linear_calibration(ds, "a")
    design = np.column_stack([np.ones(50), w])
    gamma, eta = np.linalg.solve(design.T @ design, design.T @ x)
    assert model.intercept == pytest.approx(gamma, abs=1e-10)
    assert model.slope == pytest.approx(eta, abs=1e-10)


def test_linear_identical_w_raises():
    ds = _linear_dataset([(3.0, 1.0), (3.0, 2.0), (3.0, 3.0)])
    with pytest.raises(CalibrationError, match="singular|identical"):
        fit_linear_calibration(ds, "a")


def test_linear_requires_continuous_reference():
    strata = [
        make_stratum("s0", [make_participant(1, 0.0), make_participant(0, 1.0, cat=1)]),
        make_stratum("s1", [make_participant(1, 0.5), make_participant(0, 2.0, cat=2)]),
    ]
    ds = make_dataset([("a", strata)], category_count=2)
    with pytest.raises(CalibrationError, match="continuous"):
        fit_linear_calibration(ds, "a")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_calibration_model_json_round_trip():
    model = _model([-1.5, -3.0], [0.2, 0.4], 3)
    payload = model.to_json_dict()
    assert payload == {"s1": {"a": [-1.5, -3.0], "b": [0.2, 0.4], "n": 10}}
    back = CalibrationModel.from_json_dict(payload)
    assert back.category_count == 3
    assert np.allclose(back.study("s1").intercepts, [-1.5, -3.0])
    assert np.allclose(back.study("s1").slopes, [0.2, 0.4])
    assert back.study("s1").controls_only is None
