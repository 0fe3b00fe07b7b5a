"""Shared dataset builders for the test suite."""

import numpy as np
import pytest

from poolcal import Participant, PooledDataset, Stratum, Study


def make_participant(outcome, w, cat=None, x=None, z=(), in_cal=None):
    if in_cal is None:
        in_cal = cat is not None
    return Participant(
        outcome=outcome,
        local_value=float(w),
        covariates=tuple(z),
        ref_category=cat,
        ref_value=x,
        in_calibration=in_cal,
    )


def make_stratum(stratum_id, members):
    """members: list of (outcome, w, cat?, x?, z?) tuples or Participants."""
    parts = []
    for m in members:
        if isinstance(m, Participant):
            parts.append(m)
        else:
            parts.append(make_participant(*m))
    return Stratum(stratum_id=stratum_id, participants=tuple(parts))


def make_dataset(studies, covariate_count=0, category_count=3):
    built = []
    for sid, strata in studies:
        built.append(Study(study_id=sid, strata=tuple(strata)))
    return PooledDataset(
        studies=tuple(built),
        covariate_count=covariate_count,
        category_count=category_count,
    )


def random_dataset(rng, n_studies=2, n_strata=4, n_controls=1, K=0, P=3,
                   all_calibrated=False, w_loc=40.0, w_scale=10.0):
    """A structurally valid dataset with random measurements and categories.

    When ``all_calibrated`` every participant carries an observed category.
    """
    studies = []
    for s in range(n_studies):
        strata = []
        for j in range(n_strata):
            members = []
            for i in range(n_controls + 1):
                cat = int(rng.integers(1, P + 1)) if all_calibrated else None
                members.append(
                    make_participant(
                        outcome=1 if i == 0 else 0,
                        w=rng.normal(w_loc, w_scale),
                        cat=cat,
                        z=tuple(rng.normal(size=K)),
                    )
                )
            strata.append(make_stratum(f"s{j + 1}", members))
        studies.append((f"study{s + 1}", strata))
    return make_dataset(studies, covariate_count=K, category_count=P)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
