"""Generate the bundled example dataset (pooled_example.csv).

Two cohorts, 615 matched strata total (267 + 348), 596 of them 1:2 matched
and 19 of them 1:1, mimicking the shape of a two-cohort vitamin-D pooling
analysis.  Local measurements differ from the reference scale by a
cohort-specific affine shift plus noise; 29 controls per cohort form the
calibration subset with reference categories from cut points 30/50.

Run from the repository root:

    python scripts/make_example_data.py
"""

from pathlib import Path

import numpy as np
from scipy.special import expit

OUT = Path(__file__).resolve().parents[1] / "src" / "poolcal" / "presets" / "pooled_example.csv"

CUTS = (30.0, 50.0)
BETA = (-0.35, -0.55)
COHORTS = [
    # (study_id, n_strata, n_one_to_one, ref_mean, local_shift, local_scale)
    ("cohort_a", 267, 9, 52.0, -6.0, 0.82),
    ("cohort_b", 348, 10, 48.0, 4.5, 1.15),
]
N_CALIBRATION = 29


def categorize(x):
    return 1 + (x >= CUTS[0]) + (x >= CUTS[1])


def draw_member(rng, ref_mean, shift, scale, intercept, want_case):
    while True:
        x = rng.normal(ref_mean, 17.0)
        w = shift + scale * x + rng.normal(0.0, 10.0)
        cat = categorize(x)
        effect = BETA[cat - 2] if cat > 1 else 0.0
        if (rng.random() < expit(intercept + effect)) == want_case:
            return w, x, cat


def main():
    rng = np.random.default_rng(170_215)
    lines = ["study_id,stratum_id,case,w,x,x_cat,in_calibration"]
    for study_id, n_strata, n_small, ref_mean, shift, scale in COHORTS:
        rows = []
        for j in range(n_strata):
            n_controls = 1 if j < n_small else 2
            intercept = rng.normal(-1.1, 0.25)
            members = [draw_member(rng, ref_mean, shift, scale, intercept, True)]
            members += [
                draw_member(rng, ref_mean, shift, scale, intercept, False)
                for _ in range(n_controls)
            ]
            rows.append(members)
        controls = [
            (j, i) for j, members in enumerate(rows) for i in range(1, len(members))
        ]
        chosen = rng.choice(len(controls), size=N_CALIBRATION, replace=False)
        selected = {controls[k] for k in chosen}
        for j, members in enumerate(rows):
            for i, (w, x, cat) in enumerate(members):
                in_cal = (j, i) in selected
                lines.append(
                    f"{study_id},{j + 1},{1 if i == 0 else 0},{w:.4f},"
                    f"{f'{x:.4f}' if in_cal else ''},{cat if in_cal else ''},"
                    f"{1 if in_cal else 0}"
                )
    OUT.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {OUT} ({len(lines) - 1} rows)")


if __name__ == "__main__":
    main()
