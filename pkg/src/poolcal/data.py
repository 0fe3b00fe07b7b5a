"""Data structures for pooled matched case-control studies and CSV ingestion.

A pooled dataset is a collection of studies; each study is a collection of
matched strata holding exactly one case and one or more controls.  Every
participant carries the biomarker measurement from the study's local
laboratory and, for members of the calibration subset, the categorized (and
optionally continuous) measurement from the reference laboratory.

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "Participant",
    "Stratum",
    "Study",
    "PooledDataset",
    "CategoryScheme",
    "categorize",
    "indicator_vector",
    "load_dataset",
    "save_dataset",
]


@dataclass(frozen=True)
class Participant:
    """One study participant.

    Attributes
    ----------
    outcome : int
        Case indicator, 1 for the case and 0 for a control.
    local_value : float
        Biomarker measurement in local-laboratory units.
    covariates : tuple of float
        Additional adjustment covariates (may be empty).
    ref_category : int or None
        Observed reference-laboratory category (1..P); present exactly for
        calibration-subset members.
    ref_value : float or None
        Continuous reference-laboratory measurement, when it was recorded
        for a calibration-subset member.
    in_calibration : bool
        Whether the participant belongs to the study's calibration subset.
    """

    outcome: int
    local_value: float
    covariates: tuple[float, ...] = ()
    ref_category: int | None = None
    ref_value: float | None = None
    in_calibration: bool = False

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise ValidationError(f"outcome must be 0 or 1, got {self.outcome!r}")
        if not math.isfinite(self.local_value):
            raise ValidationError(f"local_value must be finite, got {self.local_value!r}")
        if (self.ref_category is not None) != self.in_calibration:
            raise ValidationError(
                "ref_category must be present exactly for calibration-subset members"
            )
        if self.ref_value is not None:
            if not self.in_calibration:
                raise ValidationError("ref_value requires in_calibration")
            if not math.isfinite(self.ref_value):
                raise ValidationError("ref_value must be finite")
        for z in self.covariates:
            if not math.isfinite(z):
                raise ValidationError("covariates must be finite")


@dataclass(frozen=True)
class Stratum:
    """A matched set: one case (stored first) plus M >= 1 controls."""

    stratum_id: str
    participants: tuple[Participant, ...]

    def __post_init__(self):
        n_cases = sum(p.outcome for p in self.participants)
        if n_cases != 1:
            raise ValidationError(
                f"stratum {self.stratum_id!r} has {n_cases} cases (exactly 1 required)"
            )
        if len(self.participants) < 2:
            raise ValidationError(f"stratum {self.stratum_id!r} has no controls")
        if self.participants[0].outcome != 1:
            raise ValidationError(f"stratum {self.stratum_id!r}: case must be stored first")

    @property
    def case(self) -> Participant:
        return self.participants[0]

    @property
    def controls(self) -> tuple[Participant, ...]:
        return self.participants[1:]

    @property
    def n_controls(self) -> int:
        return len(self.participants) - 1


@dataclass(frozen=True)
class Study:
    study_id: str
    strata: tuple[Stratum, ...]

    def __post_init__(self):
        if not self.strata:
            raise ValidationError(f"study {self.study_id!r} has no strata")

    def participants(self) -> Iterator[Participant]:
        for stratum in self.strata:
            yield from stratum.participants

    def calibration_participants(self) -> list[Participant]:
        return [p for p in self.participants() if p.in_calibration]


@dataclass(frozen=True)
class PooledDataset:
    """All studies of a pooled analysis plus the shared dimensions."""

    studies: tuple[Study, ...]
    covariate_count: int
    category_count: int

    def __post_init__(self):
        if self.category_count < 2:
            raise ValidationError("category_count must be at least 2")
        if self.covariate_count < 0:
            raise ValidationError("covariate_count must be non-negative")
        if not self.studies:
            raise ValidationError("dataset has no studies")
        seen = set()
        for study in self.studies:
            if study.study_id in seen:
                raise ValidationError(f"duplicate study_id {study.study_id!r}")
            seen.add(study.study_id)
            for stratum in study.strata:
                for p in stratum.participants:
                    if len(p.covariates) != self.covariate_count:
                        raise ValidationError(
                            f"study {study.study_id!r} stratum {stratum.stratum_id!r}: "
                            f"expected {self.covariate_count} covariates, got {len(p.covariates)}"
                        )
                    if p.ref_category is not None and not (
                        1 <= p.ref_category <= self.category_count
                    ):
                        raise ValidationError(
                            f"ref_category {p.ref_category} outside 1..{self.category_count}"
                        )

    @property
    def study_ids(self) -> list[str]:
        return [s.study_id for s in self.studies]

    @property
    def n_strata(self) -> int:
        return sum(len(s.strata) for s in self.studies)

    def study(self, study_id: str) -> Study:
        for s in self.studies:
            if s.study_id == study_id:
                return s
        raise KeyError(study_id)

    def iter_strata(self) -> Iterator[tuple[int, Study, Stratum]]:
        """Yield (study_index, study, stratum) in the canonical order.

        The canonical order (studies as listed, strata as listed within each
        study) is the order in which likelihood code indexes strata.
        """
        for si, study in enumerate(self.studies):
            for stratum in study.strata:
                yield si, study, stratum


@dataclass(frozen=True)
class CategoryScheme:
    """How the biomarker maps onto the P ordered categories.

    In cut-point mode, category p covers [c_{p-1}, c_p) with c_0 = -inf and
    c_P = +inf; a value equal to a cut point belongs to the upper interval.
    In direct mode, categories are observed as-is and no cut points exist.
    Category 1 is always the reference level.
    """

    category_count: int
    cut_points: tuple[float, ...] | None = None

    reference_level = 1

    def __post_init__(self):
        if self.category_count < 2:
            raise ValidationError("category_count must be at least 2")
        if self.cut_points is not None:
            cuts = self.cut_points
            if len(cuts) != self.category_count - 1:
                raise ValidationError(
                    f"{len(cuts)} cut points inconsistent with {self.category_count} categories"
                )
            if any(not math.isfinite(c) for c in cuts):
                raise ValidationError("cut points must be finite")
            if any(b <= a for a, b in zip(cuts, cuts[1:])):
                raise ValidationError("cut points must be strictly increasing")

    @classmethod
    def from_cut_points(cls, cut_points: Sequence[float]) -> "CategoryScheme":
        cuts = tuple(float(c) for c in cut_points)
        return cls(category_count=len(cuts) + 1, cut_points=cuts)

    @classmethod
    def direct(cls, category_count: int) -> "CategoryScheme":
        return cls(category_count=int(category_count), cut_points=None)

    @property
    def mode(self) -> str:
        return "direct" if self.cut_points is None else "cut_points"

    def categorize(self, value: float) -> int:
        return categorize(value, self)


def categorize(value: float, scheme: CategoryScheme) -> int:
    """Map a biomarker value onto its category under a cut-point scheme."""
    if scheme.cut_points is None:
        raise ValidationError("categorize requires a cut-point scheme")
    if not math.isfinite(value):
        raise ValidationError(f"cannot categorize non-finite value {value!r}")
    return bisect_right(scheme.cut_points, value) + 1


def indicator_vector(category: int, category_count: int) -> np.ndarray:
    """Dummy coding of a category: all-zero for the reference level 1,
    otherwise a unit vector with 1 at position category-2."""
    if not 1 <= category <= category_count:
        raise ValidationError(
            f"category {category} outside 1..{category_count}"
        )
    vec = np.zeros(category_count - 1)
    if category >= 2:
        vec[category - 2] = 1.0
    return vec


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

_REQUIRED_COLUMNS = ("study_id", "stratum_id", "case", "w", "in_calibration")


def _detect_covariate_columns(fieldnames: Sequence[str]) -> list[str]:
    cols = []
    k = 1
    while f"z{k}" in fieldnames:
        cols.append(f"z{k}")
        k += 1
    return cols


def _parse_float(text: str, what: str, row: int, errors: list[str]) -> float | None:
    try:
        v = float(text)
    except ValueError:
        errors.append(f"row {row}: {what} {text!r} is not a number")
        return None
    if not math.isfinite(v):
        errors.append(f"row {row}: {what} must be finite, got {text!r}")
        return None
    return v


def load_dataset(
    path,
    *,
    category_count: int | None = None,
    covariate_count: int | None = None,
) -> PooledDataset:
    """Read a pooled dataset from CSV, validating every row.

    Expected header columns: ``study_id``, ``stratum_id``, ``case`` (0/1),
    ``w`` (local measurement), optional ``z1..zK`` covariates, optional
    ``x`` (continuous reference measurement), optional ``x_cat`` (reference
    category, blank when unavailable), ``in_calibration`` (0/1).

    Strata are assembled from (study_id, stratum_id) groups with the case
    placed first; otherwise file order is preserved.  Validation problems
    raise :class:`ValidationError` naming the offending row numbers.
    """
    errors: list[str] = []
    rows: list[dict] = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: empty file")
        missing = [c for c in _REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ValidationError(f"{path}: missing required columns {missing}")
        z_cols = _detect_covariate_columns(reader.fieldnames)
        has_x = "x" in reader.fieldnames
        has_x_cat = "x_cat" in reader.fieldnames

        for line_no, raw in enumerate(reader, start=2):
            row: dict = {"line": line_no}
            row["study_id"] = (raw["study_id"] or "").strip()
            row["stratum_id"] = (raw["stratum_id"] or "").strip()
            if not row["study_id"] or not row["stratum_id"]:
                errors.append(f"row {line_no}: study_id and stratum_id are required")
                continue

            case_txt = (raw["case"] or "").strip()
            if case_txt not in ("0", "1"):
                errors.append(f"row {line_no}: case must be 0 or 1, got {case_txt!r}")
                continue
            row["case"] = int(case_txt)

            w_txt = (raw["w"] or "").strip()
            if not w_txt:
                errors.append(f"row {line_no}: missing w")
                continue
            w = _parse_float(w_txt, "w", line_no, errors)
            if w is None:
                continue
            row["w"] = w

            zs = []
            ok = True
            for col in z_cols:
                z_txt = (raw.get(col) or "").strip()
                if not z_txt:
                    errors.append(f"row {line_no}: missing {col}")
                    ok = False
                    break
                z = _parse_float(z_txt, col, line_no, errors)
                if z is None:
                    ok = False
                    break
                zs.append(z)
            if not ok:
                continue
            row["z"] = tuple(zs)

            cal_txt = (raw["in_calibration"] or "").strip()
            if cal_txt not in ("0", "1"):
                errors.append(
                    f"row {line_no}: in_calibration must be 0 or 1, got {cal_txt!r}"
                )
                continue
            in_cal = cal_txt == "1"
            row["in_calibration"] = in_cal

            x_cat = None
            if has_x_cat:
                x_cat_txt = (raw.get("x_cat") or "").strip()
                if x_cat_txt:
                    try:
                        x_cat = int(x_cat_txt)
                    except ValueError:
                        errors.append(
                            f"row {line_no}: x_cat {x_cat_txt!r} is not an integer"
                        )
                        continue
            if in_cal and x_cat is None:
                errors.append(f"row {line_no}: in_calibration=1 without x_cat")
                continue
            if x_cat is not None and not in_cal:
                errors.append(f"row {line_no}: x_cat present but in_calibration=0")
                continue
            row["x_cat"] = x_cat

            x_val = None
            if has_x:
                x_txt = (raw.get("x") or "").strip()
                if x_txt:
                    x_val = _parse_float(x_txt, "x", line_no, errors)
                    if x_val is None:
                        continue
                    if not in_cal:
                        errors.append(
                            f"row {line_no}: continuous x present but in_calibration=0"
                        )
                        continue
            row["x"] = x_val
            rows.append(row)

    if errors:
        raise ValidationError("; ".join(errors[:20]))
    if not rows:
        raise ValidationError(f"{path}: no data rows")

    max_cat = max((r["x_cat"] for r in rows if r["x_cat"] is not None), default=None)
    if category_count is None:
        if max_cat is None:
            raise ValidationError(
                "category_count must be given when the file has no x_cat values"
            )
        category_count = max(int(max_cat), 2)
    for r in rows:
        if r["x_cat"] is not None and not 1 <= r["x_cat"] <= category_count:
            errors.append(
                f"row {r['line']}: x_cat {r['x_cat']} outside 1..{category_count}"
            )

    k_found = len(rows[0]["z"])
    if covariate_count is not None and covariate_count != k_found:
        errors.append(
            f"expected {covariate_count} covariate columns, found {k_found}"
        )

    # group rows by study then stratum, preserving first-appearance order
    study_order: list[str] = []
    strata_by_study: dict[str, dict[str, list[dict]]] = {}
    for r in rows:
        sid = r["study_id"]
        if sid not in strata_by_study:
            strata_by_study[sid] = {}
            study_order.append(sid)
        strata = strata_by_study[sid]
        strata.setdefault(r["stratum_id"], []).append(r)

    # duplicate participants: two fully identical rows within one stratum
    for sid in study_order:
        for st_id, members in strata_by_study[sid].items():
            seen = set()
            for r in members:
                key = (r["case"], r["w"], r["z"], r["x_cat"], r["x"], r["in_calibration"])
                if key in seen:
                    errors.append(
                        f"row {r['line']}: duplicate participant in stratum "
                        f"{st_id!r} of study {sid!r}"
                    )
                seen.add(key)

    if errors:
        raise ValidationError("; ".join(errors[:20]))

    studies = []
    for sid in study_order:
        strata = []
        for st_id, members in strata_by_study[sid].items():
            cases = [r for r in members if r["case"] == 1]
            if len(cases) != 1:
                lines = ", ".join(str(r["line"]) for r in members)
                errors.append(
                    f"stratum {st_id!r} of study {sid!r} has {len(cases)} cases "
                    f"(rows {lines})"
                )
                continue
            ordered = cases + [r for r in members if r["case"] == 0]
            participants = tuple(
                Participant(
                    outcome=r["case"],
                    local_value=r["w"],
                    covariates=r["z"],
                    ref_category=r["x_cat"],
                    ref_value=r["x"],
                    in_calibration=r["in_calibration"],
                )
                for r in ordered
            )
            try:
                strata.append(Stratum(stratum_id=st_id, participants=participants))
            except ValidationError as exc:
                errors.append(str(exc))
        if not errors:
            studies.append(Study(study_id=sid, strata=tuple(strata)))

    if errors:
        raise ValidationError("; ".join(errors[:20]))

    return PooledDataset(
        studies=tuple(studies),
        covariate_count=k_found,
        category_count=category_count,
    )


def save_dataset(dataset: PooledDataset, path) -> None:
    """Write a dataset back to CSV using round-trip float formatting."""
    k = dataset.covariate_count
    header = ["study_id", "stratum_id", "case", "w"]
    header += [f"z{i}" for i in range(1, k + 1)]
    header += ["x", "x_cat", "in_calibration"]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for _, study, stratum in dataset.iter_strata():
            for p in stratum.participants:
                row = [study.study_id, stratum.stratum_id, p.outcome, repr(p.local_value)]
                row += [repr(z) for z in p.covariates]
                row.append("" if p.ref_value is None else repr(p.ref_value))
                row.append("" if p.ref_category is None else p.ref_category)
                row.append(1 if p.in_calibration else 0)
                writer.writerow(row)
