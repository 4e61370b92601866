"""Progression labels, exclusion rules, subject-wise stratified splitting and
balanced resampling.

The 3-class target: no progression within 96 months, slow progression (first
qualifying KLG increase after 72 and within 96 months), fast progression
(within 72 months). An increase from KL0 to KL1 never qualifies. Knees with
no qualifying increase and no month-96 observation are censored
(indeterminate) and excluded from modeling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, UsageError

CLASS_NONE, CLASS_SLOW, CLASS_FAST = 0, 1, 2
CLASS_NAMES = {CLASS_NONE: "none", CLASS_SLOW: "slow", CLASS_FAST: "fast"}
VISIT_MONTHS = (0, 12, 24, 36, 48, 72, 96)
FAST_HORIZON = 72
FOLLOWUP_HORIZON = 96

CSV_HEADER = ("subject_id,side,institution_id,age,sex,bmi,tka_baseline,"
              "klg_m0,klg_m12,klg_m24,klg_m36,klg_m48,klg_m72,klg_m96")


@dataclass
class KneeRecord:
    subject_id: str
    side: str
    institution_id: str
    age: float
    sex: str | None = None
    bmi: float | None = None
    tka_baseline: bool = False
    klg_by_month: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.side not in ("L", "R"):
            raise DataError(f"side must be L or R, got {self.side!r}")
        for month, grade in self.klg_by_month.items():
            if grade is not None and not 0 <= grade <= 4:
                raise DataError(f"KLG must be 0..4, got {grade} at month {month}")

    @property
    def knee_id(self):
        return f"{self.subject_id}_{self.side}"

    @property
    def baseline_klg(self):
        return self.klg_by_month.get(0)


@dataclass
class ProgressionLabel:
    progression_class: int
    event_month: int | None
    rule_trace: str

    def __post_init__(self):
        if self.progression_class == CLASS_FAST:
            assert self.event_month is not None and self.event_month <= FAST_HORIZON
        elif self.progression_class == CLASS_SLOW:
            assert self.event_month is not None and FAST_HORIZON < self.event_month <= FOLLOWUP_HORIZON
        else:
            assert self.event_month is None


@dataclass
class Indeterminate:
    reason: str


def derive_label(record: KneeRecord):
    """First follow-up whose KLG exceeds baseline decides the class; the
    KL0 -> KL1 transition never counts as progression.

    Returns ProgressionLabel, or Indeterminate when no qualifying increase is
    observed and the knee lacks a month-96 KLG reading.
    """
    baseline = record.baseline_klg
    if baseline is None:
        raise UsageError(f"{record.knee_id}: baseline KLG missing")
    if baseline >= 4:
        raise UsageError(f"{record.knee_id}: baseline KLG {baseline} has no room to progress")
    for month in sorted(record.klg_by_month):
        if month == 0 or month > FOLLOWUP_HORIZON:
            continue
        grade = record.klg_by_month[month]
        if grade is None or grade <= baseline:
            continue
        if baseline == 0 and grade == 1:
            continue  # doubtful grade from a healthy baseline: not progression
        if month <= FAST_HORIZON:
            return ProgressionLabel(CLASS_FAST, month,
                                    f"first qualifying increase at month {month} <= {FAST_HORIZON}")
        return ProgressionLabel(CLASS_SLOW, month,
                                f"first qualifying increase at month {month} in "
                                f"({FAST_HORIZON}, {FOLLOWUP_HORIZON}]")
    if FOLLOWUP_HORIZON in record.klg_by_month and record.klg_by_month[FOLLOWUP_HORIZON] is not None:
        return ProgressionLabel(CLASS_NONE, None,
                                f"no qualifying increase through month {FOLLOWUP_HORIZON}")
    return Indeterminate(f"no qualifying increase and no month-{FOLLOWUP_HORIZON} observation")


def apply_exclusions(records, volume_ids=None):
    """Partition into (kept: [(record, label)], excluded: [(record, reason)])."""
    kept, excluded = [], []
    for record in records:
        if record.bmi is None:
            excluded.append((record, "missing_bmi"))
            continue
        if record.baseline_klg is None:
            excluded.append((record, "missing_klg"))
            continue
        if record.baseline_klg == 4:
            excluded.append((record, "klg4_baseline"))
            continue
        if record.tka_baseline:
            excluded.append((record, "tka_baseline"))
            continue
        if volume_ids is not None and record.knee_id not in volume_ids:
            excluded.append((record, "missing_mri"))
            continue
        label = derive_label(record)
        if isinstance(label, Indeterminate):
            excluded.append((record, "censored_followup"))
            continue
        kept.append((record, label))
    return kept, excluded


# ---------------------------------------------------------------------------
# splitting


@dataclass
class Splits:
    eval_ids: list  # knee ids of the hold-out institution
    folds: list  # list of knee-id lists, one per fold
    holdout_institution: str
    seed: int

    def fold_train_val(self, fold_index):
        val = self.folds[fold_index]
        train = [kid for i, f in enumerate(self.folds) if i != fold_index for kid in f]
        return train, val

    def to_dict(self):
        return {
            "holdout_institution": self.holdout_institution,
            "seed": self.seed,
            "eval_ids": self.eval_ids,
            "folds": self.folds,
        }


def split_dataset(labelled, holdout_institution, n_folds=5, seed=0) -> Splits:
    """Hold out every knee of one institution for evaluation, then assign the
    remaining subjects (both knees together) to stratified folds.

    Stratification groups subjects by their knees' label signature and deals
    each shuffled group round-robin, so per-fold class shares track the
    training-set proportions.
    """
    if n_folds < 2:
        raise ConfigError(f"n_folds must be >= 2, got {n_folds}")
    institutions = {r.institution_id for r, _ in labelled}
    if holdout_institution not in institutions:
        raise ConfigError(f"hold-out institution {holdout_institution!r} not in cohort "
                          f"(present: {', '.join(sorted(institutions))})")
    eval_ids = [r.knee_id for r, _ in labelled if r.institution_id == holdout_institution]

    train = [(r, lab) for r, lab in labelled if r.institution_id != holdout_institution]
    by_subject = {}
    for r, lab in train:
        by_subject.setdefault(r.subject_id, []).append((r, lab))

    groups = {}
    for subject_id, pairs in by_subject.items():
        signature = tuple(sorted(lab.progression_class for _, lab in pairs))
        groups.setdefault(signature, []).append(subject_id)

    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(n_folds)]
    offset = 0
    for signature in sorted(groups):
        subjects = sorted(groups[signature])
        rng.shuffle(subjects)
        for j, subject_id in enumerate(subjects):
            fold = folds[(offset + j) % n_folds]
            fold.extend(r.knee_id for r, _ in by_subject[subject_id])
        offset += len(subjects)
    return Splits(eval_ids=eval_ids, folds=folds,
                  holdout_institution=holdout_institution, seed=seed)


def resample_balance(train_indices, labels, rng):
    """Equalized epoch indices: each class contributes majority-count samples.

    Minority classes are oversampled with replacement-by-tiling (every sample
    appears at least once per epoch); the majority class is permuted, not
    duplicated. Epoch length is 3x the majority count.
    """
    train_indices = np.asarray(train_indices)
    labels = np.asarray(labels)
    per_class = {c: train_indices[labels == c] for c in (CLASS_NONE, CLASS_SLOW, CLASS_FAST)}
    empty = [CLASS_NAMES[c] for c, idx in per_class.items() if len(idx) == 0]
    if empty:
        raise ConfigError(f"cannot balance classes with no samples: {', '.join(empty)}")
    majority = max(len(idx) for idx in per_class.values())
    epoch = []
    for c in (CLASS_NONE, CLASS_SLOW, CLASS_FAST):
        idx = per_class[c]
        reps, rem = divmod(majority, len(idx))
        chunk = np.concatenate([np.tile(idx, reps),
                                rng.choice(idx, size=rem, replace=False)])
        epoch.append(chunk)
    epoch = np.concatenate(epoch)
    rng.shuffle(epoch)
    return epoch


# ---------------------------------------------------------------------------
# CSV interface


def _parse_cell(raw, kind, column, line_no):
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            return int(raw)
        if kind == "bool":
            if raw in ("0", "1"):
                return raw == "1"
            if raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError(raw)
        if kind == "side":
            if raw not in ("L", "R"):
                raise ValueError(raw)
            return raw
        if kind == "sex":
            if raw not in ("M", "F"):
                raise ValueError(raw)
            return raw
        if kind == "klg":
            value = int(raw)
            if not 0 <= value <= 4:
                raise ValueError(raw)
            return value
    except ValueError:
        raise DataError(f"line {line_no}: bad {column} value {raw!r}") from None
    return raw


def read_cohort_csv(path):
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty cohort file") from None
        if [h.strip() for h in header] != CSV_HEADER.split(","):
            raise DataError(f"{path}: unexpected header {','.join(header)!r}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 14:
                raise DataError(f"line {line_no}: expected 14 columns, got {len(row)}")
            try:
                klg = {}
                for month, cell in zip(VISIT_MONTHS, row[7:]):
                    grade = _parse_cell(cell, "klg", f"klg_m{month}", line_no)
                    if grade is not None:
                        klg[month] = grade
                age = _parse_cell(row[3], "float", "age", line_no)
                if age is None:
                    raise DataError(f"line {line_no}: age is required")
                records.append(KneeRecord(
                    subject_id=row[0].strip(),
                    side=_parse_cell(row[1], "side", "side", line_no),
                    institution_id=row[2].strip(),
                    age=age,
                    sex=_parse_cell(row[4], "sex", "sex", line_no),
                    bmi=_parse_cell(row[5], "float", "bmi", line_no),
                    tka_baseline=bool(_parse_cell(row[6], "bool", "tka_baseline", line_no)),
                    klg_by_month=klg,
                ))
            except DataError:
                raise
            except Exception as exc:
                raise DataError(f"line {line_no}: {exc}") from exc
    return records


def write_cohort_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER.split(","))
        for r in records:
            row = [r.subject_id, r.side, r.institution_id, f"{r.age:.1f}",
                   r.sex or "", "" if r.bmi is None else f"{r.bmi:.1f}",
                   "1" if r.tka_baseline else "0"]
            row += ["" if r.klg_by_month.get(m) is None else str(r.klg_by_month[m])
                    for m in VISIT_MONTHS]
            writer.writerow(row)
