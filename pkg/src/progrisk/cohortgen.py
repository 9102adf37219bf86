"""Synthetic longitudinal knee cohort with matched cases and controls.

Each simulated knee carries a latent severity path in ``[0, 1]`` that never
decreases: a random baseline level, a log-normal linear drift and
half-normal jumps at scheduled visits. Replacement surgery fires at the
first scheduled visit after baseline where severity plus threshold noise
(a knee-level offset plus a visit-level term) exceeds a fixed threshold;
knees that would already fire at baseline are redrawn. Scan features are a
fixed random linear projection of (severity, age, sex, BMI) plus Gaussian
noise.

Scan selection, per-horizon labels and progression groups follow the
case-control design: the first scan is at baseline, the second scan is the
latest imaging visit 1-4 years before surgery (cases) or the latest visit
leaving at least 4 years of follow-up (controls).
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

HORIZONS = (1, 2, 4)
KLG_CUTPOINTS = (0.2, 0.4, 0.6, 0.8)
BMI_TOLERANCE = 0.10


class Group(str, enum.Enum):
    SET1 = "Set1"
    SET2 = "Set2"
    SET3 = "Set3"
    NA = "NotApplicable"


@dataclass(frozen=True)
class SimConfig:
    n_subjects: int = 1000
    feature_dim: int = 16
    feature_noise: float = 0.3
    visit_interval_months: int = 12
    study_months: int = 108
    p_missed_visit: float = 0.15
    baseline_severity_max: float = 0.5
    rate_median: float = 0.003
    rate_sigma: float = 0.6
    jump_scale: float = 0.02
    tkr_threshold: float = 0.75
    threshold_spread: float = 0.2
    threshold_noise: float = 0.08
    p_female: float = 0.6
    age_mean: float = 63.5
    age_sd: float = 8.0
    bmi_mean: float = 30.0
    bmi_sd: float = 4.5
    ethnicities: Tuple[str, ...] = ("A", "B", "C")
    ethnicity_probs: Tuple[float, ...] = (0.75, 0.2, 0.05)

    def __post_init__(self):
        if self.n_subjects < 4:
            raise ValueError(f"n_subjects must be at least 4, got {self.n_subjects}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be non-negative")
        if self.visit_interval_months <= 0 or self.study_months < self.visit_interval_months:
            raise ValueError("visit schedule must contain at least one follow-up visit")
        if not 0 <= self.p_missed_visit < 1:
            raise ValueError("p_missed_visit must lie in [0, 1)")
        if len(self.ethnicities) != len(self.ethnicity_probs) or not math.isclose(sum(self.ethnicity_probs), 1.0):
            raise ValueError("ethnicity_probs must match ethnicities and sum to 1")

    @property
    def schedule(self) -> np.ndarray:
        return np.arange(0, self.study_months + 1, self.visit_interval_months, dtype=float)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    age: int
    sex: str
    ethnicity: str
    bmi: float
    role: str

    def __post_init__(self):
        if not 45 <= self.age <= 79:
            raise ValueError(f"age {self.age} outside the 45-79 recruitment range")
        if not self.bmi > 0:
            raise ValueError("bmi must be positive")
        if self.sex not in ("M", "F") or self.role not in ("case", "control"):
            raise ValueError("sex must be M/F and role case/control")


@dataclass
class KneeTrajectory:
    knee_id: str
    followup_end_months: float
    tkr_time_months: Optional[float] = None
    visit_times: Sequence[float] = ()
    baseline_severity: float = 0.0
    rate: float = 0.0
    jump_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jumps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    feature_noise: Dict[float, np.ndarray] = field(default_factory=dict)

    def severity_at(self, t):
        t = np.asarray(t, dtype=float)
        cum = np.zeros_like(t)
        if len(self.jumps):
            cum = np.sum(np.where(self.jump_times[:, None] <= t.reshape(-1)[None, :], self.jumps[:, None], 0.0),
                         axis=0).reshape(t.shape)
        s = np.clip(self.baseline_severity + self.rate * t + cum, 0.0, 1.0)
        return float(s) if s.ndim == 0 else s


@dataclass(frozen=True)
class ScanSample:
    knee_id: str
    scan_index: int
    scan_time_months: float
    features: np.ndarray
    klg: int
    labels: Dict[int, int]

    @property
    def label_1yr(self) -> int:
        return self.labels[1]

    @property
    def label_2yr(self) -> int:
        return self.labels[2]

    @property
    def label_4yr(self) -> int:
        return self.labels[4]


@dataclass
class KneeRecord:
    subject: SubjectRecord
    scan1: ScanSample
    scan2: Optional[ScanSample] = None
    group_per_horizon: Dict[int, Group] = field(default_factory=dict)

    def __post_init__(self):
        if not self.group_per_horizon:
            self.group_per_horizon = {h: assign_group(self, h) for h in HORIZONS}

    @property
    def knee_id(self) -> str:
        return self.scan1.knee_id

    @property
    def subject_id(self) -> str:
        return self.subject.subject_id

    @property
    def is_case(self) -> bool:
        return self.subject.role == "case"

    def scans(self) -> List[ScanSample]:
        return [self.scan1] if self.scan2 is None else [self.scan1, self.scan2]


@dataclass
class SimulatedCohort:
    config: SimConfig
    seed: int
    subjects: List[SubjectRecord]
    trajectories: List[KneeTrajectory]
    projection: np.ndarray


@dataclass
class MatchResult:
    pairs: List[Tuple[SubjectRecord, SubjectRecord]]
    excluded: List[SubjectRecord]

    @property
    def matched_subjects(self) -> List[SubjectRecord]:
        return [s for pair in self.pairs for s in pair]


def horizon_label(tkr_time: Optional[float], scan_time: float, horizon_years: int) -> int:
    """1 iff surgery falls in ``(scan_time, scan_time + 12 * horizon]``."""
    if tkr_time is None:
        return 0
    return int(scan_time < tkr_time <= scan_time + 12.0 * horizon_years)


def assign_klg(severity: float) -> int:
    """Bin severity into a 0-4 grade; each bin includes its upper edge."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must lie in [0, 1], got {severity}")
    return int(np.searchsorted(KLG_CUTPOINTS, severity, side="left"))


def assign_group(knee: KneeRecord, horizon: int) -> Group:
    if knee.scan2 is None:
        return Group.NA
    l1, l2 = knee.scan1.labels[horizon], knee.scan2.labels[horizon]
    if l1 == 0 and l2 == 1:
        return Group.SET1
    if l1 == 0 and l2 == 0:
        return Group.SET2
    if l1 == 1 and l2 == 1:
        return Group.SET3
    return Group.NA


def select_scans(knee: KneeTrajectory, role: str) -> Tuple[float, Optional[float]]:
    """Baseline scan time and the second scan time, or ``None`` if no visit qualifies."""
    later = [t for t in knee.visit_times if t > 0]
    if role == "case":
        tkr = knee.tkr_time_months
        ok = [t for t in later if tkr - 48 <= t <= tkr - 12]
    else:
        ok = [t for t in later if knee.followup_end_months - t >= 48]
    return 0.0, (max(ok) if ok else None)


def _demographic_signal(subject: SubjectRecord) -> np.ndarray:
    return np.array([
        (subject.age - 63.5) / 8.0,
        1.0 if subject.sex == "F" else -1.0,
        (subject.bmi - 30.0) / 4.5,
    ])


def scan_features(cohort: SimulatedCohort, subject: SubjectRecord, knee: KneeTrajectory, t: float) -> np.ndarray:
    severity = knee.severity_at(t)
    signal = np.r_[(severity - 0.5) / 0.25, _demographic_signal(subject)]
    return signal @ cohort.projection.T + cohort.config.feature_noise * knee.feature_noise[float(t)]


def _draw_subject(rng, cfg: SimConfig, schedule: np.ndarray, subject_id: str, knee_id: str):
    age = int(np.clip(round(rng.normal(cfg.age_mean, cfg.age_sd)), 45, 79))
    sex = "F" if rng.random() < cfg.p_female else "M"
    ethnicity = str(rng.choice(cfg.ethnicities, p=cfg.ethnicity_probs))
    bmi = round(float(max(16.0, rng.normal(cfg.bmi_mean, cfg.bmi_sd))), 1)
    noise = rng.standard_normal((schedule.size, cfg.feature_dim))
    missed = rng.random(schedule.size) < cfg.p_missed_visit
    while True:
        s0 = rng.uniform(0.0, cfg.baseline_severity_max)
        rate = cfg.rate_median * math.exp(cfg.rate_sigma * rng.standard_normal())
        jumps = np.abs(rng.normal(0.0, cfg.jump_scale, schedule.size))
        jumps[0] = 0.0
        eps = rng.normal(0.0, cfg.threshold_noise, schedule.size) + rng.normal(0.0, cfg.threshold_spread)
        knee = KneeTrajectory(knee_id=knee_id, followup_end_months=float(cfg.study_months),
                              baseline_severity=s0, rate=rate, jump_times=schedule.copy(), jumps=jumps)
        fired = knee.severity_at(schedule) + eps > cfg.tkr_threshold
        if not fired[0]:
            break
    hits = np.flatnonzero(fired)
    if hits.size:
        knee.tkr_time_months = float(schedule[hits[0]])
        knee.followup_end_months = knee.tkr_time_months
    visible = [float(t) for t, m in zip(schedule, missed)
               if (t == 0 or not m) and t <= knee.followup_end_months
               and (knee.tkr_time_months is None or t < knee.tkr_time_months)]
    knee.visit_times = visible
    knee.feature_noise = {float(t): noise[k] for k, t in enumerate(schedule)}
    role = "case" if knee.tkr_time_months is not None else "control"
    return SubjectRecord(subject_id, age, sex, ethnicity, bmi, role), knee


def simulate_cohort(config: SimConfig, seed: int) -> SimulatedCohort:
    rng = np.random.default_rng(seed)
    schedule = config.schedule
    projection = rng.normal(0.0, 0.5, size=(config.feature_dim, 4))
    width = len(str(config.n_subjects))
    subjects, knees = [], []
    for k in range(config.n_subjects):
        sid = f"S{k + 1:0{width}d}"
        side = "R" if rng.random() < 0.5 else "L"
        subject, knee = _draw_subject(rng, config, schedule, sid, f"{sid}-{side}")
        subjects.append(subject)
        knees.append(knee)
    return SimulatedCohort(config, seed, subjects, knees, projection)


def is_match(case: SubjectRecord, control: SubjectRecord) -> bool:
    return (case.sex == control.sex and case.ethnicity == control.ethnicity and case.age == control.age
            and abs(case.bmi - control.bmi) <= BMI_TOLERANCE * case.bmi)


def match_case_control(subjects: Sequence[SubjectRecord]) -> MatchResult:
    """Greedy one-to-one matching in input order.

    Each case takes the eligible unmatched control with the closest BMI
    (earliest in input order on ties). Unmatched subjects are excluded.
    """
    controls = [s for s in subjects if s.role == "control"]
    taken = [False] * len(controls)
    pairs, used = [], set()
    for case in subjects:
        if case.role != "case":
            continue
        best, best_gap = None, None
        for j, ctrl in enumerate(controls):
            if taken[j] or not is_match(case, ctrl):
                continue
            gap = abs(case.bmi - ctrl.bmi)
            if best is None or gap < best_gap:
                best, best_gap = j, gap
        if best is not None:
            taken[best] = True
            pairs.append((case, controls[best]))
            used.update((case.subject_id, controls[best].subject_id))
    excluded = [s for s in subjects if s.subject_id not in used]
    return MatchResult(pairs, excluded)


def build_knee_record(cohort: SimulatedCohort, subject: SubjectRecord, knee: KneeTrajectory) -> KneeRecord:
    t1, t2 = select_scans(knee, subject.role)
    scans = []
    for index, t in ((1, t1), (2, t2)):
        if t is None:
            scans.append(None)
            continue
        labels = {h: horizon_label(knee.tkr_time_months, t, h) for h in HORIZONS}
        scans.append(ScanSample(knee.knee_id, index, float(t), scan_features(cohort, subject, knee, t),
                                assign_klg(knee.severity_at(t)), labels))
    return KneeRecord(subject, scans[0], scans[1])


def generate_knees(config: SimConfig, seed: int) -> Tuple[List[KneeRecord], MatchResult, SimulatedCohort]:
    """Simulate, match, and build one knee record per matched subject."""
    cohort = simulate_cohort(config, seed)
    match = match_case_control(cohort.subjects)
    keep = {s.subject_id for s in match.matched_subjects}
    records = [build_knee_record(cohort, s, k) for s, k in zip(cohort.subjects, cohort.trajectories)
               if s.subject_id in keep]
    return records, match, cohort


def group_counts(knees: Sequence[KneeRecord]) -> Dict[int, Dict[str, int]]:
    out = {}
    for h in HORIZONS:
        counts = {g.value: 0 for g in Group}
        for knee in knees:
            counts[knee.group_per_horizon[h].value] += 1
        out[h] = counts
    return out


# -- CSV --------------------------------------------------------------------

BASE_COLUMNS = ["subject_id", "knee_id", "role", "age", "sex", "ethnicity", "bmi", "scan_index",
                "scan_time_months", "klg", "y_1yr", "y_2yr", "y_4yr"]


class CohortFormatError(ValueError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


def cohort_to_csv(knees: Sequence[KneeRecord]) -> str:
    if not knees:
        raise ValueError("no knees to write")
    dim = knees[0].scan1.features.size
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BASE_COLUMNS + [f"f{j}" for j in range(dim)])
    for knee in sorted(knees, key=lambda k: k.subject_id):
        s = knee.subject
        for scan in knee.scans():
            writer.writerow([s.subject_id, scan.knee_id, s.role, s.age, s.sex, s.ethnicity, repr(float(s.bmi)),
                             scan.scan_index, repr(float(scan.scan_time_months)), scan.klg,
                             scan.labels[1], scan.labels[2], scan.labels[4]]
                            + [repr(float(v)) for v in scan.features])
    return buf.getvalue()


def write_cohort_csv(knees: Sequence[KneeRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(cohort_to_csv(knees))


def _parse(value: str, kind, row: int, column: str):
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise CohortFormatError(f"cannot parse {value!r} as {kind.__name__}", row, column) from None
    if kind is float and not math.isfinite(out):
        raise CohortFormatError(f"non-finite value {value!r}", row, column)
    return out


def read_cohort_csv(path) -> List[KneeRecord]:
    """Parse a cohort CSV; rows are numbered from 1 for the header."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CohortFormatError("empty file")
    header = rows[0]
    if header[:len(BASE_COLUMNS)] != BASE_COLUMNS:
        missing = [c for c in BASE_COLUMNS if c not in header]
        raise CohortFormatError(f"header must start with {BASE_COLUMNS}; missing {missing}", 1)
    feat_cols = header[len(BASE_COLUMNS):]
    if not feat_cols or feat_cols != [f"f{j}" for j in range(len(feat_cols))]:
        raise CohortFormatError("feature columns must be f0..f{d-1}", 1)

    by_knee: Dict[str, dict] = {}
    order: List[str] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CohortFormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
        rec = dict(zip(header, row))
        try:
            subject = SubjectRecord(rec["subject_id"], _parse(rec["age"], int, lineno, "age"), rec["sex"],
                                    rec["ethnicity"], _parse(rec["bmi"], float, lineno, "bmi"), rec["role"])
        except CohortFormatError:
            raise
        except ValueError as exc:
            raise CohortFormatError(str(exc), lineno) from None
        index = _parse(rec["scan_index"], int, lineno, "scan_index")
        if index not in (1, 2):
            raise CohortFormatError("scan_index must be 1 or 2", lineno, "scan_index")
        labels = {}
        for h, col in zip(HORIZONS, ("y_1yr", "y_2yr", "y_4yr")):
            labels[h] = _parse(rec[col], int, lineno, col)
            if labels[h] not in (0, 1):
                raise CohortFormatError("labels must be 0 or 1", lineno, col)
        klg = _parse(rec["klg"], int, lineno, "klg")
        if not 0 <= klg <= 4:
            raise CohortFormatError("klg must be 0-4", lineno, "klg")
        feats = np.array([_parse(rec[c], float, lineno, c) for c in feat_cols])
        scan = ScanSample(rec["knee_id"], index, _parse(rec["scan_time_months"], float, lineno, "scan_time_months"),
                          feats, klg, labels)
        entry = by_knee.get(rec["knee_id"])
        if entry is None:
            entry = by_knee[rec["knee_id"]] = {"subject": subject, "scans": {}, "row": lineno}
            order.append(rec["knee_id"])
        elif entry["subject"] != subject:
            raise CohortFormatError("subject fields differ between scans of one knee", lineno)
        if index in entry["scans"]:
            raise CohortFormatError(f"duplicate scan {index} for knee {rec['knee_id']}", lineno)
        entry["scans"][index] = scan

    knees = []
    for kid in order:
        entry = by_knee[kid]
        if 1 not in entry["scans"]:
            raise CohortFormatError(f"knee {kid} has no first scan", entry["row"])
        s1, s2 = entry["scans"][1], entry["scans"].get(2)
        if s2 is not None and not s2.scan_time_months > s1.scan_time_months:
            raise CohortFormatError(f"knee {kid}: second scan must follow the first", entry["row"])
        knees.append(KneeRecord(entry["subject"], s1, s2))
    return knees
