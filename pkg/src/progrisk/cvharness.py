"""Nested cross-validation, per-approach training, ensembling and reporting.

Subjects are split into 7 stratified outer folds; for each outer fold the
remaining subjects are split again into 6 stratified inner folds, each of
which serves once as the validation set. That gives 42 trained fold models
per (approach, horizon). Internal predictions for a subject come only from
the 6 models whose outer test fold contains it; external predictions
average all 42.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .cohortgen import Group, KneeRecord
from .gradnet import AdamState, EncoderConfig, EncoderModel, Gradients, adam_step, backward, forward, init_kaiming
from .metrics import MetricReport, PredictionRecord, SingleClassError, auroc, metric_report, records_to_arrays
from .regularizers import RegConfig, RegKind, regularized_terms
from .riskform import Formulation, bce_single, bce_terms, predict_pair

log = logging.getLogger(__name__)


class Approach(str, enum.Enum):
    BASELINE = "Baseline"
    RISKREG = "RiskReg"
    CONREG = "ConReg"
    CONREG_RISKREG = "ConRegPlusRiskReg"
    RISKFORM1 = "RiskFORM1"
    RISKFORM2 = "RiskFORM2"

    @property
    def head(self) -> Formulation:
        if self is Approach.RISKFORM1:
            return Formulation.RISKFORM1
        if self is Approach.RISKFORM2:
            return Formulation.RISKFORM2
        return Formulation.BASELINE

    @property
    def reg_kind(self) -> Optional[RegKind]:
        return {Approach.RISKREG: RegKind.RISKREG, Approach.CONREG: RegKind.CONREG,
                Approach.CONREG_RISKREG: RegKind.BOTH}.get(self)

    @property
    def scorers(self) -> Tuple[str, ...]:
        return ("f", "g") if self is Approach.RISKFORM2 else ("f",)


class AnalyticalCohort(str, enum.Enum):
    COHORT1 = "Cohort1"
    COHORT2 = "Cohort2"
    COHORT3 = "Cohort3"
    COHORT4 = "Cohort4"

    @property
    def groups(self) -> Tuple[str, ...]:
        return {
            AnalyticalCohort.COHORT1: (Group.SET1.value,),
            AnalyticalCohort.COHORT2: (Group.SET1.value, Group.SET2.value),
            AnalyticalCohort.COHORT3: (Group.SET1.value, Group.SET3.value),
            AnalyticalCohort.COHORT4: (Group.SET2.value, Group.SET3.value),
        }[self]


@dataclass(frozen=True)
class TrainConfig:
    hidden_dims: Tuple[int, ...] = (32, 16)
    activation: str = "relu"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 40
    batch_size: int = 16
    margin_m: float = 2.0
    gamma: float = 1.0
    contrastive_margin: float = 1.0

    def reg_config(self, approach: Approach) -> Optional[RegConfig]:
        if approach.reg_kind is None:
            return None
        return RegConfig(approach.reg_kind, self.margin_m, self.gamma, self.contrastive_margin)

    def encoder_config(self, input_dim: int, seed: int) -> EncoderConfig:
        return EncoderConfig(input_dim, tuple(self.hidden_dims), self.activation, seed)

    def adam(self, model: EncoderModel) -> AdamState:
        return AdamState.for_model(model, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                                   eps=self.eps, weight_decay=self.weight_decay)


# -- data ---------------------------------------------------------------------

@dataclass
class KneeArrays:
    """Column view of knees for one horizon; second-scan columns are zero when absent."""

    knee_ids: List[str]
    subject_ids: List[str]
    x1: np.ndarray
    x2: np.ndarray
    has2: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    klg1: np.ndarray
    klg2: np.ndarray
    groups: List[str]
    horizon: int

    @classmethod
    def from_knees(cls, knees: Sequence[KneeRecord], horizon: int) -> "KneeArrays":
        if not knees:
            raise ValueError("no knees")
        dim = knees[0].scan1.features.size
        zeros = np.zeros(dim)
        return cls(
            knee_ids=[k.knee_id for k in knees],
            subject_ids=[k.subject_id for k in knees],
            x1=np.array([k.scan1.features for k in knees], dtype=float),
            x2=np.array([k.scan2.features if k.scan2 is not None else zeros for k in knees], dtype=float),
            has2=np.array([k.scan2 is not None for k in knees]),
            y1=np.array([k.scan1.labels[horizon] for k in knees], dtype=float),
            y2=np.array([k.scan2.labels[horizon] if k.scan2 is not None else 0 for k in knees], dtype=float),
            klg1=np.array([k.scan1.klg for k in knees]),
            klg2=np.array([k.scan2.klg if k.scan2 is not None else -1 for k in knees]),
            groups=[k.group_per_horizon[horizon].value for k in knees],
            horizon=horizon,
        )

    def __len__(self):
        return len(self.knee_ids)

    def take(self, idx) -> "KneeArrays":
        idx = np.asarray(idx, dtype=int)
        return KneeArrays([self.knee_ids[i] for i in idx], [self.subject_ids[i] for i in idx],
                          self.x1[idx], self.x2[idx], self.has2[idx], self.y1[idx], self.y2[idx],
                          self.klg1[idx], self.klg2[idx], [self.groups[i] for i in idx], self.horizon)

    def scan_labels(self) -> np.ndarray:
        return np.r_[self.y1, self.y2[self.has2]]


# -- split plan ---------------------------------------------------------------

@dataclass
class SplitPlan:
    outer_folds: List[List[str]]
    inner_plans: List[List[Tuple[List[str], List[str]]]]
    seed: int

    def outer_of(self) -> Dict[str, int]:
        return {sid: k for k, fold in enumerate(self.outer_folds) for sid in fold}

    def runs(self):
        """Yield ``(outer, inner, train_ids, val_ids, test_ids)`` for every fold model."""
        for o, fold in enumerate(self.outer_folds):
            for i, (train, val) in enumerate(self.inner_plans[o]):
                yield o, i, train, val, fold

    @property
    def n_runs(self) -> int:
        return sum(len(p) for p in self.inner_plans)

    def to_dict(self) -> dict:
        return {"seed": int(self.seed), "outer_folds": self.outer_folds,
                "inner_plans": [[{"train": t, "validation": v} for t, v in p] for p in self.inner_plans]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls([list(f) for f in d["outer_folds"]],
                   [[(list(s["train"]), list(s["validation"])) for s in p] for p in d["inner_plans"]],
                   d["seed"])


def _stratified_folds(ids: Sequence[str], is_case: Dict[str, bool], k: int, rng) -> List[List[str]]:
    cases = sorted(s for s in ids if is_case[s])
    controls = sorted(s for s in ids if not is_case[s])
    cases = [cases[j] for j in rng.permutation(len(cases))]
    controls = [controls[j] for j in rng.permutation(len(controls))]
    folds: List[List[str]] = [[] for _ in range(k)]
    for pos, sid in enumerate(cases + controls):
        folds[pos % k].append(sid)
    return [sorted(f) for f in folds]


def build_split_plan(knees: Sequence[KneeRecord], seed: int, n_outer: int = 7, n_inner: int = 6) -> SplitPlan:
    """Subject-level stratified nested split, stratified on case/control status."""
    is_case = {}
    for k in knees:
        if k.subject_id in is_case:
            raise ValueError(f"subject {k.subject_id} appears more than once")
        is_case[k.subject_id] = k.is_case
    n = len(is_case)
    n_cases = sum(is_case.values())
    if n < 2 * n_outer or n_cases == 0 or n_cases == n:
        raise ValueError(f"need at least {2 * n_outer} subjects with both classes to stratify, got {n}")
    rng = np.random.default_rng(seed)
    outer = _stratified_folds(list(is_case), is_case, n_outer, rng)
    inner_plans = []
    for o in range(n_outer):
        rest = sorted(s for j, f in enumerate(outer) if j != o for s in f)
        inner = _stratified_folds(rest, is_case, n_inner, rng)
        plan = []
        for i in range(n_inner):
            train = sorted(s for j, f in enumerate(inner) if j != i for s in f)
            plan.append((train, inner[i]))
        inner_plans.append(plan)
    log.info("split plan stratified on case/control status: %d outer x %d inner", n_outer, n_inner)
    return SplitPlan(outer, inner_plans, seed)


# -- training -----------------------------------------------------------------

@dataclass
class FoldResult:
    models: Dict[str, EncoderModel]
    log: List[dict]
    best_epoch: int
    selection: str


def predict_arrays(models: Dict[str, EncoderModel], approach: Approach, data: KneeArrays):
    """Scan-1 and scan-2 risks under the approach's head; scan-2 is NaN when absent."""
    approach = Approach(approach)
    f = models["f"]
    z1 = forward(f, data.x1).logit
    r1 = expit(z1)
    r2 = np.full(len(data), np.nan)
    if data.has2.any():
        x2 = data.x2[data.has2]
        scorer = models["g"] if approach is Approach.RISKFORM2 else f
        z2 = forward(scorer, x2).logit
        r2[data.has2] = predict_pair(approach.head, z1[data.has2], z2).y2_hat
    return r1, r2


def _objective(approach: Approach, models, data: KneeArrays, reg: Optional[RegConfig], need_grads: bool):
    """Summed loss over the knees in ``data`` and, optionally, parameter gradients."""
    f = models["f"]
    p = data.has2
    t1 = forward(f, data.x1)
    z1 = t1.logit
    n = len(data)
    d1 = np.zeros(n)
    dpen1 = None
    loss = 0.0

    single = ~p
    if single.any():
        l, d = bce_single(z1[single], data.y1[single])
        loss += float(l.sum())
        d1[single] = d

    grads = {}
    if p.any():
        scorer_name = "g" if approach is Approach.RISKFORM2 else "f"
        t2 = forward(models[scorer_name], data.x2[p])
        z2 = t2.logit
        if reg is None:
            l, dp1, d2 = bce_terms(approach.head, z1[p], z2, data.y1[p], data.y2[p])
            dh1 = dh2 = None
        else:
            h1 = t1.penultimate[p] if reg.uses_contrastive else None
            h2 = t2.penultimate if reg.uses_contrastive else None
            l, dp1, d2, dh1, dh2 = regularized_terms(z1[p], z2, data.y1[p], data.y2[p], h1, h2, reg)
        loss += float(l.sum())
        d1[p] = dp1
        if dh1 is not None:
            dpen1 = np.zeros_like(t1.penultimate)
            dpen1[p] = dh1
        if need_grads:
            grads[scorer_name] = backward(models[scorer_name], t2, d2, dh2)
    if not need_grads:
        return loss, None
    g1 = backward(f, t1, d1, dpen1)
    grads["f"] = grads["f"] + g1 if "f" in grads else g1
    for name, model in models.items():
        if name not in grads:
            grads[name] = Gradients([np.zeros_like(w) for w in model.weights], [np.zeros_like(b) for b in model.biases])
    return loss, grads


def train_fold(train: KneeArrays, val: KneeArrays, approach, config: TrainConfig, seed: int) -> FoldResult:
    """Mini-batch Adam training with best-validation-AUROC checkpoint selection.

    Paired knees stay together in a batch. When the validation scans hold a
    single class the checkpoint with the lowest validation loss is kept.
    """
    approach = Approach(approach)
    if len(train) == 0:
        raise ValueError("empty training set")
    seed = int(seed) % 2**64
    rng = np.random.default_rng(seed)
    dim = train.x1.shape[1]
    models = {name: init_kaiming(config.encoder_config(dim, (seed + j) % 2**64))
              for j, name in enumerate(approach.scorers)}
    states = {name: config.adam(m) for name, m in models.items()}
    reg = config.reg_config(approach)

    val_labels = val.scan_labels() if len(val) else np.zeros(0)
    use_auroc = val_labels.size > 0 and 0 < val_labels.sum() < val_labels.size
    selection = "val_auroc" if use_auroc else "val_loss"
    if not use_auroc:
        log.warning("validation set is single-class; selecting checkpoint by validation loss")

    best = None
    best_score = -np.inf
    best_epoch = -1
    history = []
    n = len(train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = train.take(order[start:start + config.batch_size])
            loss, grads = _objective(approach, models, batch, reg, True)
            total += loss
            scale = 1.0 / len(batch)
            for name in models:
                models[name], states[name] = adam_step(states[name], models[name], grads[name].scaled(scale))
        entry = {"epoch": epoch, "train_loss": total / n}
        if len(val):
            val_loss, _ = _objective(approach, models, val, reg, False)
            entry["val_loss"] = val_loss / len(val)
            if use_auroc:
                r1, r2 = predict_arrays(models, approach, val)
                entry["val_auroc"] = auroc(np.r_[r1, r2[val.has2]], val_labels)
            score = entry["val_auroc"] if use_auroc else -entry["val_loss"]
        else:
            score = -entry["train_loss"]
        history.append(entry)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best = {name: m.copy() for name, m in models.items()}
    if best is None:
        best = {name: m.copy() for name, m in models.items()}
    return FoldResult(best, history, best_epoch, selection)


@dataclass
class BundleMember:
    outer: int
    inner: int
    models: Dict[str, EncoderModel]
    log: List[dict] = field(default_factory=list)
    best_epoch: int = -1
    selection: str = "val_auroc"


@dataclass
class TrainedBundle:
    approach: Approach
    horizon: int
    members: List[BundleMember]
    split_plan: SplitPlan
    config: dict = field(default_factory=dict)

    def members_for_outer(self, outer: int) -> List[BundleMember]:
        return [m for m in self.members if m.outer == outer]


def fold_seed(master_seed: int, outer: int, inner: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), outer, inner]).generate_state(2, np.uint64)[0])


def _train_member(args):
    o, i, train, val, approach, config, seed = args
    res = train_fold(train, val, approach, config, seed)
    return BundleMember(o, i, res.models, res.log, res.best_epoch, res.selection)


def run_nested_cv(knees: Sequence[KneeRecord], approach, horizon: int, config: TrainConfig, seed: int,
                  n_jobs: int = 1, plan: Optional[SplitPlan] = None, n_outer: int = 7, n_inner: int = 6,
                  config_snapshot: Optional[dict] = None) -> TrainedBundle:
    """Train every (outer, inner) fold model; results do not depend on ``n_jobs``."""
    approach = Approach(approach)
    if plan is None:
        plan = build_split_plan(knees, seed, n_outer, n_inner)
    data = KneeArrays.from_knees(knees, horizon)
    pos = {sid: j for j, sid in enumerate(data.subject_ids)}
    tasks = []
    for o, i, train_ids, val_ids, _ in plan.runs():
        tasks.append((o, i, data.take([pos[s] for s in train_ids]), data.take([pos[s] for s in val_ids]),
                      approach, config, fold_seed(seed, o, i)))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            members = list(pool.map(_train_member, tasks))
    else:
        members = [_train_member(t) for t in tasks]
    members.sort(key=lambda m: (m.outer, m.inner))
    return TrainedBundle(approach, horizon, members, plan, dict(config_snapshot or {}))


# -- prediction ---------------------------------------------------------------

def _mean_risks(members: Sequence[BundleMember], approach: Approach, data: KneeArrays):
    r1s, r2s = [], []
    for m in members:
        r1, r2 = predict_arrays(m.models, approach, data)
        r1s.append(r1)
        r2s.append(r2)
    return np.mean(r1s, axis=0), np.mean(r2s, axis=0)


def ensemble_predict(bundle: TrainedBundle, knees: Sequence[KneeRecord], scope: str = "internal"
                     ) -> List[PredictionRecord]:
    """One record per scan; risk is the mean member probability.

    ``internal`` routes each knee only through the members of the outer fold
    that held it out; ``external`` averages every member.
    """
    if scope not in ("internal", "external"):
        raise ValueError(f"scope must be 'internal' or 'external', got {scope!r}")
    data = KneeArrays.from_knees(knees, bundle.horizon)
    r1 = np.full(len(data), np.nan)
    r2 = np.full(len(data), np.nan)
    outer_idx = np.full(len(data), -1)
    if scope == "internal":
        where = bundle.split_plan.outer_of()
        unknown = [s for s in data.subject_ids if s not in where]
        if unknown:
            raise KeyError(f"{len(unknown)} subjects are not in the split plan, e.g. {unknown[0]}")
        outer_idx = np.array([where[s] for s in data.subject_ids])
        for o in sorted(set(outer_idx.tolist())):
            rows = np.flatnonzero(outer_idx == o)
            a, b = _mean_risks(bundle.members_for_outer(o), bundle.approach, data.take(rows))
            r1[rows], r2[rows] = a, b
    else:
        r1, r2 = _mean_risks(bundle.members, bundle.approach, data)

    records = []
    for j in range(len(data)):
        fold = int(outer_idx[j]) if scope == "internal" else None
        common = dict(knee_id=data.knee_ids[j], subject_id=data.subject_ids[j], group=data.groups[j],
                      horizon=bundle.horizon, outer_fold=fold)
        records.append(PredictionRecord(scan_index=1, risk=float(r1[j]), label=int(data.y1[j]),
                                        klg=int(data.klg1[j]), **common))
        if data.has2[j]:
            records.append(PredictionRecord(scan_index=2, risk=float(r2[j]), label=int(data.y2[j]),
                                            klg=int(data.klg2[j]), **common))
    return records


def leakage_free(records: Sequence[PredictionRecord], bundle: TrainedBundle) -> bool:
    """True when no internal record came from a model that saw its subject."""
    for outer, inner, train, val, _ in bundle.split_plan.runs():
        seen = set(train) | set(val)
        if any(r.outer_fold == outer and r.subject_id in seen for r in records):
            return False
    return all(r.outer_fold is not None for r in records)


# -- reports ------------------------------------------------------------------

def subgroup_report(records: Sequence[PredictionRecord], cohorts: Sequence[AnalyticalCohort] = tuple(AnalyticalCohort),
                    n_resamples: int = 0, level: float = 0.95, seed: int = 0) -> Dict[str, MetricReport]:
    """AUROC and AUPRC over all scans of the knees in each analytical cohort."""
    out = {}
    for cohort in cohorts:
        cohort = AnalyticalCohort(cohort)
        subset = [r for r in records if r.group in cohort.groups]
        scores, labels = records_to_arrays(subset)
        out[cohort.value] = metric_report(scores, labels, n_resamples, level, seed)
    return out


def klg_report(records: Sequence[PredictionRecord]) -> Dict[int, Optional[float]]:
    """AUROC per KL grade 0-4; ``None`` for grades without both classes."""
    out: Dict[int, Optional[float]] = {}
    for grade in range(5):
        scores, labels = records_to_arrays([r for r in records if r.klg == grade])
        try:
            out[grade] = auroc(scores, labels)
        except SingleClassError:
            out[grade] = None
    return out
