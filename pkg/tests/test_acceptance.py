"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in ``RESULTS`` and echoed in the terminal summary
by ``conftest.py``, so they appear even when output is captured. Run this
file alone with ``python3 -m pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
from scipy.special import expit

from progrisk.cli import main
from progrisk.cohortgen import HORIZONS, Group, KneeRecord, ScanSample, SimConfig, SubjectRecord, generate_knees
from progrisk.cvharness import (Approach, KneeArrays, TrainConfig, _objective, build_split_plan, ensemble_predict,
                                run_nested_cv, subgroup_report)
from progrisk.gradnet import EncoderConfig, forward, init_kaiming
from progrisk.metrics import auprc, auroc, delong_test, records_to_arrays
from progrisk.regularizers import RegConfig, RegKind, riskreg_loss, riskreg_terms, total_regularized_loss
from progrisk.riskform import PairLabels, predict_baseline_pair, predict_pair_form1, predict_pair_form2

from oracles import (central_difference, enumerated_average_precision, exchangeable_pair_dataset, pairwise_auroc,
                     permutation_p_value, relative_error)

RESULTS = []


def report(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1. monotonicity ----------------------------------------------------------

def test_c1_monotonicity():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    z1, z2 = rng.uniform(-20, 20, size=(2, 100_000))
    y1 = expit(z1)
    slack = np.spacing(y1)
    bad = {}
    for name, head in (("RiskFORM1", predict_pair_form1), ("RiskFORM2", predict_pair_form2)):
        bad[name] = int(np.sum(head(z1, z2).y2_hat < y1 - slack))
    witnesses = int(np.sum(predict_baseline_pair(z1, z2).y2_hat < y1))
    elapsed = time.perf_counter() - start
    ok = bad == {"RiskFORM1": 0, "RiskFORM2": 0} and witnesses >= 1 and elapsed < 1.0
    report(1, "monotone risk heads", ok,
           f"violations {bad}, Baseline witnesses {witnesses}, {elapsed:.2f}s")


# -- 2. gradients -------------------------------------------------------------

LOSSES = {
    "Baseline BCE": (Approach.BASELINE, None),
    "RiskFORM1": (Approach.RISKFORM1, None),
    "RiskFORM2": (Approach.RISKFORM2, None),
    "ConReg total": (Approach.CONREG, RegConfig(RegKind.CONREG, margin_m=2.0, gamma=1.0, contrastive_margin=1.0)),
    "RiskReg total": (Approach.RISKREG, RegConfig(RegKind.RISKREG, margin_m=2.0, gamma=1.0)),
}


def _random_batch(rng, dim):
    n = int(rng.integers(3, 7))
    has2 = rng.random(n) < 0.7
    has2[0] = True
    y1 = rng.integers(0, 2, n).astype(float)
    y2 = np.where(has2, np.maximum(y1, rng.integers(0, 2, n)), 0).astype(float)
    x1 = rng.normal(size=(n, dim))
    x2 = np.where(has2[:, None], rng.normal(size=(n, dim)), 0.0)
    ids = [f"K{j}" for j in range(n)]
    return KneeArrays(ids, ids, x1, x2, has2, y1, y2, np.zeros(n, int), np.zeros(n, int), ["Set1"] * n, 1)


def _near_kink(approach, models, data, reg, tol=1e-3):
    """True when any hinge or ReLU argument lies within ``tol`` of its kink."""
    traces = {name: (forward(m, data.x1), forward(m, data.x2[data.has2])) for name, m in models.items()}
    for name, m in models.items():
        if m.config.activation == "relu":
            for trace in traces[name]:
                if any(np.any(np.abs(z) <= tol) for z in trace.preacts[:-1]):
                    return True
    if reg is None:
        return False
    t1, t2 = traces["f"][0], traces["f"][1]
    p = data.has2
    if reg.uses_ranking:
        _, _, _, arg = riskreg_terms(t1.logit[p], t2.logit, reg.margin_m)
        if np.any(np.abs(arg) <= tol):
            return True
    if reg.uses_contrastive:
        dist = np.linalg.norm(t2.penultimate - t1.penultimate[p], axis=-1)
        if np.any(np.abs(dist - reg.contrastive_margin) <= tol) or np.any(dist <= tol):
            return True
    return False


def _grad_check(rng, approach, reg):
    dim = int(rng.integers(2, 5))
    hidden = tuple(int(h) for h in rng.integers(2, 5, size=int(rng.integers(1, 3))))
    activation = ("relu", "tanh")[int(rng.integers(2))]
    models = {name: init_kaiming(EncoderConfig(dim, hidden, activation, int(rng.integers(2**31))))
              for name in approach.scorers}
    data = _random_batch(rng, dim)
    if _near_kink(approach, models, data, reg):
        return None
    names = sorted(models)
    sizes = [models[n].n_params for n in names]

    def unpack(flat):
        out, at = {}, 0
        for n, k in zip(names, sizes):
            out[n] = models[n].with_flat_params(flat[at:at + k])
            at += k
        return out

    flat = np.concatenate([models[n].flat_params() for n in names])
    _, grads = _objective(approach, models, data, reg, True)
    analytic = np.concatenate([grads[n].flat() for n in names])
    numeric = central_difference(lambda v: _objective(approach, unpack(v), data, reg, False)[0], flat, 1e-5)
    return relative_error(analytic, numeric)


def test_c2_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for name, (approach, reg) in LOSSES.items():
        errors = []
        while len(errors) < 100:
            err = _grad_check(rng, approach, reg)
            if err is not None:
                errors.append(err)
        worst[name] = max(errors)
    elapsed = time.perf_counter() - start
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(2, "finite-difference gradients, 100 configurations per loss", ok,
           f"worst relative error: {detail}; {elapsed:.1f}s")


# -- 3. spot values -----------------------------------------------------------

def test_c3_spot_values():
    form1 = float(predict_pair_form1(1.0, -1.0).y2_hat)
    equal = riskreg_loss(0.0, 0.0, 2.0)[0]
    ordered = riskreg_loss(-5.0, 5.0, 2.0)[0]
    model = init_kaiming(EncoderConfig(3, (4,), seed=0))
    traces = forward(model, [0.1, 0.2, 0.3]), forward(model, [0.3, -0.2, 0.1])
    total = total_regularized_loss(predict_baseline_pair(0.0, 0.0), PairLabels(0, 1), traces,
                                   RegConfig(RegKind.RISKREG, 2.0, 1.0)).loss
    ok = abs(form1 - 0.8033882) <= 1e-6 and equal == 2.0 and ordered == 0.0 and abs(total - 3.3862944) <= 1e-6
    report(3, "closed-form spot values", ok,
           f"form1(1,-1)={form1:.7f}, riskreg(0,0)={equal}, riskreg(-5,5)={ordered}, RiskReg total={total:.7f}")


# -- 4. metric oracles --------------------------------------------------------

def test_c4_metric_oracles():
    rng = np.random.default_rng(2)
    worst_roc = worst_ap = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[int(rng.integers(n))] ^= 1
        scores = rng.permutation(1000)[:n] / 1000.0
        worst_roc = max(worst_roc, abs(auroc(scores, labels) - pairwise_auroc(scores, labels)))
        worst_ap = max(worst_ap, abs(auprc(scores, labels) - enumerated_average_precision(list(scores), list(labels))))
    example = auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = worst_roc <= 1e-12 and worst_ap <= 1e-12 and example == 0.75
    report(4, "metric oracle equivalence, 1000 datasets", ok,
           f"max AUROC gap {worst_roc:.1e}, max AUPRC gap {worst_ap:.1e}, worked example {example}")


# -- 5. DeLong ----------------------------------------------------------------

def test_c5_delong():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    gaps, symmetric = [], True
    for _ in range(20):
        a, b, labels = exchangeable_pair_dataset(rng, 30)
        p = delong_test(a, b, labels)[2]
        symmetric &= p == delong_test(b, a, labels)[2]
        gaps.append(abs(p - permutation_p_value(a, b, labels, 100_000, rng)))
    identical = delong_test(a, a, labels)[2]
    elapsed = time.perf_counter() - start
    ok = max(gaps) <= 0.02 and identical == 1.0 and symmetric and elapsed < 120.0
    report(5, "DeLong against a 1e5-permutation oracle on 20 datasets", ok,
           f"max |p gap| {max(gaps):.4f}, identical p={identical}, symmetric={symmetric}, {elapsed:.1f}s")


# -- 6. split plans -----------------------------------------------------------

def _plain_knees(n, n_cases):
    out = []
    for j in range(n):
        subject = SubjectRecord(f"S{j:03d}", 60, "F", "A", 30.0, "case" if j < n_cases else "control")
        scan = ScanSample(f"S{j:03d}-L", 1, 0.0, np.zeros(2), 1, {h: 0 for h in HORIZONS})
        out.append(KneeRecord(subject, scan, None))
    return out


def test_c6_split_plans():
    knees = _plain_knees(100, 43)
    case_ids = {k.subject_id for k in knees if k.is_case}
    runs_ok = leak_free = balanced = True
    for seed in range(20):
        plan = build_split_plan(knees, seed)
        runs = list(plan.runs())
        runs_ok &= len(runs) == 42 and len({(o, i) for o, i, *_ in runs}) == 42
        for o, i, train, val, test in runs:
            parts = [set(train), set(val), set(test)]
            leak_free &= not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
            leak_free &= set().union(*parts) == {k.subject_id for k in knees}
        counts = [len(case_ids & set(f)) for f in plan.outer_folds]
        balanced &= max(counts) - min(counts) <= 1
    report(6, "split-plan audit over 100 subjects, 20 seeds", runs_ok and leak_free and balanced,
           f"42 runs={runs_ok}, leakage-free={leak_free}, case counts within 1={balanced}")


# -- 7. pipeline determinism --------------------------------------------------

def _pipeline(root, jobs):
    (root / "bundles").mkdir(parents=True, exist_ok=True)
    cfg = root / "run.cfg"
    cfg.write_text("seed = 11\nhorizon = 4\ncohort.n_subjects = 200\ncohort.feature_dim = 6\n"
                   "model.hidden_dims = [8]\noptim.epochs = 2\nbootstrap.n_resamples = 200\n"
                   f'paths.cohort_csv = "{root / "cohort.csv"}"\npaths.bundle_dir = "{root / "bundles"}"\n'
                   f'paths.report = "{root / "report.json"}"\n')
    common = ["--config", str(cfg), "--jobs", str(jobs)]
    codes = [main(["simulate", *common])]
    for approach in ("Baseline", "RiskFORM2"):
        codes.append(main(["train", *common, "--approach", approach]))
    codes.append(main(["evaluate", *common, "--approach", "RiskFORM2"]))
    return codes, (root / "cohort.csv").read_bytes(), (root / "report.json").read_bytes()


def test_c7_pipeline_determinism(tmp_path):
    # the same directory each time: the report embeds the configured paths
    runs = [_pipeline(tmp_path, jobs) for jobs in (1, 2, 1)]
    codes_ok = all(c == [0, 0, 0, 0] for c, _, _ in runs)
    csv_same = runs[0][1] == runs[1][1] == runs[2][1]
    report_same = runs[0][2] == runs[1][2] == runs[2][2]
    report(7, "simulate, train, evaluate determinism across runs and --jobs 1/2", codes_ok and csv_same and report_same,
           f"exit codes ok={codes_ok}, identical CSV={csv_same}, identical report={report_same}")


# -- 8. directional reproduction ----------------------------------------------

def test_c8_directional_reproduction():
    start = time.perf_counter()
    config = TrainConfig()
    pooled, cohort1 = {"Baseline": [], "RiskFORM2": []}, {"Baseline": [], "RiskFORM2": []}
    for seed in range(5):
        knees, _, _ = generate_knees(SimConfig(n_subjects=1000), seed)
        for approach in pooled:
            records = ensemble_predict(run_nested_cv(knees, approach, 1, config, seed), knees, "internal")
            pooled[approach].append(auroc(*records_to_arrays(records)))
            cohort1[approach].append(subgroup_report(records, ["Cohort1"])["Cohort1"].auroc)
    elapsed = time.perf_counter() - start
    base, rf2 = np.mean(pooled["Baseline"]), np.mean(pooled["RiskFORM2"])
    gap = np.mean(cohort1["RiskFORM2"]) - np.mean(cohort1["Baseline"])
    ok = rf2 >= base and gap > 0 and elapsed < 900.0
    report(8, "RiskFORM2 vs Baseline, 1-year internal, 1000 subjects x 5 seeds", ok,
           f"mean AUROC {rf2:.4f} vs {base:.4f}, Cohort1 gap {gap:+.4f}, {elapsed:.0f}s")


# -- 9. structural facts ------------------------------------------------------

def test_c9_structural_facts():
    set3_empty = nested = matched = True
    n_pairs = 0
    for seed in range(3):
        knees, match, _ = generate_knees(SimConfig(n_subjects=1000), seed)
        set3_empty &= all(k.group_per_horizon[1] is not Group.SET3 for k in knees)
        for k in knees:
            for scan in k.scans():
                y1, y2, y4 = (scan.labels[h] for h in HORIZONS)
                nested &= y1 <= y2 <= y4
        for case, control in match.pairs:
            n_pairs += 1
            matched &= (case.role, control.role) == ("case", "control")
            matched &= case.age == control.age and case.sex == control.sex and case.ethnicity == control.ethnicity
            matched &= abs(case.bmi - control.bmi) <= 0.10 * case.bmi
    report(9, "structural facts on 3 simulated cohorts", set3_empty and nested and matched,
           f"1-year Set3 empty={set3_empty}, nested labels={nested}, {n_pairs} pairs match={matched}")
