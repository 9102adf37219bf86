# %% [markdown]
# # Nested cross-validation and ensembles
#
# Subjects are split into 7 outer folds stratified on case status. For each
# outer fold the remaining subjects are split 6 ways into train and
# validation, giving 42 trained models. Internal evaluation routes each knee
# only through the 6 models that never saw it. This small run uses a reduced
# network and few epochs so it finishes in seconds.

# %%
from progrisk import SimConfig, TrainConfig, auroc, ensemble_predict, generate_knees, run_nested_cv
from progrisk.cvharness import leakage_free, subgroup_report
from progrisk.metrics import records_to_arrays

# %%
knees, _, _ = generate_knees(SimConfig(n_subjects=400, feature_dim=8), seed=1)
config = TrainConfig(hidden_dims=(16,), epochs=10)
for approach in ("Baseline", "RiskFORM2"):
    bundle = run_nested_cv(knees, approach, horizon=1, config=config, seed=1)
    records = ensemble_predict(bundle, knees, scope="internal")
    cohorts = subgroup_report(records)
    print(f"{approach:10s} members={len(bundle.members)} leakage-free={leakage_free(records, bundle)} "
          f"AUROC={auroc(*records_to_arrays(records)):.3f} Cohort1={cohorts['Cohort1'].auroc:.3f}")
