# %% [markdown]
# # Scan-level metrics
#
# AUROC counts ties as one half. AUPRC is average precision with tied
# scores treated as one threshold. Intervals come from a percentile
# bootstrap over scans. DeLong's test compares two AUROCs measured on the
# same scans.

# %%
import numpy as np

from progrisk import auprc, auroc, bootstrap_ci, delong_test, metric_report

# %%
print("worked example AUROC:", auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]))
print("AUPRC, positive ranked last:", auprc([0.9, 0.1], [0, 1]))

# %%
rng = np.random.default_rng(0)
labels = rng.integers(0, 2, 300)
strong = rng.normal(size=300) + 1.5 * labels
weak = rng.normal(size=300) + 0.5 * labels
print("strong AUROC 95% CI:", bootstrap_ci(strong, labels, "auroc", 2000, seed=1))
a, b, p = delong_test(strong, weak, labels)
print(f"DeLong: {a:.3f} vs {b:.3f}, p = {p:.2e}")
print("identical inputs p:", delong_test(strong, strong, labels)[2])

# %% [markdown]
# When a subgroup holds a single class the report is absent with a reason,
# rather than a made-up number.

# %%
print(metric_report([0.2, 0.7], [1, 1], n_resamples=0))
