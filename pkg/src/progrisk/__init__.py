"""Monotone progression-risk models for paired knee scans on simulated cohorts."""

from .cohortgen import SimConfig, generate_knees, read_cohort_csv, write_cohort_csv
from .config import ConfigError, RunConfig, load_config
from .cvharness import (AnalyticalCohort, Approach, TrainConfig, build_split_plan, ensemble_predict, klg_report,
                        run_nested_cv, subgroup_report)
from .gradnet import EncoderConfig, EncoderModel, backward, forward, init_kaiming
from .metrics import auprc, auroc, bootstrap_ci, delong_test, metric_report
from .regularizers import RegConfig, RegKind, contrastive_loss, riskreg_loss
from .riskform import Formulation, predict_pair, predict_pair_form1, predict_pair_form2

__version__ = "0.1.0"

__all__ = [
    "AnalyticalCohort", "Approach", "ConfigError", "EncoderConfig", "EncoderModel", "Formulation", "RegConfig",
    "RegKind", "RunConfig", "SimConfig", "TrainConfig", "auprc", "auroc", "backward", "bootstrap_ci",
    "build_split_plan", "contrastive_loss", "delong_test", "ensemble_predict", "forward", "generate_knees",
    "init_kaiming", "klg_report", "load_config", "metric_report", "predict_pair", "predict_pair_form1",
    "predict_pair_form2", "read_cohort_csv", "riskreg_loss", "run_nested_cv", "subgroup_report",
    "write_cohort_csv",
]
