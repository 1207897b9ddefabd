"""Subset-based EHR rewriting to improve a text-level clinical predictor."""
from .config import RunConfig, small_config
from .ehr import FeatureCatalog, PatientEHR, Rewrite, verbalize
from .experiment import Experiment, ablation_run

__all__ = ["RunConfig", "small_config", "FeatureCatalog", "PatientEHR", "Rewrite", "verbalize", "Experiment",
           "ablation_run"]
