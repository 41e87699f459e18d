"""Staggered doubly robust event studies and DML difference-in-differences for claims panels."""

from __future__ import annotations

__version__ = "0.1.0"

from ._backend import BACKEND
from .did import DidConfig, EventStudyCurve, aggregate_event_study, att_gt_all, att_gt_dr, estimate_event_study
from .dml import DidSample, DmlConfig, MotherTable, build_did_sample, dml_atet, linear_did
from .forest import ForestConfig, fit_forest, grid_tune
from .inference import coverage_study, multiplier_bootstrap
from .learners import fit_logit, fit_ols, kfold_split
from .panel import ClaimRecord, ClaimTable, Panel, UnitMeta, build_panel, smooth_prescriptions
from .simgen import DgpConfig, TrueEffectProfile, monte_carlo_run, simulate_panel, true_event_effects

__all__ = [
    "BACKEND", "ClaimRecord", "ClaimTable", "DgpConfig", "DidConfig", "DidSample", "DmlConfig",
    "EventStudyCurve", "ForestConfig", "MotherTable", "Panel", "TrueEffectProfile", "UnitMeta",
    "aggregate_event_study", "att_gt_all", "att_gt_dr", "build_did_sample", "build_panel", "coverage_study",
    "dml_atet", "estimate_event_study", "fit_forest", "fit_logit", "fit_ols", "grid_tune", "kfold_split",
    "linear_did", "monte_carlo_run", "multiplier_bootstrap", "simulate_panel", "smooth_prescriptions",
    "true_event_effects",
]
