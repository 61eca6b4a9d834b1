"""Canary crafting and one-run privacy auditing for desk-scale models."""

__version__ = "0.1.0"

from .data import CLASSIFICATION, REGRESSION, Dataset, Sample, ingest_csv, synth_blobs, synth_linear_gaussian
from .models import LinearArch, LogisticArch, MlpArch, Model, fit_erm
from .training import DPConfig, TrainConfig, clip, dp_sgd_step, train
from .accounting import accountant_epsilon, calibrate_sigma
from .influence import InfluenceConfig, InfluenceEngine, InfluenceMatrix, greedy_select, influence_pair, inverse_hvp, objective_f
from .bilevel import BilevelConfig, CanarySet, hypergradient_exact, ibis_run, regularizer, soba_step, warm_start
from .audit import AuditResult, draw_membership, epsilon_lower_bound, gdp_estimate, run_audit, tpr_at_fpr
from .lstsq import Canary, LeastSquaresInstance, interference_gap, rank_one_update
