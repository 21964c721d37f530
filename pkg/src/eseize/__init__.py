"""Desk-scale laboratory for early-training interventions and
out-of-distribution generalization under covariate shift."""

from .data import CorruptionSpec, Dataset, corrupt, load_idx, make_synthetic, ood_suite
from .detector import (DetectionResult, DetectorConfig, find_rapid_change_end,
                       find_stabilization_by_mean, moving_average, normalize,
                       select_khat)
from .harness import ExperimentConfig, autorun, evaluate, run_training, sweep_k
from .interventions import (FisherPenaltyConfig, UnfreezeSchedule, WarmupSchedule,
                            fisher_penalty_grad, lr_at, trainable_set)
from .metrics import (GsRecord, MetricRecord, SharpnessConfig, feature_rank,
                      grad_similarity, sharpness_avg, sharpness_worst, trace_fisher)
from .nn import Model, ParamBlock, load_checkpoint, loss_and_grad, save_checkpoint
from .optim import OptimizerState, optimizer_step
from .rng import PrngStreams

__version__ = "0.1.0"
