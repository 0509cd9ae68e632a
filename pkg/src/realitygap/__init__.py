"""Continuous sim-to-real calibration of a truss digital twin.

Planar truss solver, a small numpy neural substrate, a frozen neural
surrogate, domain-adversarial context inference with a physics loss, and the
reality-gap loop (detection, recalibration, gated repository growth).
"""
from .errors import *  # noqa: F401,F403
from .truss import (CONTEXT_NAMES, ContextRanges, ContextVector, NoiseSpec, SensorVector, TrussModel,
                    measure_real, pratt_truss, solve, solve_many, two_bar_truss)
from .rom import ReducedOrderSimulator, RomConfig, physics_loss, pretrain_rom
from .adaptation import (AdaptationConfig, ContextInferenceModel, TrainingCorpus, fine_tune,
                         infer_context, infer_contexts, train_initial)
from .repository import Repository, RepositoryRecord
from .rga import (GapWindow, RgaConfig, RgaMonitor, SyncState, compute_gap, gate_repository_insert,
                  initialize, step, trigger_recalibration)
from .harness import (DriftSpec, ExperimentPlan, MetricReport, build_dataset, compute_error_metric,
                      compute_rg_metric, report, run_loi, run_seed)

__version__ = "0.1.0"
