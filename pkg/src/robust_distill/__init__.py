"""Robust dataset distillation by matching EMA-smoothed adversarial expert trajectories."""

from .attacks import AttackConfig, AttackError, attack, fgsm, pgd
from .data import RawDataset, gen_blobs, import_directory, load_raw, save_raw
from .distiller import (DegenerateSegmentError, MatchConfig, StudentDivergedError,
                        SyntheticDataset, att_select, distill, distill_step, init_synthetic,
                        load_synthetic, match_loss, meta_gradient, save_synthetic,
                        student_unroll)
from .evaluation import EvalConfig, EvalError, EvalReport, evaluate, natural_train, run_eval
from .expert import (ATLossVariant, TrainingDivergedError, TrajectoryBuffer, at_loss,
                     ema_update, load_buffer, save_buffer, train_expert, weight_variance)
from .fileio import (BadMagicError, FormatError, LayoutMismatchError, TruncatedPayloadError,
                     UnsupportedVersionError)
from .models import ModelSpec, ParamVector, SpecError, forward, init_model

__version__ = "0.1.0"
