"""Teacher networks that learn to supervise spoof-cue detectors, trained by
bi-level optimization on a tape autodiff core, with a synthetic corpus,
biometric metrics and a reproducible CLI."""

from .autodiff import (AutodiffError, NonFiniteError, ShapeError, Tape, Tensor,
                       Var, WeightBundle, finite_diff_check, grad, jvp, vjp)
from .networks import (LayerDesc, NetworkSpec, SupervisionMap, TeacherState,
                       baseline_teacher_output, build_backbone, forward,
                       init_weights, make_spec, normalized_supervision,
                       teacher_forward)
from .meta_trainer import (Adam, MetaIterationTrace, MetaTrainer,
                           NonFiniteLossError, TrainConfig, momentum_update,
                           sample_batches, train_detector)
from .synth_data import (ATTACK_TYPES, DataError, Dataset, ProtocolSplit,
                         Sample, generate_dataset, leave_one_attack_out,
                         load_dataset, save_dataset)
from .metrics import (MetricsError, MetricsReport, ScoreSet, auc, classify,
                      eer, error_rates, hter, score)

__version__ = "0.1.0"
