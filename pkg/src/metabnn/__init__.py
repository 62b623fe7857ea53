"""Continual learning for binarized neural networks via hidden-weight
consolidation, with an exhaustively-checkable binary quadratic testbed,
an EWC baseline, and a reproducible experiment harness."""

from .backend import active_backend, available_backends, set_backend
from .binquad import (QuadraticProblem, Trajectory, brute_force_optimum,
                      corner_loss, divergence_importance_report,
                      flip_importance, flip_importance_all,
                      flip_importance_closed, random_problem, run_dynamics)
from .data import (LabeledDataset, StreamSplit, TaskView, fetch_dataset,
                   load_dataset, make_permuted_task, make_stream_splits,
                   parse_idx)
from .ewc import (TaskAnchor, consolidate_task, ewc_penalty_grad,
                  ewc_penalty_value, fisher_diagonal)
from .experiments import (ExperimentConfig, MetricsRecord, emit_report,
                          run_flip_importance, run_permuted, run_stream,
                          run_toy)
from .meta import MetaConfig, TrainState, f_meta, metaplastic_step, train_step
from .nn import (AdamState, BinaryLinearLayer, BnnModel, NumericError,
                 adam_direction, backward, binarize, evaluate, forward,
                 softmax_cross_entropy)

__version__ = "0.1.0"
