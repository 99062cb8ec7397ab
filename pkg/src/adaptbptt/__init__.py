"""Adaptively truncated backpropagation through time for recurrent networks."""

from .backprop import GradAccumulator, GradNormProfile, backward_sweep, bptt, grad_norm_profile
from .cells import HiddenStates, ModelParams, forward_window, init_model, load_checkpoint, save_checkpoint
from .numeric import SeededRng
from .tasks import BiasedLossOracle, CopyConfig, LabeledSequence, gen_copy, perplexity, run_biased_sgd
from .trainer import TrainConfig, TrainingDiverged, run_epoch, train
from .truncation import (BiasBoundTable, TruncationSelection, bias_bound_table, estimate_beta,
                         mean_profile, select_truncation, truncation_from_profile)

__version__ = "0.1.0"
