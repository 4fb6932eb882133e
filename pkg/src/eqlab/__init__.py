"""Equalization-loss laboratory for long-tailed classification."""

from .freqstats import (
    FrequencyTable,
    GroupAssignment,
    ThresholdFn,
    assign_groups,
    build_frequency_table,
    eval_threshold_fn,
    exponential_decay,
    gompertz_decay,
    hard_threshold,
    lambda_for_tail_ratio,
    tail_ratio,
    threshold_indicator,
)
from .losses import (
    BACKGROUND,
    Labels,
    LossResult,
    LossSpec,
    SampleLabel,
    class_balanced_loss,
    compute_loss,
    eql_loss,
    eql_weights,
    focal_loss,
    seql_loss,
    sigmoid_ce,
    softmax_ce,
)

__version__ = "0.1.0"
