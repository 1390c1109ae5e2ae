"""Sparse Bayesian learning with automatic shape-parameter tuning.

Conventional SBL and UAMP-SBL recover a sparse ``x`` from ``y = A x + w``;
each iteration a tuner maps the current precision vector to the Gamma-prior
shape parameter.  Tuners: fixed, closed-form empirical, and a small neural
network trained by unrolling UAMP-SBL.
"""

from .bench import ExperimentSpec, ResultTable, emit_csv, nmse, oracle_bound, run_experiment
from .errors import (
    DegenerateSpecError,
    DimensionError,
    DomainError,
    FormatError,
    NumericalError,
    ParameterError,
    SBLError,
    TapeError,
    TrainingError,
    ZeroSignalError,
)
from .estimators import NeuralTunerLearner, SBLRegressor, UAMPSBLRegressor
from .problem import (
    Dataset,
    DatasetSpec,
    MatrixKind,
    ProblemInstance,
    gen_dataset,
    gen_instance,
    load_dataset,
    save_dataset,
)
from .sbl import RecoveryResult, sbl_run
from .tuners import (
    EmpiricalTuner,
    FixedTuner,
    NeuralTuner,
    NnTunerParams,
    empirical_epsilon,
    jensen_radicand,
    load_params,
    load_tuner,
    make_tuner,
    nn_epsilon,
    save_params,
)
from .uamp import uamp_sbl_run, unitary_transform
from .unroll import TrainConfig, grad_check, loss_and_grad, train, unrolled_backward, unrolled_forward

__version__ = "0.1.0"
