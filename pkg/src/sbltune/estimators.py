"""scikit-learn style wrappers around the recovery algorithms and tuner training.

A recovery problem ``y = A x + w`` maps onto the estimator API with the
measurement matrix as the design matrix: ``fit(A, y)`` recovers ``coef_``
(the sparse signal) and ``predict(A)`` returns ``A @ coef_``.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ParameterError
from .sbl import sbl_run
from .tuners import DEFAULT_TRANSFORM, NeuralTuner, make_tuner
from .uamp import uamp_sbl_run
from .unroll import TrainConfig, train


class _RecoveryMixin(RegressorMixin):
    _runner = None

    def _check(self, a, y):
        a, y = check_X_y(a, y, dtype=np.float64, y_numeric=True)
        if self.n_iter < 1:
            raise ParameterError(f"n_iter must be >= 1, got {self.n_iter}")
        return a, y

    def _store(self, result, n):
        self.coef_ = result.x_hat
        self.epsilon_trace_ = np.asarray(result.epsilon_trace)
        self.beta_trace_ = np.asarray(result.beta_trace)
        self.n_iter_ = result.iterations_run
        self.n_features_in_ = n
        return self

    def predict(self, a):
        check_is_fitted(self, "coef_")
        a = check_array(a, dtype=np.float64)
        if a.shape[1] != self.n_features_in_:
            raise ParameterError(f"A has {a.shape[1]} columns, fitted with {self.n_features_in_}")
        return a @ self.coef_


class SBLRegressor(_RecoveryMixin, BaseEstimator):
    """Conventional SBL with known noise precision.

    Parameters
    ----------
    tuner : str or Tuner
        ``'empirical'``, ``'fixed:<eps>'``, ``'neural:<path>'`` or a Tuner.
    n_iter : int
        Number of iterations.
    noise_precision : float
        The noise precision ``beta``; SBL treats it as known.
    eta : float or None
        Gamma rate parameter; ``None`` picks 1e-4 for a fixed tuner, 0 otherwise.
    """

    def __init__(self, tuner="empirical", n_iter=50, noise_precision=None, eta=None):
        self.tuner = tuner
        self.n_iter = n_iter
        self.noise_precision = noise_precision
        self.eta = eta

    def fit(self, A, y):
        a, y = self._check(A, y)
        if self.noise_precision is None or not self.noise_precision > 0:
            raise ParameterError("SBLRegressor needs a positive noise_precision")
        problem = SimpleNamespace(a=a, y=y, n=a.shape[1], beta_true=float(self.noise_precision),
                                  x_true=None)
        result = sbl_run(problem, make_tuner(self.tuner), self.n_iter, eta=self.eta, track_nmse=False)
        return self._store(result, a.shape[1])


class UAMPSBLRegressor(_RecoveryMixin, BaseEstimator):
    """UAMP-SBL; the noise precision is estimated alongside the signal.

    After fitting, ``beta_trace_[-1]`` is the final noise-precision estimate.
    """

    def __init__(self, tuner="empirical", n_iter=50):
        self.tuner = tuner
        self.n_iter = n_iter

    def fit(self, A, y):
        a, y = self._check(A, y)
        problem = SimpleNamespace(a=a, y=y, x_true=None)
        result = uamp_sbl_run(problem, make_tuner(self.tuner), self.n_iter, track_nmse=False)
        return self._store(result, a.shape[1])


class NeuralTunerLearner(BaseEstimator):
    """Train the neural tuner by unrolled UAMP-SBL; ``fit`` takes a Dataset.

    The fitted ``tuner_`` plugs into either regressor via ``tuner=``.
    """

    def __init__(self, unroll_iters=50, batch_size=32, epochs=150, learning_rate=0.01,
                 l_hidden=256, clamp_low=0.0, input_transform=DEFAULT_TRANSFORM,
                 output_map="clamp", input_scale=None, random_state=0):
        self.unroll_iters = unroll_iters
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l_hidden = l_hidden
        self.clamp_low = clamp_low
        self.input_transform = input_transform
        self.output_map = output_map
        self.input_scale = input_scale
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            unroll_iters=self.unroll_iters, batch_size=self.batch_size, epochs=self.epochs,
            learning_rate=self.learning_rate, l_hidden=self.l_hidden, clamp_low=self.clamp_low,
            input_transform=self.input_transform, output_map=self.output_map,
            input_scale=self.input_scale, seed=int(self.random_state or 0),
        )

    def fit(self, dataset, y=None):
        config = self._config()
        self.params_, self.history_ = train(dataset, config)
        self.tuner_ = NeuralTuner(self.params_, config.clamp_low, transform=config.input_transform,
                                  output=config.output_map, input_scale=config.input_scale)
        return self
