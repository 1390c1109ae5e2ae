"""Conventional sparse Bayesian learning with a pluggable shape-parameter tuner."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import NumericalError, ParameterError
from .tuners import FixedTuner, Tuner, make_tuner

AUTO_EPSILON0 = 1e-3
FIXED_ETA = 1e-4


@dataclass
class SblState:
    z: np.ndarray
    x_hat: np.ndarray
    gamma: np.ndarray
    epsilon: float
    eta: float
    beta: float
    iter: int = 0


@dataclass
class RecoveryResult:
    x_hat: np.ndarray
    epsilon_trace: List[float]
    iterations_run: int
    per_iteration_error: Optional[List[float]] = None
    beta_trace: List[float] = field(default_factory=list)

    @property
    def per_iteration_nmse(self) -> Optional[List[float]]:
        """Single-trial normalized error per iteration, in dB."""
        if self.per_iteration_error is None:
            return None
        return [to_db(e) for e in self.per_iteration_error]


def sbl_init(n: int, beta: float, epsilon0: float = AUTO_EPSILON0, eta0: float = 0.0) -> SblState:
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if not beta > 0:
        raise ParameterError(f"noise precision must be positive, got {beta}")
    if not epsilon0 > -0.5:
        raise ParameterError(f"epsilon0 must exceed -0.5, got {epsilon0}")
    if eta0 < 0:
        raise ParameterError(f"eta0 must be non-negative, got {eta0}")
    return SblState(z=np.eye(n), x_hat=np.zeros(n), gamma=np.ones(n),
                    epsilon=float(epsilon0), eta=float(eta0), beta=float(beta))


def posterior(a, y, gamma, beta, iteration=None):
    """Gaussian posterior covariance and mean of ``x`` given precisions ``gamma``."""
    precision = beta * (a.T @ a)
    precision[np.diag_indices_from(precision)] += gamma
    try:
        factor = cho_factor(precision, lower=True, check_finite=True)
        z = cho_solve(factor, np.eye(len(gamma)))
    except (LinAlgError, ValueError) as exc:
        raise NumericalError(f"posterior precision not positive definite: {exc}",
                             iteration=iteration) from None
    z = 0.5 * (z + z.T)
    return z, beta * (z @ (a.T @ y))


def sbl_iterate(state: SblState, a: np.ndarray, y: np.ndarray, tuner: Tuner) -> SblState:
    """One covariance / mean / precision update followed by the tuner call.

    The precision update uses the incoming epsilon; the tuner output is the
    epsilon consumed by the next iteration.
    """
    if a.shape != (len(y), len(state.gamma)):
        raise ParameterError(f"A has shape {a.shape}, expected {(len(y), len(state.gamma))}")
    it = state.iter + 1
    z, x_hat = posterior(a, y, state.gamma, state.beta, iteration=it)
    gamma = (2.0 * state.epsilon + 1.0) / (2.0 * state.eta + x_hat ** 2 + np.diag(z))
    if not np.all(np.isfinite(gamma)) or np.any(gamma <= 0):
        raise NumericalError("precision update left the positive reals", iteration=it)
    epsilon = float(tuner(gamma))
    return replace(state, z=z, x_hat=x_hat, gamma=gamma, epsilon=epsilon, iter=it)


DB_FLOOR = -120.0


def to_db(value: float) -> float:
    """``10 log10(value)`` floored at -120 dB so zero error stays numeric."""
    if value <= 10.0 ** (DB_FLOOR / 10.0):
        return DB_FLOOR
    return float(10.0 * np.log10(value))


def normalized_error(x_hat, x_true):
    return float(np.sum((x_hat - x_true) ** 2) / np.sum(x_true ** 2))


def sbl_run(instance, tuner="empirical", iters: int = 50, eta: Optional[float] = None,
            beta: Optional[float] = None, track_nmse: bool = True) -> RecoveryResult:
    """Run SBL for a fixed number of iterations on a ProblemInstance.

    The fixed tuner starts from its own epsilon with ``eta = 1e-4``; auto-tuners
    start from ``epsilon = 1e-3`` with ``eta = 0`` unless ``eta`` is given.
    """
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    tuner = make_tuner(tuner)
    if eta is None:
        eta = FIXED_ETA if isinstance(tuner, FixedTuner) else 0.0
    beta = instance.beta_true if beta is None else beta
    state = sbl_init(instance.n, beta, tuner.initial_epsilon(AUTO_EPSILON0), eta)
    eps_trace, nmse_trace = [], []
    has_truth = track_nmse and instance.x_true is not None and np.any(instance.x_true)
    for _ in range(iters):
        state = sbl_iterate(state, instance.a, instance.y, tuner)
        eps_trace.append(state.epsilon)
        if has_truth:
            nmse_trace.append(normalized_error(state.x_hat, instance.x_true))
    return RecoveryResult(state.x_hat, eps_trace, iters, nmse_trace if has_truth else None)
