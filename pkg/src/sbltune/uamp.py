"""UAMP-SBL: SBL driven by unitary approximate message passing.

The step functions broadcast over leading batch axes, so one code path serves
a single instance (``phi`` of shape ``(M, N)``) and a stacked training batch
(``(B, M, N)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ParameterError
from .sbl import RecoveryResult, normalized_error
from .tuners import Tuner, make_tuner

INIT_EPSILON = 1e-3
_TINY = 1e-300


@dataclass
class UnitaryModel:
    phi: np.ndarray
    r: np.ndarray
    lambda_vec: np.ndarray

    @property
    def m(self):
        return self.phi.shape[-2]

    @property
    def n(self):
        return self.phi.shape[-1]


@dataclass
class UampState:
    tau_x: np.ndarray
    x_hat: np.ndarray
    s: np.ndarray
    beta_hat: np.ndarray
    gamma_hat: np.ndarray
    epsilon: np.ndarray
    iter: int = 0
    scratch: dict = field(default_factory=dict)


def unitary_transform(a, y) -> UnitaryModel:
    """Rotate ``y = A x + w`` by the left singular vectors of ``A``."""
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.any(a):
        raise ParameterError("measurement matrix is identically zero")
    try:
        u, sv, _ = np.linalg.svd(a, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from None
    ut = np.swapaxes(u, -1, -2)
    m = a.shape[-2]
    lam = np.zeros(a.shape[:-2] + (m,))
    k = sv.shape[-1]
    lam[..., :k] = sv ** 2
    return UnitaryModel(phi=ut @ a, r=np.einsum("...ij,...j->...i", ut, y), lambda_vec=lam)


def uamp_init(n: int, m: int, batch_shape=(), epsilon0: float = INIT_EPSILON) -> UampState:
    shape = tuple(batch_shape)
    return UampState(
        tau_x=np.ones(shape), x_hat=np.zeros(shape + (n,)), s=np.zeros(shape + (m,)),
        beta_hat=np.ones(shape), gamma_hat=np.ones(shape + (n,)),
        epsilon=np.full(shape, float(epsilon0)),
    )


def _matvec(mat, vec):
    return np.einsum("...ij,...j->...i", mat, vec)


def _rmatvec(mat, vec):
    return np.einsum("...ij,...i->...j", mat, vec)


def _checked(value, line, iteration):
    if not np.all(np.isfinite(value)):
        raise NumericalError("non-finite intermediate", iteration=iteration, line=line)
    return value


def _denominator(value, line, iteration):
    if np.any(np.abs(value) < _TINY) or not np.all(np.isfinite(value)):
        raise NumericalError("vanishing or non-finite denominator", iteration=iteration, line=line)
    return value


def message_passing(state: UampState, model: UnitaryModel) -> dict:
    """Lines 1-12 of one UAMP-SBL iteration (everything except the tuner).

    Returns every intermediate, including the denominators needed to
    differentiate the step.
    """
    it = state.iter + 1
    lam, r, phi = model.lambda_vec, model.r, model.phi
    n = phi.shape[-1]
    m = phi.shape[-2]
    beta = np.asarray(state.beta_hat)
    tau_x = np.asarray(state.tau_x)

    tau_p = _checked(tau_x[..., None] * lam, 1, it)
    p = _checked(_matvec(phi, state.x_hat) - tau_p * state.s, 2, it)
    den_h = _denominator(1.0 + beta[..., None] * tau_p, 3, it)
    v_h = _checked(tau_p / den_h, 3, it)
    h = _checked((beta[..., None] * tau_p * r + p) / den_h, 4, it)
    resid = r - h
    quad = _denominator(np.sum(resid ** 2, axis=-1) + np.sum(v_h, axis=-1), 5, it)
    beta_new = _checked(m / quad, 5, it)
    den_s = _denominator(tau_p + 1.0 / beta_new[..., None], 6, it)
    tau_s = _checked(1.0 / den_s, 6, it)
    s = _checked(tau_s * (r - p), 7, it)
    lam_tau_s = _denominator(np.sum(lam * tau_s, axis=-1), 8, it)
    tau_q = _checked(n / lam_tau_s, 8, it)
    phit_s = _rmatvec(phi, s)
    q = _checked(state.x_hat + tau_q[..., None] * phit_s, 9, it)
    den_x = _denominator(1.0 + tau_q[..., None] * state.gamma_hat, 10, it)
    shrink = 1.0 / den_x
    tau_x_new = _checked(tau_q / n * np.sum(shrink, axis=-1), 10, it)
    x_hat = _checked(q * shrink, 11, it)
    den_g = _denominator(x_hat ** 2 + tau_x_new[..., None], 12, it)
    gamma = _checked((2.0 * np.asarray(state.epsilon)[..., None] + 1.0) / den_g, 12, it)
    if np.any(gamma <= 0):
        raise NumericalError("precision left the positive reals", iteration=it, line=12)
    return {
        "tau_p": tau_p, "p": p, "den_h": den_h, "v_h": v_h, "h": h, "beta_hat": beta_new,
        "tau_s": tau_s, "s": s, "tau_q": tau_q, "phit_s": phit_s, "q": q, "shrink": shrink,
        "tau_x": tau_x_new, "x_hat": x_hat, "den_g": den_g, "gamma_hat": gamma,
    }


def advance(state: UampState, lines: dict, epsilon) -> UampState:
    """New state from a message-passing result and the tuner's epsilon."""
    return UampState(
        tau_x=lines["tau_x"], x_hat=lines["x_hat"], s=lines["s"], beta_hat=lines["beta_hat"],
        gamma_hat=lines["gamma_hat"], epsilon=np.asarray(epsilon),
        iter=state.iter + 1, scratch=lines,
    )


def uamp_sbl_iterate(state: UampState, model: UnitaryModel, tuner: Tuner) -> UampState:
    lines = message_passing(state, model)
    epsilon = np.asarray(tuner(lines["gamma_hat"]), dtype=np.float64)
    if not np.all(np.isfinite(epsilon)):
        raise NumericalError("tuner returned a non-finite epsilon", iteration=state.iter + 1, line=13)
    return advance(state, lines, epsilon)


def uamp_sbl_run(instance, tuner="empirical", iters: int = 50, track_nmse: bool = True) -> RecoveryResult:
    """UAMP-SBL from the standard initialization for ``iters`` iterations."""
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    tuner = make_tuner(tuner)
    model = unitary_transform(instance.a, instance.y)
    state = uamp_init(model.n, model.m)
    x_true = getattr(instance, "x_true", None)
    has_truth = track_nmse and x_true is not None and np.any(x_true)
    eps_trace, beta_trace, errors = [], [], []
    for _ in range(iters):
        state = uamp_sbl_iterate(state, model, tuner)
        eps_trace.append(float(state.epsilon))
        beta_trace.append(float(state.beta_hat))
        if has_truth:
            errors.append(normalized_error(state.x_hat, x_true))
    return RecoveryResult(state.x_hat, eps_trace, iters, errors if has_truth else None, beta_trace)
