"""Learning the neural tuner by unrolling UAMP-SBL.

Each UAMP-SBL iteration is one layer; every layer ends with the same tuner
network, so the parameter gradient is the sum of the per-layer partials.
The reverse pass below is written out by hand, line by line, against the
forward in :mod:`sbltune.uamp`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import NumericalError, ParameterError, TapeError, TrainingError
from .problem import ProblemInstance
from .tuners import (
    DEFAULT_HIDDEN,
    DEFAULT_TRANSFORM,
    INPUT_TRANSFORMS,
    NN_INPUT_CLIP,
    OUTPUT_MAPS,
    NnTunerParams,
    nn_backward,
    nn_forward,
    save_params,
    write_sidecar,
)
from .uamp import (
    UampState,
    UnitaryModel,
    _matvec,
    _rmatvec,
    advance,
    message_passing,
    uamp_init,
    unitary_transform,
)

logger = logging.getLogger(__name__)

# stacked unitary models above this many bytes are rebuilt per batch instead of cached
_MODEL_CACHE_BYTES = 512 * 2**20


@dataclass
class GradientTape:
    model: UnitaryModel
    states: List[UampState]
    nn_caches: List[dict]
    iters: int
    clamp_low: float = 0.0

    @property
    def x_hat(self):
        return self.states[-1].x_hat


@dataclass
class GradientBundle:
    dw: np.ndarray
    db: np.ndarray
    dalpha: np.ndarray
    dd: float

    @classmethod
    def zeros_like(cls, params: NnTunerParams) -> "GradientBundle":
        return cls(np.zeros_like(params.w), np.zeros_like(params.b), np.zeros_like(params.alpha), 0.0)

    @classmethod
    def from_dict(cls, grads) -> "GradientBundle":
        return cls(grads["w"], grads["b"], grads["alpha"], float(grads["d"]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.dw.ravel(), self.db, self.dalpha, [self.dd]])

    def __add__(self, other):
        return GradientBundle(self.dw + other.dw, self.db + other.db,
                              self.dalpha + other.dalpha, self.dd + other.dd)

    def scaled(self, factor):
        return GradientBundle(self.dw * factor, self.db * factor, self.dalpha * factor, self.dd * factor)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.to_vector())))


def _zero_grads(params):
    return {"w": np.zeros_like(params.w), "b": np.zeros_like(params.b),
            "alpha": np.zeros_like(params.alpha), "d": 0.0}


def mse_loss(x_hat_batch, x_true_batch) -> float:
    """Batch mean of squared Euclidean errors."""
    x_hat_batch = np.asarray(x_hat_batch, dtype=np.float64)
    x_true_batch = np.asarray(x_true_batch, dtype=np.float64)
    if x_hat_batch.size == 0 or len(x_hat_batch) == 0:
        raise ParameterError("empty batch")
    if x_hat_batch.shape != x_true_batch.shape:
        raise ParameterError(f"shape mismatch {x_hat_batch.shape} vs {x_true_batch.shape}")
    if x_hat_batch.ndim == 1:
        return float(np.sum((x_hat_batch - x_true_batch) ** 2))
    return float(np.mean(np.sum((x_hat_batch - x_true_batch) ** 2, axis=-1)))


def init_params(n: int, l_hidden: int = DEFAULT_HIDDEN, rng=None) -> NnTunerParams:
    """Glorot-uniform weights and zero biases."""
    if n < 1 or l_hidden < 1:
        raise ParameterError(f"n and l_hidden must be >= 1, got {n}, {l_hidden}")
    rng = np.random.default_rng(rng)
    w_bound = np.sqrt(6.0 / (n + l_hidden))
    a_bound = np.sqrt(6.0 / (l_hidden + 1))
    w = rng.uniform(-w_bound, w_bound, size=(l_hidden, n))
    alpha = rng.uniform(-a_bound, a_bound, size=l_hidden)
    return NnTunerParams(w, np.zeros(l_hidden), alpha, 0.0)


def stack_models(instances: Sequence[ProblemInstance]) -> UnitaryModel:
    a = np.stack([inst.a for inst in instances])
    y = np.stack([inst.y for inst in instances])
    return unitary_transform(a, y)


def _as_model(source):
    if isinstance(source, UnitaryModel):
        return source
    if isinstance(source, ProblemInstance):
        return unitary_transform(source.a, source.y)
    return stack_models(source)


def unrolled_forward(source, params: NnTunerParams, iters: int, clamp_low: float = 0.0,
                     clip=NN_INPUT_CLIP, record: bool = True, transform: str = DEFAULT_TRANSFORM,
                     output: str = "clamp", input_scale=None):
    """Run ``iters`` layers with the neural tuner; return ``(x_hat, tape)``.

    ``source`` is a ProblemInstance, a list of instances (batched along the
    first axis) or a prepared UnitaryModel.
    """
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    model = _as_model(source)
    if model.n != params.n_input:
        raise ParameterError(f"problem has N={model.n}, tuner expects N={params.n_input}")
    state = uamp_init(model.n, model.m, model.phi.shape[:-2])
    states, caches = [state], []
    for _ in range(iters):
        lines = message_passing(state, model)
        eps, cache = nn_forward(params, lines["gamma_hat"], clamp_low, clip, transform, output, input_scale)
        state = advance(state, lines, eps)
        if record:
            states.append(state)
            caches.append(cache)
    if not record:
        return state.x_hat, None
    return state.x_hat, GradientTape(model, states, caches, iters, clamp_low)


def unrolled_backward(tape: GradientTape, x_true, params: NnTunerParams, per_layer: bool = False):
    """Reverse-mode gradient of :func:`mse_loss` w.r.t. the tied tuner weights.

    For a batched tape the result is the gradient of the batch-mean loss.
    With ``per_layer=True`` a list of per-layer bundles (layer 1 first) is
    returned instead of their sum.
    """
    if tape is None or len(tape.states) != tape.iters + 1 or len(tape.nn_caches) != tape.iters:
        raise TapeError("tape is incomplete")
    model = tape.model
    phi, r, lam = model.phi, model.r, model.lambda_vec
    m, n = model.m, model.n
    x_true = np.asarray(x_true, dtype=np.float64)
    x_hat = tape.states[-1].x_hat
    if x_true.shape != x_hat.shape:
        raise TapeError(f"x_true shape {x_true.shape} does not match tape output {x_hat.shape}")
    batch = x_hat.shape[0] if x_hat.ndim == 2 else 1

    g_x = 2.0 * (x_hat - x_true) / batch
    g_tau_x = np.zeros(x_hat.shape[:-1])
    g_s = np.zeros_like(tape.states[-1].s)
    g_beta = np.zeros(x_hat.shape[:-1])
    g_gamma = np.zeros_like(x_hat)
    g_eps = np.zeros(x_hat.shape[:-1])

    layer_grads = []
    total = _zero_grads(params)
    for i in range(tape.iters, 0, -1):
        prev = tape.states[i - 1]
        lines = tape.states[i].scratch
        grads = _zero_grads(params) if per_layer else total

        # tuner: eps_i = NN(gamma_i)
        g_gamma = g_gamma + nn_backward(params, tape.nn_caches[i - 1], g_eps, grads)
        if per_layer:
            layer_grads.append(GradientBundle.from_dict(grads))

        # gamma_i = (2 eps_{i-1} + 1) / (x_i^2 + tau_x_i)
        den_g = lines["den_g"]
        g_eps_prev = np.sum(g_gamma * 2.0 / den_g, axis=-1)
        g_den = -g_gamma * lines["gamma_hat"] / den_g
        g_x = g_x + 2.0 * lines["x_hat"] * g_den
        g_tau_x = g_tau_x + np.sum(g_den, axis=-1)

        # x_i = q * shrink, tau_x_i = tau_q / N * sum(shrink), shrink = 1 / (1 + tau_q gamma_{i-1})
        shrink, tau_q = lines["shrink"], lines["tau_q"]
        g_q = g_x * shrink
        g_shrink = g_x * lines["q"] + (g_tau_x * tau_q / n)[..., None]
        g_tau_q = g_tau_x * np.sum(shrink, axis=-1) / n
        g_den_x = -g_shrink * shrink ** 2
        g_tau_q = g_tau_q + np.sum(g_den_x * prev.gamma_hat, axis=-1)
        g_gamma_prev = g_den_x * tau_q[..., None]

        # q = x_{i-1} + tau_q Phi^T s
        g_x_prev = g_q
        g_tau_q = g_tau_q + np.sum(g_q * lines["phit_s"], axis=-1)
        g_s_new = g_s + tau_q[..., None] * _matvec(phi, g_q)

        # tau_q = N / (lambda . tau_s)
        g_tau_s = -(g_tau_q * tau_q ** 2 / n)[..., None] * lam

        # s = tau_s * (r - p)
        p, tau_s = lines["p"], lines["tau_s"]
        g_tau_s = g_tau_s + g_s_new * (r - p)
        g_p = -g_s_new * tau_s

        # tau_s = 1 / (tau_p + 1 / beta_i)
        beta_new = lines["beta_hat"]
        g_den_s = -g_tau_s * tau_s ** 2
        g_tau_p = g_den_s
        g_beta_new = g_beta - np.sum(g_den_s, axis=-1) / beta_new ** 2

        # beta_i = M / (||r - h||^2 + sum v_h)
        resid = r - lines["h"]
        g_quad = -g_beta_new * beta_new ** 2 / m
        g_h = -2.0 * g_quad[..., None] * resid
        g_v_h = g_quad[..., None]

        # v_h = tau_p / den, h = (beta_{i-1} tau_p r + p) / den, den = 1 + beta_{i-1} tau_p
        den_h, tau_p = lines["den_h"], lines["tau_p"]
        beta_prev = np.asarray(prev.beta_hat)[..., None]
        g_tau_p = g_tau_p + g_v_h / den_h ** 2 + g_h * beta_prev * resid / den_h
        g_beta_prev = np.sum(-g_v_h * tau_p ** 2 / den_h ** 2 + g_h * tau_p * resid / den_h, axis=-1)
        g_p = g_p + g_h / den_h

        # p = Phi x_{i-1} - tau_p * s_{i-1}
        g_x_prev = g_x_prev + _rmatvec(phi, g_p)
        g_tau_p = g_tau_p - g_p * prev.s
        g_s_prev = -g_p * tau_p

        # tau_p = tau_x_{i-1} lambda
        g_tau_x_prev = np.sum(g_tau_p * lam, axis=-1)

        g_x, g_tau_x, g_s, g_beta = g_x_prev, g_tau_x_prev, g_s_prev, g_beta_prev
        g_gamma, g_eps = g_gamma_prev, g_eps_prev
    # the initial epsilon is a constant, so g_eps is discarded here

    if per_layer:
        return layer_grads[::-1]
    return GradientBundle.from_dict(total)


def loss_and_grad(source, x_true, params, iters, clamp_low=0.0, clip=NN_INPUT_CLIP,
                  transform=DEFAULT_TRANSFORM, output="clamp", input_scale=None):
    x_hat, tape = unrolled_forward(source, params, iters, clamp_low, clip, transform=transform, output=output,
                                   input_scale=input_scale)
    return mse_loss(x_hat, x_true), unrolled_backward(tape, x_true, params)


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, params: NnTunerParams) -> "AdamState":
        return cls(np.zeros(params.size), np.zeros(params.size), 0)


def adam_step(params: NnTunerParams, grads: GradientBundle, astate: AdamState, lr: float = 0.01,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    g = grads.to_vector()
    theta = params.to_vector()
    if g.shape != theta.shape or astate.m.shape != theta.shape:
        raise ParameterError(f"shape mismatch: params {theta.shape}, grads {g.shape}, moments {astate.m.shape}")
    step = astate.step + 1
    m = beta1 * astate.m + (1.0 - beta1) * g
    v = beta2 * astate.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return (NnTunerParams.from_vector(theta, params.n_input, params.l_hidden),
            AdamState(m, v, step))


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    unroll_iters: int = 50
    batch_size: int = 32
    epochs: int = 150
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    l_hidden: int = DEFAULT_HIDDEN
    clamp_low: float = 0.0
    input_transform: str = DEFAULT_TRANSFORM
    output_map: str = "clamp"
    input_scale: Optional[float] = None
    seed: int = 0
    eval_chunk: int = 256

    def validate(self, n_train: int):
        for name in ("unroll_iters", "batch_size", "epochs", "learning_rate", "l_hidden"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.input_transform not in INPUT_TRANSFORMS:
            raise ParameterError(f"unknown input transform {self.input_transform!r}; choose from {INPUT_TRANSFORMS}")
        if self.output_map not in OUTPUT_MAPS:
            raise ParameterError(f"unknown output map {self.output_map!r}; choose from {OUTPUT_MAPS}")
        if self.clamp_low < -0.49:
            raise ParameterError(f"clamp_low must be >= -0.49, got {self.clamp_low}")
        if self.batch_size > n_train:
            raise ParameterError(f"batch_size {self.batch_size} exceeds train split size {n_train}")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    initial_val_loss: float = float("nan")
    best_epoch: int = 0
    best_val_loss: float = float("inf")

    def __len__(self):
        return len(self.rows)

    @property
    def val_losses(self):
        return [row[2] for row in self.rows]

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, tr, va in self.rows:
                writer.writerow([epoch, f"{tr:.9g}", f"{va:.9g}"])
        return path


class _ModelBank:
    """Unitary models for a list of instances, cached when small enough."""

    def __init__(self, instances):
        self.instances = list(instances)
        self.x_true = np.stack([inst.x_true for inst in self.instances])
        inst0 = self.instances[0]
        nbytes = len(self.instances) * (inst0.m * inst0.n + 2 * inst0.m) * 8
        self._cached = stack_models(self.instances) if nbytes <= _MODEL_CACHE_BYTES else None

    def __len__(self):
        return len(self.instances)

    def model(self, idx) -> UnitaryModel:
        if self._cached is not None:
            c = self._cached
            return UnitaryModel(c.phi[idx], c.r[idx], c.lambda_vec[idx])
        return stack_models([self.instances[i] for i in idx])


def evaluate_loss(bank: _ModelBank, params, config: TrainConfig) -> float:
    total = 0.0
    for start in range(0, len(bank), config.eval_chunk):
        idx = np.arange(start, min(start + config.eval_chunk, len(bank)))
        x_hat, _ = unrolled_forward(bank.model(idx), params, config.unroll_iters,
                                    config.clamp_low, record=False, transform=config.input_transform,
                                    output=config.output_map, input_scale=config.input_scale)
        total += np.sum((x_hat - bank.x_true[idx]) ** 2)
    return float(total / len(bank))


def write_checkpoint(params, path, epoch, val_loss, config: Optional[TrainConfig] = None):
    """Weight file plus a sidecar recording the epoch and the tuner options."""
    config = config or TrainConfig()
    path = Path(path)
    save_params(params, path)
    write_sidecar(path, epoch=int(epoch), val_loss=repr(float(val_loss)),
                  input_transform=config.input_transform, input_scale=config.input_scale,
                  output_map=config.output_map, clamp_low=config.clamp_low,
                  unroll_iters=config.unroll_iters)
    return path


def train(dataset, config: Optional[TrainConfig] = None, params: Optional[NnTunerParams] = None,
          checkpoint_path=None):
    """Fit the tuner with mini-batch Adam; return the best-validation params and history."""
    config = config or TrainConfig()
    train_set = dataset.subset("train")
    val_set = dataset.subset("validation") or train_set
    if not train_set:
        raise ParameterError("dataset has an empty train split")
    n = train_set[0].n
    if any(inst.n != n for inst in dataset.instances):
        raise ParameterError("all instances must share the signal length N")
    config.validate(len(train_set))

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 21]))
    if params is None:
        params = init_params(n, config.l_hidden, np.random.default_rng(np.random.SeedSequence([config.seed, 22])))
    train_bank, val_bank = _ModelBank(train_set), _ModelBank(val_set)
    history = TrainHistory()
    try:
        history.initial_val_loss = evaluate_loss(val_bank, params, config)
    except NumericalError as exc:
        raise TrainingError(f"initial validation diverged: {exc}", epoch=0, batch=None) from None
    best = params.copy()
    history.best_val_loss = history.initial_val_loss
    astate = AdamState.zeros(params)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_bank))
        loss_sum = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = np.sort(order[start:start + config.batch_size])
            try:
                loss, grads = loss_and_grad(train_bank.model(idx), train_bank.x_true[idx], params,
                                            config.unroll_iters, config.clamp_low,
                                            transform=config.input_transform,
                                            output=config.output_map, input_scale=config.input_scale)
            except NumericalError as exc:
                raise TrainingError(f"forward/backward failed: {exc}", epoch=epoch, batch=b) from None
            if not np.isfinite(loss) or not grads.is_finite():
                raise TrainingError("non-finite loss or gradient", epoch=epoch, batch=b)
            loss_sum += loss * len(idx)
            params, astate = adam_step(params, grads, astate, config.learning_rate,
                                       config.adam_beta1, config.adam_beta2, config.adam_eps)
        try:
            val_loss = evaluate_loss(val_bank, params, config)
        except NumericalError as exc:
            raise TrainingError(f"validation diverged: {exc}", epoch=epoch, batch=None) from None
        if not np.isfinite(val_loss):
            raise TrainingError("non-finite validation loss", epoch=epoch, batch=None)
        train_loss = loss_sum / len(order)
        history.rows.append((epoch, train_loss, val_loss))
        if val_loss < history.best_val_loss:
            history.best_val_loss, history.best_epoch = val_loss, epoch
            best = params.copy()
            if checkpoint_path is not None:
                write_checkpoint(best, checkpoint_path, epoch, val_loss, config)
        logger.info("epoch %d train_loss=%.6g val_loss=%.6g", epoch, train_loss, val_loss)
    return best, history


# --------------------------------------------------------------------------
# finite-difference verification

def finite_difference_gradient(source, x_true, params, iters, step=1e-6, clamp_low=0.0,
                               transform=DEFAULT_TRANSFORM, output="clamp", input_scale=None,
                               precision=np.longdouble):
    """Central differences of the loss over every tuner parameter.

    The perturbed forward passes run in ``precision`` (extended by default)
    so that round-off in ``(L+ - L-) / 2h`` stays far below the truncation
    error even for small gradient components.
    """
    model = _as_model(source)
    model = UnitaryModel(model.phi.astype(precision), model.r.astype(precision),
                         model.lambda_vec.astype(precision))
    theta = params.to_vector().astype(precision)
    x_true = np.asarray(x_true).astype(precision)
    h = precision(step)
    n, l_hidden = params.n_input, params.l_hidden

    def loss(vec):
        x_hat = unrolled_forward(model, NnTunerParams.from_vector(vec, n, l_hidden), iters, clamp_low,
                                 record=False, transform=transform, output=output,
                                 input_scale=input_scale)[0]
        err = np.sum((x_hat - x_true) ** 2, axis=-1)
        return np.mean(err) if err.ndim else err

    fd = np.empty(theta.size)
    for k in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[k] += h
        minus[k] -= h
        fd[k] = float((loss(plus) - loss(minus)) / (2 * h))
    return fd


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - f| / max(|a|, |f|, floor)``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_seed: int
    worst_index: int
    per_seed: list

    def passed(self, tol=1e-5):
        return self.max_rel_err < tol


def grad_check_problem(seed, m=6, n=8, l_hidden=4, snr_db=20.0, rho=0.4):
    """Small instance and tuner weights used by the gradient check."""
    from .problem import gen_instance

    inst = gen_instance(m, n, rho, snr_db, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    params = init_params(n, l_hidden, rng)
    # small input weights keep the hidden units unsaturated; the output bias
    # keeps tanh output above the clamp so no parameter has a vacuous zero gradient
    params = NnTunerParams(params.w * 0.05, rng.uniform(-0.5, 0.5, l_hidden),
                           params.alpha * 0.15, 0.8)
    return inst, params


def grad_check(seeds=5, m=6, n=8, l_hidden=4, iters=3, step=1e-6, base_seed=0,
               transform=DEFAULT_TRANSFORM, output="clamp", input_scale=None,
               precision=np.longdouble):
    """Compare the reverse pass with central differences on small random problems."""
    per_seed = []
    worst = (-1.0, -1, -1)
    for k in range(seeds):
        seed = base_seed + k
        inst, params = grad_check_problem(seed, m, n, l_hidden)
        _, grads = loss_and_grad(inst, inst.x_true, params, iters, transform=transform,
                                 output=output, input_scale=input_scale)
        fd = finite_difference_gradient(inst, inst.x_true, params, iters, step, transform=transform,
                                        output=output, input_scale=input_scale, precision=precision)
        rel = relative_error(grads.to_vector(), fd)
        per_seed.append(float(rel.max()))
        if rel.max() > worst[0]:
            worst = (float(rel.max()), seed, int(rel.argmax()))
    return GradCheckReport(worst[0], worst[1], worst[2], per_seed)
