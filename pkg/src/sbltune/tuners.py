"""Shape-parameter auto-tuners mapping a precision vector to a new epsilon.

All tuners accept ``gamma`` with shape ``(..., N)`` and return one epsilon per
leading index (a Python float for a single vector).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DimensionError, DomainError, FormatError, ParameterError

WEIGHT_MAGIC = b"SBNN"
WEIGHT_VERSION = 1
DEFAULT_HIDDEN = 256
NN_INPUT_CLIP = (1e-10, 1e10)
DEFAULT_TRANSFORM = "centered-log"
_RADICAND_SLACK = 1e-12


def _real(value):
    """Float array that keeps extended precision when given, else float64."""
    value = np.asarray(value)
    return value.astype(np.result_type(value.dtype, np.float64), copy=False)


def _scalarize(value):
    return float(value) if np.ndim(value) == 0 else value


def jensen_radicand(gamma) -> Union[float, np.ndarray]:
    """``log(mean(gamma)) - mean(log(gamma))`` along the last axis; non-negative by Jensen."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.size == 0:
        raise DomainError("gamma must be non-empty")
    if not np.all(np.isfinite(gamma)) or np.any(gamma <= 0):
        raise DomainError("gamma entries must be strictly positive and finite")
    # rewritten as mean((u - 1) - log u), u = gamma / mean(gamma): every term is non-negative and the
    # first-order error of the computed mean cancels, so equal entries give ~1e-32 rather than ~1e-16
    u = gamma / np.mean(gamma, axis=-1, keepdims=True)
    return _scalarize(np.mean((u - 1.0) - np.log(u), axis=-1))


def empirical_epsilon(gamma) -> Union[float, np.ndarray]:
    """Closed-form rule ``0.5 * sqrt(log(mean(gamma)) - mean(log(gamma)))``."""
    radicand = np.asarray(jensen_radicand(gamma))
    if np.any(radicand < -_RADICAND_SLACK):
        raise DomainError(f"negative radicand {np.min(radicand)!r} beyond rounding slack")
    return _scalarize(0.5 * np.sqrt(np.clip(radicand, 0.0, None)))


def fixed_epsilon(epsilon0: float) -> float:
    if not epsilon0 > -0.5:
        raise ParameterError(f"fixed epsilon must exceed -0.5, got {epsilon0}")
    return float(epsilon0)


@dataclass
class NnTunerParams:
    """Tied weights of the one-hidden-layer tanh tuner.

    ``w`` is ``(L, N)`` with row ``j`` the input weights of hidden unit ``j``;
    ``b`` and ``alpha`` are length ``L``; ``d`` is the scalar output bias.
    """

    w: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    d: float

    def __post_init__(self):
        self.w = _real(self.w)
        self.b = _real(self.b).reshape(-1)
        self.alpha = _real(self.alpha).reshape(-1)
        self.d = float(self.d) if self.w.dtype == np.float64 else self.w.dtype.type(self.d)
        if self.w.ndim != 2:
            raise ParameterError(f"w must be 2-D, got shape {self.w.shape}")
        l_hidden = self.w.shape[0]
        if self.b.shape != (l_hidden,) or self.alpha.shape != (l_hidden,):
            raise ParameterError(
                f"inconsistent shapes w{self.w.shape}, b{self.b.shape}, alpha{self.alpha.shape}"
            )
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))
                and np.all(np.isfinite(self.alpha)) and np.isfinite(self.d)):
            raise ParameterError("tuner parameters must be finite")

    @property
    def n_input(self) -> int:
        return self.w.shape[1]

    @property
    def l_hidden(self) -> int:
        return self.w.shape[0]

    @property
    def size(self) -> int:
        return self.w.size + self.b.size + self.alpha.size + 1

    @classmethod
    def zeros(cls, n: int, l_hidden: int = DEFAULT_HIDDEN) -> "NnTunerParams":
        return cls(np.zeros((l_hidden, n)), np.zeros(l_hidden), np.zeros(l_hidden), 0.0)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w.ravel(), self.b, self.alpha, [self.d]])

    @classmethod
    def from_vector(cls, vec, n: int, l_hidden: int) -> "NnTunerParams":
        vec = _real(vec)
        if vec.size != l_hidden * n + 2 * l_hidden + 1:
            raise ParameterError(f"vector of size {vec.size} does not fit N={n}, L={l_hidden}")
        ln = l_hidden * n
        return cls(vec[:ln].reshape(l_hidden, n), vec[ln:ln + l_hidden],
                   vec[ln + l_hidden:ln + 2 * l_hidden], vec[-1])

    def copy(self) -> "NnTunerParams":
        return NnTunerParams(self.w.copy(), self.b.copy(), self.alpha.copy(), self.d)

    def __eq__(self, other):
        if not isinstance(other, NnTunerParams):
            return NotImplemented
        return (np.array_equal(self.w, other.w) and np.array_equal(self.b, other.b)
                and np.array_equal(self.alpha, other.alpha) and self.d == other.d)


INPUT_TRANSFORMS = ("raw", "log", "centered-log")
OUTPUT_MAPS = ("clamp", "affine")


def _features(inputs, transform):
    if transform == "raw":
        return inputs
    logs = np.log(inputs)
    if transform == "log":
        return logs
    if transform == "centered-log":
        return logs - np.log(np.mean(inputs, axis=-1, keepdims=True))
    raise ParameterError(f"unknown input transform {transform!r}; choose from {INPUT_TRANSFORMS}")


def _features_vjp(inputs, g_feat, transform):
    if transform == "raw":
        return g_feat
    if transform == "log":
        return g_feat / inputs
    # centered-log: d/dgamma_k [log gamma_n - log mean(gamma)]
    total = np.sum(g_feat, axis=-1, keepdims=True)
    return g_feat / inputs - total / np.sum(inputs, axis=-1, keepdims=True)


def nn_forward(params: NnTunerParams, gamma, clamp_low=0.0, clip=NN_INPUT_CLIP,
               transform=DEFAULT_TRANSFORM, output="clamp", input_scale=None):
    """Evaluate the tuner and return ``(epsilon, cache)`` for backpropagation.

    ``input_scale=None`` scales the features by ``1/N``.
    """
    gamma = _real(gamma)
    if gamma.shape[-1] != params.n_input:
        raise ParameterError(
            f"gamma has length {gamma.shape[-1]}, tuner expects N={params.n_input}"
        )
    if not np.all(np.isfinite(gamma)):
        raise DomainError("gamma must be finite")
    if input_scale is None:
        input_scale = 1.0 / params.n_input
    inputs = np.clip(gamma, clip[0], clip[1])
    feats = input_scale * _features(inputs, transform)
    psi = np.tanh(feats @ params.w.T + params.b)
    raw = np.tanh(psi @ params.alpha + params.d)
    if output == "clamp":
        eps = np.maximum(raw, clamp_low)
        out_slope = (raw >= clamp_low).astype(raw.dtype)
    elif output == "affine":
        # tanh range (-1, 1) mapped onto (clamp_low, 1)
        half = 0.5 * (1.0 - clamp_low)
        eps = clamp_low + half * (1.0 + raw)
        out_slope = np.full_like(raw, half)
    else:
        raise ParameterError(f"unknown output map {output!r}; choose from {OUTPUT_MAPS}")
    cache = {
        "inputs": inputs,
        "features": feats,
        "transform": transform,
        "input_scale": input_scale,
        "pass_input": (gamma >= clip[0]) & (gamma <= clip[1]),
        "psi": psi,
        "raw": raw,
        "out_slope": out_slope,
    }
    return eps, cache


def nn_epsilon(params: NnTunerParams, gamma, clamp_low: float = 0.0, clip=NN_INPUT_CLIP,
               transform: str = DEFAULT_TRANSFORM, output: str = "clamp", input_scale=None):
    """``max(tanh(alpha . tanh(W f(gamma) + b) + d), clamp_low)`` with feature map ``f``.

    ``output="affine"`` replaces the max by an affine map of tanh onto
    ``(clamp_low, 1)``.
    """
    return _scalarize(nn_forward(params, gamma, clamp_low, clip, transform, output, input_scale)[0])


def nn_backward(params: NnTunerParams, cache: dict, grad_eps, grads: dict):
    """Accumulate parameter partials into ``grads`` and return d(loss)/d(gamma).

    ``grad_eps`` has the batch shape of the forward call; parameter partials
    are summed over that batch.
    """
    grad_eps = np.asarray(grad_eps, dtype=np.float64)
    g_out = grad_eps * cache["out_slope"] * (1.0 - cache["raw"] ** 2)
    psi = cache["psi"]
    g_pre = (g_out[..., None] * params.alpha) * (1.0 - psi ** 2)
    grads["d"] += np.sum(g_out)
    grads["alpha"] += (g_out[..., None] * psi).reshape(-1, params.l_hidden).sum(axis=0)
    flat_pre = g_pre.reshape(-1, params.l_hidden)
    grads["w"] += flat_pre.T @ cache["features"].reshape(-1, params.n_input)
    grads["b"] += flat_pre.sum(axis=0)
    g_feat = cache["input_scale"] * (g_pre @ params.w)
    return _features_vjp(cache["inputs"], g_feat, cache["transform"]) * cache["pass_input"]


class Tuner:
    """Base class: ``tuner(gamma) -> epsilon``."""

    name = "tuner"

    def __call__(self, gamma):
        raise NotImplementedError

    def initial_epsilon(self, default: float) -> float:
        return default


class FixedTuner(Tuner):
    name = "fixed"

    def __init__(self, epsilon0: float = 1e-4):
        self.epsilon0 = fixed_epsilon(epsilon0)

    def __call__(self, gamma):
        gamma = np.asarray(gamma)
        if gamma.ndim <= 1:
            return self.epsilon0
        return np.full(gamma.shape[:-1], self.epsilon0)

    def initial_epsilon(self, default):
        return self.epsilon0

    def __repr__(self):
        return f"FixedTuner({self.epsilon0!r})"

    def __str__(self):
        return f"fixed:{self.epsilon0:g}"


class EmpiricalTuner(Tuner):
    name = "empirical"

    def __call__(self, gamma):
        return empirical_epsilon(gamma)

    def __repr__(self):
        return "EmpiricalTuner()"

    def __str__(self):
        return "empirical"


class NeuralTuner(Tuner):
    name = "neural"

    def __init__(self, params: NnTunerParams, clamp_low: float = 0.0, clip=NN_INPUT_CLIP,
                 transform: str = DEFAULT_TRANSFORM, output: str = "clamp", input_scale=None):
        if clamp_low < -0.49:
            raise ParameterError(f"clamp_low must be >= -0.49, got {clamp_low}")
        if transform not in INPUT_TRANSFORMS:
            raise ParameterError(f"unknown input transform {transform!r}; choose from {INPUT_TRANSFORMS}")
        self.params = params
        self.clamp_low = float(clamp_low)
        self.clip = tuple(clip)
        self.transform = transform
        if output not in OUTPUT_MAPS:
            raise ParameterError(f"unknown output map {output!r}; choose from {OUTPUT_MAPS}")
        self.output = output
        self.input_scale = None if input_scale is None else float(input_scale)

    def __call__(self, gamma):
        return nn_epsilon(self.params, gamma, self.clamp_low, self.clip, self.transform, self.output, self.input_scale)

    def forward(self, gamma):
        return nn_forward(self.params, gamma, self.clamp_low, self.clip, self.transform, self.output, self.input_scale)

    def __repr__(self):
        return f"NeuralTuner(N={self.params.n_input}, L={self.params.l_hidden}, transform={self.transform!r})"

    def __str__(self):
        return "neural"


def make_tuner(spec) -> Tuner:
    """Build a tuner from ``'empirical'``, ``'fixed:<eps>'``, ``'neural:<path>'`` or a Tuner."""
    if isinstance(spec, Tuner):
        return spec
    if isinstance(spec, NnTunerParams):
        return NeuralTuner(spec)
    text = str(spec).strip()
    kind, _, arg = text.partition(":")
    kind = kind.lower()
    if kind == "empirical":
        return EmpiricalTuner()
    if kind == "fixed":
        try:
            return FixedTuner(float(arg) if arg else 1e-4)
        except ValueError:
            raise ParameterError(f"bad fixed epsilon {arg!r}") from None
    if kind == "neural":
        if not arg:
            raise ParameterError("neural tuner needs a weight path: 'neural:<path>'")
        return load_tuner(arg)
    raise ParameterError(f"unknown tuner {text!r}")


# --------------------------------------------------------------------------
# weight file

_WHEADER = struct.Struct("<4sIII")


def save_params(params: NnTunerParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    header = _WHEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, params.n_input, params.l_hidden)
    path.write_bytes(header + params.to_vector().astype("<f8").tobytes())
    return path


def load_params(path: Union[str, Path], expected_n: int = None) -> NnTunerParams:
    blob = Path(path).read_bytes()
    if len(blob) < _WHEADER.size:
        raise FormatError(f"{path}: truncated weight header")
    magic, version, n, l_hidden = _WHEADER.unpack_from(blob)
    if magic != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != WEIGHT_VERSION:
        raise FormatError(f"{path}: unsupported weight version {version}")
    count = l_hidden * n + 2 * l_hidden + 1
    if n == 0 or l_hidden == 0:
        raise FormatError(f"{path}: implausible dimensions N={n}, L={l_hidden}")
    payload = len(blob) - _WHEADER.size
    if payload != count * 8:
        raise FormatError(f"{path}: payload {payload} bytes, expected {count * 8} for N={n}, L={l_hidden}")
    if expected_n is not None and n != expected_n:
        raise DimensionError(f"{path}: weights are for N={n}, but the problem has N={expected_n}")
    vec = np.frombuffer(blob, dtype="<f8", offset=_WHEADER.size).astype(np.float64)
    return NnTunerParams.from_vector(vec, n, l_hidden)


# --------------------------------------------------------------------------
# sidecar manifest: tuner options stored next to a weight file

SIDECAR_SUFFIX = ".manifest"


def sidecar_path(path) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


def write_sidecar(path, **fields) -> Path:
    """Write ``key=value`` lines next to the weight file at ``path``."""
    out = sidecar_path(path)
    out.write_text("".join(f"{k}={'auto' if v is None else v}\n" for k, v in fields.items()))
    return out


def read_sidecar(path) -> dict:
    """Parse the sidecar of ``path``; an absent sidecar yields ``{}``."""
    side = sidecar_path(path)
    if not side.exists():
        return {}
    fields = {}
    for line in side.read_text().splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{side}: malformed line {line!r}")
        fields[key.strip()] = value.strip()
    return fields


def load_tuner(path, expected_n: int = None) -> NeuralTuner:
    """Neural tuner from a weight file, honouring options in its sidecar."""
    params = load_params(path, expected_n)
    side = read_sidecar(path)
    scale = side.get("input_scale", "auto")
    try:
        return NeuralTuner(
            params,
            clamp_low=float(side.get("clamp_low", 0.0)),
            transform=side.get("input_transform", DEFAULT_TRANSFORM),
            output=side.get("output_map", "clamp"),
            input_scale=None if scale == "auto" else float(scale),
        )
    except ValueError as exc:
        raise FormatError(f"{sidecar_path(path)}: {exc}") from None
