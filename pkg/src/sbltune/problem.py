"""Synthetic sparse-recovery instances and datasets.

Every instance realizes ``y = A @ x + noise`` with a Bernoulli-Gaussian ``x``,
a Gaussian or Kronecker-correlated ``A`` and white Gaussian noise whose
precision is chosen per instance so the realized signal power hits the
requested SNR exactly.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    DegenerateSpecError,
    DimensionError,
    FormatError,
    ParameterError,
    ZeroSignalError,
)

MAX_SIGNAL_REDRAWS = 100
RECORD_MAGIC = b"SBLD"
RECORD_VERSION = 1
DATASET_FORMAT_VERSION = 1

# purpose tags mixed into seeds so independent streams never collide
_TAG_MATRIX = 1
_TAG_SIGNAL = 2
_TAG_NOISE = 3
_TAG_SHARED_MATRIX = 11
_TAG_SPLIT = 12


@dataclass(frozen=True)
class MatrixKind:
    """Measurement-matrix family: i.i.d. Gaussian (``c is None``) or correlated."""

    c: Optional[float] = None

    def __post_init__(self):
        if self.c is not None and not 0.0 <= self.c < 1.0:
            raise ParameterError(f"correlation c must lie in [0, 1), got {self.c}")

    @property
    def correlated(self) -> bool:
        return self.c is not None

    def __str__(self):
        return "iid" if self.c is None else f"corr:{self.c:g}"

    @classmethod
    def parse(cls, text: Union[str, "MatrixKind"]) -> "MatrixKind":
        if isinstance(text, MatrixKind):
            return text
        text = text.strip().lower()
        if text in ("iid", "gaussian", "iid-gaussian"):
            return cls()
        if text.startswith(("corr:", "correlated:")):
            try:
                return cls(float(text.split(":", 1)[1]))
            except ValueError:
                pass
        raise ParameterError(f"unknown matrix kind {text!r}; use 'iid' or 'corr:<c>'")


IID = MatrixKind()


@dataclass
class ProblemInstance:
    a: np.ndarray
    x_true: np.ndarray
    y: np.ndarray
    beta_true: float
    snr_db: float
    rho: float
    matrix_kind: MatrixKind = IID
    seed: int = 0

    @property
    def m(self) -> int:
        return self.a.shape[0]

    @property
    def n(self) -> int:
        return self.a.shape[1]


@dataclass
class DatasetSpec:
    m: int = 80
    n: int = 100
    snr_grid: Sequence[float] = (10.0, 20.0, 30.0, 40.0, 50.0)
    rho_grid: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5)
    total_count: int = 50000
    matrix_kind: MatrixKind = IID
    fresh_matrix_per_sample: bool = True
    seed: int = 0
    split_fractions: tuple = (0.4, 0.4, 0.2)

    def validate(self):
        if self.m < 1 or self.n < 1:
            raise ParameterError(f"dimensions must be positive, got m={self.m}, n={self.n}")
        if self.total_count <= 0:
            raise ParameterError(f"total_count must be positive, got {self.total_count}")
        if not len(self.snr_grid) or not len(self.rho_grid):
            raise ParameterError("snr_grid and rho_grid must be non-empty")
        for rho in self.rho_grid:
            _check_rho(rho)
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ParameterError(f"split fractions must be three values summing to 1, got {self.split_fractions}")

    @property
    def cells(self):
        return list(itertools.product(self.snr_grid, self.rho_grid))


@dataclass
class Dataset:
    instances: list
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    spec: DatasetSpec = field(default_factory=DatasetSpec)

    def __len__(self):
        return len(self.instances)

    def subset(self, which: str) -> list:
        idx = {"train": self.train, "validation": self.validation, "test": self.test}[which]
        return [self.instances[i] for i in idx]


def derive_seed(*keys: int) -> int:
    """Mix integer keys into one 64-bit seed; order-sensitive and platform-stable."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def _check_rho(rho):
    if not 0.0 <= rho <= 1.0:
        raise ParameterError(f"rho must lie in [0, 1], got {rho}")


def gen_sparse_signal(n: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli-Gaussian vector: each entry N(0, 1) with probability ``rho``, else 0."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    _check_rho(rho)
    support = rng.random(n) < rho
    values = rng.standard_normal(n)
    return np.where(support, values, 0.0)


def gen_iid_gaussian_matrix(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if m < 1 or n < 1:
        raise ParameterError(f"matrix dimensions must be positive, got {m}x{n}")
    return rng.standard_normal((m, n))


def exponential_correlation(size: int, c: float) -> np.ndarray:
    """Toeplitz matrix with entries ``c**|i-j|``."""
    idx = np.arange(size)
    return np.power(float(c), np.abs(idx[:, None] - idx[None, :]))


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def gen_correlated_matrix(m: int, n: int, c: float, rng: np.random.Generator) -> np.ndarray:
    """``C_L^{1/2} G C_R^{1/2}`` with exponential correlation ``c`` on both sides."""
    if not 0.0 <= c < 1.0:
        raise ParameterError(f"correlation c must lie in [0, 1), got {c}")
    g = gen_iid_gaussian_matrix(m, n, rng)
    if c == 0.0:
        return g
    return _sqrtm_psd(exponential_correlation(m, c)) @ g @ _sqrtm_psd(exponential_correlation(n, c))


def gen_matrix(m: int, n: int, kind: MatrixKind, rng: np.random.Generator) -> np.ndarray:
    if kind.correlated:
        return gen_correlated_matrix(m, n, kind.c, rng)
    return gen_iid_gaussian_matrix(m, n, rng)


def noise_precision_for_snr(a: np.ndarray, x: np.ndarray, snr_db: float) -> float:
    """Noise precision making ``||A x||^2 / (M / beta)`` equal the SNR (power ratio)."""
    power = float(np.sum((a @ x) ** 2))
    if power == 0.0:
        raise ZeroSignalError("A @ x is identically zero; redraw the signal")
    return a.shape[0] * 10.0 ** (snr_db / 10.0) / power


def noise_for_seed(seed: int, m: int, beta: float) -> np.ndarray:
    """The noise vector an instance with this seed was (or will be) generated with."""
    return _rng(seed, _TAG_NOISE).standard_normal(m) / np.sqrt(beta)


def gen_instance(
    m: int,
    n: int,
    rho: float,
    snr_db: float,
    matrix_kind: Union[MatrixKind, str] = IID,
    seed: int = 0,
    a: Optional[np.ndarray] = None,
) -> ProblemInstance:
    """Draw one instance; a supplied ``a`` is reused instead of drawing a matrix."""
    _check_rho(rho)
    matrix_kind = MatrixKind.parse(matrix_kind)
    if a is None:
        a = gen_matrix(m, n, matrix_kind, _rng(seed, _TAG_MATRIX))
    elif a.shape != (m, n):
        raise ParameterError(f"shared matrix has shape {a.shape}, expected {(m, n)}")
    signal_rng = _rng(seed, _TAG_SIGNAL)
    for _ in range(MAX_SIGNAL_REDRAWS):
        x = gen_sparse_signal(n, rho, signal_rng)
        try:
            beta = noise_precision_for_snr(a, x, snr_db)
        except ZeroSignalError:
            continue
        break
    else:
        raise DegenerateSpecError(
            f"no non-zero signal after {MAX_SIGNAL_REDRAWS} draws (rho={rho}, n={n})"
        )
    y = a @ x + noise_for_seed(seed, m, beta)
    return ProblemInstance(
        a=a, x_true=x, y=y, beta_true=beta, snr_db=float(snr_db), rho=float(rho),
        matrix_kind=matrix_kind, seed=int(seed),
    )


def split_indices(count: int, seed: int, fractions=(0.4, 0.4, 0.2)):
    perm = _rng(seed, _TAG_SPLIT).permutation(count)
    n_train = int(np.floor(fractions[0] * count))
    n_val = int(np.floor(fractions[1] * count))
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


def _dataset_instance(spec: DatasetSpec, index: int, shared_a):
    snr, rho = spec.cells[index % len(spec.cells)]
    return gen_instance(spec.m, spec.n, rho, snr, spec.matrix_kind,
                        seed=derive_seed(spec.seed, index), a=shared_a)


def gen_dataset(spec: DatasetSpec, n_jobs: int = 1) -> Dataset:
    """Cycle (snr, rho) over the grid product and split 40/40/20 by seeded shuffle."""
    spec.validate()
    shared_a = None
    if not spec.fresh_matrix_per_sample:
        shared_a = gen_matrix(spec.m, spec.n, spec.matrix_kind, _rng(spec.seed, _TAG_SHARED_MATRIX))
    if n_jobs == 1:
        instances = [_dataset_instance(spec, k, shared_a) for k in range(spec.total_count)]
    else:
        from joblib import Parallel, delayed

        instances = Parallel(n_jobs=n_jobs)(
            delayed(_dataset_instance)(spec, k, shared_a) for k in range(spec.total_count)
        )
    train, val, test = split_indices(spec.total_count, spec.seed, spec.split_fractions)
    return Dataset(instances, train, val, test, spec)


# --------------------------------------------------------------------------
# persistence

_HEADER = struct.Struct("<4sIII")


def encode_instance(inst: ProblemInstance) -> bytes:
    body = np.concatenate([
        np.ascontiguousarray(inst.a, dtype="<f8").ravel(),
        inst.x_true.astype("<f8"),
        inst.y.astype("<f8"),
        np.array([inst.beta_true, inst.snr_db, inst.rho], dtype="<f8"),
    ]).astype("<f8")
    return _HEADER.pack(RECORD_MAGIC, RECORD_VERSION, inst.m, inst.n) + body.tobytes()


def decode_instance(blob: bytes, matrix_kind: MatrixKind = IID, seed: int = 0) -> ProblemInstance:
    if len(blob) < _HEADER.size:
        raise FormatError("record truncated before header end")
    magic, version, m, n = _HEADER.unpack_from(blob)
    if magic != RECORD_MAGIC:
        raise FormatError(f"bad record magic {magic!r}")
    if version != RECORD_VERSION:
        raise FormatError(f"unsupported record version {version}")
    expected = m * n + n + m + 3
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    if body.size != expected:
        raise FormatError(f"record holds {body.size} floats, expected {expected} for {m}x{n}")
    body = body.astype(np.float64)
    a = body[: m * n].reshape(m, n)
    x = body[m * n: m * n + n]
    y = body[m * n + n: m * n + n + m]
    beta, snr, rho = body[-3:]
    return ProblemInstance(a, x, y, float(beta), float(snr), float(rho), matrix_kind, seed)


def _fmt_list(values):
    return ",".join(repr(float(v)) for v in values)


def _parse_list(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def read_manifest(path: Path) -> dict:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"manifest line without '=': {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = dataset.spec
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "m": spec.m,
        "n": spec.n,
        "snr_grid": _fmt_list(spec.snr_grid),
        "rho_grid": _fmt_list(spec.rho_grid),
        "total_count": len(dataset),
        "matrix_kind": str(spec.matrix_kind),
        "fresh_matrix_per_sample": str(spec.fresh_matrix_per_sample).lower(),
        "seed": spec.seed,
        "train_count": len(dataset.train),
        "validation_count": len(dataset.validation),
        "test_count": len(dataset.test),
    }
    (directory / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))
    labels = np.empty(len(dataset), dtype=object)
    labels[dataset.train] = "train"
    labels[dataset.validation] = "validation"
    labels[dataset.test] = "test"
    (directory / "split.csv").write_text(
        "index,split\n" + "".join(f"{i},{s}\n" for i, s in enumerate(labels))
    )
    rec_dir = directory / "records"
    rec_dir.mkdir(exist_ok=True)
    for k, inst in enumerate(dataset.instances):
        (rec_dir / f"{k:07d}.bin").write_bytes(encode_instance(inst))
    return directory


def load_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    if not (directory / "manifest.txt").is_file():
        raise FileNotFoundError(f"no dataset manifest in {directory}")
    man = read_manifest(directory / "manifest.txt")
    try:
        if int(man["format_version"]) != DATASET_FORMAT_VERSION:
            raise FormatError(f"unsupported dataset format version {man['format_version']}")
        spec = DatasetSpec(
            m=int(man["m"]), n=int(man["n"]),
            snr_grid=_parse_list(man["snr_grid"]), rho_grid=_parse_list(man["rho_grid"]),
            total_count=int(man["total_count"]),
            matrix_kind=MatrixKind.parse(man["matrix_kind"]),
            fresh_matrix_per_sample=man["fresh_matrix_per_sample"] == "true",
            seed=int(man["seed"]),
        )
    except KeyError as exc:
        raise FormatError(f"manifest missing key {exc}") from None
    instances = []
    for k in range(spec.total_count):
        inst = decode_instance((directory / "records" / f"{k:07d}.bin").read_bytes(),
                               spec.matrix_kind, derive_seed(spec.seed, k))
        if (inst.m, inst.n) != (spec.m, spec.n):
            raise DimensionError(f"record {k} is {inst.m}x{inst.n}, manifest says {spec.m}x{spec.n}")
        instances.append(inst)
    groups = {"train": [], "validation": [], "test": []}
    for line in (directory / "split.csv").read_text().splitlines()[1:]:
        idx, label = line.split(",")
        groups[label].append(int(idx))
    return Dataset(instances, *(np.array(groups[g], dtype=int) for g in ("train", "validation", "test")), spec)
