"""NMSE benchmarks: per-iteration curves, SNR sweeps and the support-oracle bound."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DomainError, NumericalError, ParameterError
from .problem import IID, MatrixKind, ProblemInstance, derive_seed, gen_instance
from .sbl import DB_FLOOR, sbl_run, to_db
from .tuners import Tuner, make_tuner
from .uamp import uamp_sbl_run

ALGORITHMS = ("sbl", "uamp-sbl")
CSV_HEADER = ["snr_db", "rho", "iteration", "nmse_db", "algorithm", "tuner"]


def nmse(estimates, truths):
    """Mean per-trial normalized squared error; returns ``(linear, dB)``.

    The dB value is floored at -120 dB.
    """
    estimates = [np.asarray(e, dtype=np.float64) for e in estimates]
    truths = [np.asarray(t, dtype=np.float64) for t in truths]
    if not estimates or len(estimates) != len(truths):
        raise ParameterError(f"need matching non-empty lists, got {len(estimates)} and {len(truths)}")
    ratios = []
    for est, tru in zip(estimates, truths):
        if est.shape != tru.shape:
            raise ParameterError(f"shape mismatch {est.shape} vs {tru.shape}")
        energy = np.sum(tru ** 2)
        if energy == 0:
            raise DomainError("all-zero truth vector has undefined normalized error")
        ratios.append(np.sum((est - tru) ** 2) / energy)
    linear = float(np.mean(ratios))
    return linear, to_db(linear)


def oracle_estimate(instance: ProblemInstance) -> np.ndarray:
    """MMSE estimate given the true support and the unit-variance prior on non-zeros."""
    support = np.flatnonzero(instance.x_true)
    if support.size == 0:
        raise DomainError("oracle bound needs a non-empty support")
    a_s = instance.a[:, support]
    beta = instance.beta_true
    system = beta * (a_s.T @ a_s) + np.eye(support.size)
    try:
        x_s = np.linalg.solve(system, beta * (a_s.T @ instance.y))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"oracle system is singular: {exc}") from None
    x_hat = np.zeros(instance.n)
    x_hat[support] = x_s
    return x_hat


def oracle_bound(instance: ProblemInstance) -> float:
    x_hat = oracle_estimate(instance)
    return float(np.sum((x_hat - instance.x_true) ** 2) / np.sum(instance.x_true ** 2))


@dataclass
class ExperimentSpec:
    algorithm: str = "uamp-sbl"
    tuner: object = "empirical"
    m: int = 80
    n: int = 100
    rho: Sequence[float] = (0.1,)
    snr_db: Sequence[float] = (50.0,)
    matrix_kind: MatrixKind = IID
    trials: int = 200
    iters: int = 50
    seed: int = 0

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ParameterError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.trials < 1 or self.iters < 1:
            raise ParameterError(f"trials and iters must be >= 1, got {self.trials}, {self.iters}")
        if not len(self.rho) or not len(self.snr_db):
            raise ParameterError("rho and snr_db lists must be non-empty")
        self.matrix_kind = MatrixKind.parse(self.matrix_kind)

    @property
    def cells(self):
        return [(snr, rho) for snr in self.snr_db for rho in self.rho]


class ResultRow(NamedTuple):
    snr_db: float
    rho: float
    iteration: int
    nmse_db: float
    algorithm: str
    tuner: str


@dataclass
class ResultTable:
    rows: List[ResultRow] = field(default_factory=list)
    failed: dict = field(default_factory=dict)  # (snr, rho) -> failed trial count
    attempted: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def algorithm_rows(self):
        return [r for r in self.rows if r.tuner != "oracle"]

    def oracle_rows(self):
        return [r for r in self.rows if r.tuner == "oracle"]

    def final(self, snr_db, rho, tuner=None):
        """NMSE (dB) at the last iteration of a cell (or the oracle row)."""
        rows = [r for r in self.rows if r.snr_db == snr_db and r.rho == rho
                and (tuner is None and r.tuner != "oracle" or r.tuner == tuner)]
        if not rows:
            raise KeyError((snr_db, rho, tuner))
        return max(rows, key=lambda r: r.iteration).nmse_db

    def failure_fraction(self):
        return {cell: self.failed.get(cell, 0) / self.attempted[cell] for cell in self.attempted}


def _run_trial(algorithm, tuner, instance, iters):
    runner = sbl_run if algorithm == "sbl" else uamp_sbl_run
    try:
        result = runner(instance, tuner, iters)
    except NumericalError:
        return None
    return result.per_iteration_error, oracle_bound(instance)


def _fresh_instances(spec: ExperimentSpec, cell_index, snr, rho):
    return [
        gen_instance(spec.m, spec.n, rho, snr, spec.matrix_kind,
                     seed=derive_seed(spec.seed, cell_index, trial))
        for trial in range(spec.trials)
    ]


def run_experiment(spec: ExperimentSpec, source: Optional[Sequence[ProblemInstance]] = None,
                   n_jobs: int = 1) -> ResultTable:
    """Per-iteration NMSE of one algorithm/tuner over an (snr, rho) grid.

    With ``source=None`` each cell draws ``spec.trials`` fresh instances from
    seeds derived from ``spec.seed``; otherwise the given instances are grouped
    by their (snr, rho) and every group becomes a cell.
    """
    spec.validate()
    tuner: Tuner = make_tuner(spec.tuner)
    tuner_name = str(tuner)
    if source is None:
        groups = {cell: _fresh_instances(spec, k, *cell) for k, cell in enumerate(spec.cells)}
    else:
        groups = defaultdict(list)
        for inst in source:
            groups[(inst.snr_db, inst.rho)].append(inst)
        groups = dict(sorted(groups.items()))

    table = ResultTable()
    for (snr, rho), instances in groups.items():
        if n_jobs == 1:
            outcomes = [_run_trial(spec.algorithm, tuner, inst, spec.iters) for inst in instances]
        else:
            from joblib import Parallel, delayed

            outcomes = Parallel(n_jobs=n_jobs)(
                delayed(_run_trial)(spec.algorithm, tuner, inst, spec.iters) for inst in instances
            )
        table.attempted[(snr, rho)] = len(instances)
        good = [o for o in outcomes if o is not None]
        if len(good) < len(outcomes):
            table.failed[(snr, rho)] = len(outcomes) - len(good)
        if not good:
            continue
        curves = np.array([g[0] for g in good])
        mean_curve = curves.mean(axis=0)
        for it in range(spec.iters):
            table.rows.append(ResultRow(float(snr), float(rho), it + 1, to_db(mean_curve[it]),
                                        spec.algorithm, tuner_name))
        table.rows.append(ResultRow(float(snr), float(rho), spec.iters,
                                    to_db(float(np.mean([g[1] for g in good]))),
                                    spec.algorithm, "oracle"))
    return table


def _sig6(value: float) -> str:
    return f"{value:.6g}"


def emit_csv(table: ResultTable, path) -> Path:
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in table.rows:
                writer.writerow([_sig6(row.snr_db), _sig6(row.rho), row.iteration,
                                 _sig6(row.nmse_db), row.algorithm, row.tuner])
            for (snr, rho), count in sorted(table.failed.items()):
                fh.write(f"# failed_trials snr_db={_sig6(snr)} rho={_sig6(rho)} "
                         f"count={count} of {table.attempted[(snr, rho)]}\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path) -> ResultTable:
    table = ResultTable()
    with Path(path).open(encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    for rec in reader:
        table.rows.append(ResultRow(float(rec["snr_db"]), float(rec["rho"]), int(rec["iteration"]),
                                    float(rec["nmse_db"]), rec["algorithm"], rec["tuner"]))
    return table


def below_floor(nmse_db: float) -> bool:
    return nmse_db <= DB_FLOOR or math.isinf(nmse_db)
