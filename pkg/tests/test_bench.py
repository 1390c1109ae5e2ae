import numpy as np
import pytest

from oracles import oracle_scalar
from sbltune import bench
from sbltune.bench import (
    CSV_HEADER,
    ExperimentSpec,
    ResultRow,
    ResultTable,
    below_floor,
    emit_csv,
    nmse,
    oracle_bound,
    oracle_estimate,
    read_csv,
    run_experiment,
)
from sbltune.errors import DomainError, NumericalError, ParameterError
from sbltune.problem import IID, DatasetSpec, ProblemInstance, gen_dataset, gen_instance


class TestNmse:
    def test_exact_recovery_floor(self):
        x = [np.array([1.0, -2.0])]
        linear, db = nmse(x, x)
        assert linear == 0.0 and db == -120.0 and below_floor(db)

    def test_zero_estimate(self):
        assert nmse([np.zeros(3)], [np.array([1.0, 2.0, 0.0])]) == (1.0, 0.0)

    def test_two_trials(self):
        truths = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        estimates = [np.array([1.1, 0.0]), np.array([0.0, 1.0 + np.sqrt(0.03)])]
        linear, db = nmse(estimates, truths)
        assert linear == pytest.approx(0.02, rel=1e-12)
        assert db == pytest.approx(-16.9897, abs=1e-4)

    def test_duplication_invariant(self):
        r = np.random.default_rng(0)
        est, tru = list(r.standard_normal((5, 4))), list(r.standard_normal((5, 4)))
        assert nmse(est + est, tru + tru)[0] == pytest.approx(nmse(est, tru)[0], rel=1e-15)

    def test_errors(self):
        with pytest.raises(DomainError):
            nmse([np.ones(2)], [np.zeros(2)])
        with pytest.raises(ParameterError):
            nmse([], [])
        with pytest.raises(ParameterError):
            nmse([np.ones(2)], [np.ones(3)])


class TestOracle:
    def test_scalar_closed_form(self):
        zeta = 0.37
        inst = ProblemInstance(np.array([[1.0]]), np.array([1.0]), np.array([1.0 + zeta]), 1.0, 0.0, 1.0, IID, 0)
        assert oracle_estimate(inst)[0] == pytest.approx(oracle_scalar(1.0, 1.0, 1.0 + zeta), rel=1e-15)
        assert oracle_estimate(inst)[0] == pytest.approx((1 + zeta) / 2)

    def test_noiseless_limit(self):
        inst = gen_instance(20, 30, 0.1, 200.0, seed=1)
        assert oracle_bound(inst) < 1e-15

    def test_empty_support(self):
        inst = ProblemInstance(np.eye(2), np.zeros(2), np.ones(2), 1.0, 0.0, 0.1, IID, 0)
        with pytest.raises(DomainError):
            oracle_bound(inst)

    def test_dominance(self):
        for alg in ("sbl", "uamp-sbl"):
            for tuner in ("empirical", "fixed:1e-4"):
                spec = ExperimentSpec(alg, tuner, m=40, n=50, rho=(0.1,), snr_db=(50.0,), trials=100, seed=3)
                table = run_experiment(spec)
                assert table.final(50.0, 0.1, "oracle") <= table.final(50.0, 0.1)


class TestRunExperiment:
    def test_row_count(self):
        spec = ExperimentSpec("uamp-sbl", "empirical", m=6, n=8, trials=1, iters=2)
        table = run_experiment(spec)
        assert len(table.algorithm_rows()) == 2 and len(table.oracle_rows()) == 1
        assert [r.iteration for r in table.algorithm_rows()] == [1, 2]

    def test_grid_and_determinism(self):
        spec = ExperimentSpec("sbl", "empirical", m=8, n=10, rho=(0.1, 0.3), snr_db=(10.0, 30.0),
                              trials=4, iters=3, seed=7)
        one = run_experiment(spec)
        two = run_experiment(spec, n_jobs=2)
        assert len(one.algorithm_rows()) == 4 * 3
        assert one.rows == two.rows
        assert all(np.isfinite(r.nmse_db) for r in one.rows)

    def test_matches_manual_average(self):
        spec = ExperimentSpec("uamp-sbl", "empirical", m=8, n=10, rho=(0.2,), snr_db=(20.0,), trials=3, iters=4, seed=1)
        table = run_experiment(spec)
        insts = bench._fresh_instances(spec, 0, 20.0, 0.2)
        errs = [bench.uamp_sbl_run(i, "empirical", 4).per_iteration_error[-1] for i in insts]
        assert table.final(20.0, 0.2) == pytest.approx(10 * np.log10(np.mean(errs)), rel=1e-12)

    def test_dataset_source(self):
        ds = gen_dataset(DatasetSpec(m=6, n=8, snr_grid=(10.0, 20.0), rho_grid=(0.2,), total_count=10))
        table = run_experiment(ExperimentSpec("uamp-sbl", "empirical", m=6, n=8, iters=2), source=ds.instances)
        assert sorted(table.attempted) == [(10.0, 0.2), (20.0, 0.2)]
        assert table.attempted[(10.0, 0.2)] == 5

    def test_failed_trials_excluded(self, monkeypatch):
        real = bench.uamp_sbl_run
        calls = {"n": 0}

        def flaky(instance, tuner, iters):
            calls["n"] += 1
            if calls["n"] % 2:
                raise NumericalError("boom", iteration=1, line=5)
            return real(instance, tuner, iters)

        monkeypatch.setattr(bench, "uamp_sbl_run", flaky)
        table = run_experiment(ExperimentSpec("uamp-sbl", "empirical", m=6, n=8, trials=4, iters=2))
        assert table.failed[(50.0, 0.1)] == 2
        assert table.failure_fraction()[(50.0, 0.1)] == 0.5

    def test_invalid_spec(self):
        with pytest.raises(ParameterError):
            run_experiment(ExperimentSpec("lasso"))
        with pytest.raises(ParameterError):
            run_experiment(ExperimentSpec(trials=0))
        with pytest.raises(ParameterError):
            run_experiment(ExperimentSpec(rho=()))


class TestCsv:
    def test_header_only(self, tmp_path):
        path = emit_csv(ResultTable(), tmp_path / "r.csv")
        assert path.read_bytes() == (",".join(CSV_HEADER) + "\n").encode()

    def test_round_trip_and_determinism(self, tmp_path):
        table = ResultTable([ResultRow(15.0, 0.1, 1, -12.3456789, "sbl", "empirical"),
                             ResultRow(15.0, 0.1, 50, -120.0, "sbl", "oracle")])
        a = emit_csv(table, tmp_path / "a.csv").read_bytes()
        b = emit_csv(table, tmp_path / "b.csv").read_bytes()
        assert a == b and b"\r" not in a
        back = read_csv(tmp_path / "a.csv")
        assert back.rows[0].nmse_db == -12.3457
        assert back.rows[1] == table.rows[1]

    def test_failure_footer(self, tmp_path):
        table = ResultTable([ResultRow(15.0, 0.1, 1, -3.0, "sbl", "empirical")], {(15.0, 0.1): 3}, {(15.0, 0.1): 10})
        text = emit_csv(table, tmp_path / "f.csv").read_text()
        assert text.splitlines()[-1] == "# failed_trials snr_db=15 rho=0.1 count=3 of 10"
        assert len(read_csv(tmp_path / "f.csv")) == 1

    def test_io_error_names_path(self, tmp_path):
        with pytest.raises(OSError, match="nope"):
            emit_csv(ResultTable(), tmp_path / "nope" / "r.csv")
