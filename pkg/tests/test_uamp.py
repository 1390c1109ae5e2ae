import numpy as np
import pytest

from sbltune.errors import NumericalError, ParameterError
from sbltune.problem import gen_instance
from sbltune.tuners import FixedTuner, Tuner
from sbltune.uamp import (
    UnitaryModel,
    message_passing,
    uamp_init,
    uamp_sbl_iterate,
    uamp_sbl_run,
    unitary_transform,
)


class TestUnitaryTransform:
    def test_identity(self):
        y = np.array([1.0, -2.0, 0.5])
        model = unitary_transform(np.eye(3), y)
        np.testing.assert_allclose(model.lambda_vec, np.ones(3), rtol=1e-15)
        assert np.linalg.norm(model.r) == pytest.approx(np.linalg.norm(y), rel=1e-14)
        np.testing.assert_allclose(np.abs(model.phi), np.eye(3), atol=1e-15)

    def test_diagonal(self):
        model = unitary_transform(np.diag([3.0, 2.0]), np.ones(2))
        np.testing.assert_allclose(model.lambda_vec, [9.0, 4.0], rtol=1e-14)

    def test_gram_invariance(self):
        r = np.random.default_rng(0)
        a, y = r.standard_normal((80, 100)), r.standard_normal(80)
        model = unitary_transform(a, y)
        gram = a.T @ a
        assert np.linalg.norm(model.phi.T @ model.phi - gram) / np.linalg.norm(gram) < 1e-10
        assert np.linalg.norm(model.phi) == pytest.approx(np.linalg.norm(a), rel=1e-10)
        assert np.linalg.norm(model.r) == pytest.approx(np.linalg.norm(y), rel=1e-10)
        assert np.all(model.lambda_vec >= 0)
        assert np.all(np.diff(model.lambda_vec) <= 0)

    def test_tall_matrix_pads_zeros(self):
        a = np.random.default_rng(1).standard_normal((5, 3))
        model = unitary_transform(a, np.ones(5))
        assert model.lambda_vec.shape == (5,)
        np.testing.assert_array_equal(model.lambda_vec[3:], 0.0)
        np.testing.assert_allclose(np.sort(model.lambda_vec[:3]), np.sort(np.linalg.eigvalsh(a.T @ a)), rtol=1e-12)

    def test_zero_matrix(self):
        with pytest.raises(ParameterError):
            unitary_transform(np.zeros((2, 2)), np.ones(2))

    def test_batched(self):
        r = np.random.default_rng(2)
        a, y = r.standard_normal((3, 4, 6)), r.standard_normal((3, 4))
        batch = unitary_transform(a, y)
        for k in range(3):
            one = unitary_transform(a[k], y[k])
            np.testing.assert_allclose(batch.lambda_vec[k], one.lambda_vec, rtol=1e-13)


class TestIteration:
    def test_first_lines(self):
        r = np.random.default_rng(3)
        model = unitary_transform(r.standard_normal((5, 7)), r.standard_normal(5))
        lines = message_passing(uamp_init(7, 5), model)
        np.testing.assert_array_equal(lines["tau_p"], model.lambda_vec)
        np.testing.assert_array_equal(lines["p"], np.zeros(5))

    def test_scalar_case(self):
        model = UnitaryModel(np.array([[1.0]]), np.array([1.0]), np.array([1.0]))
        lines = message_passing(uamp_init(1, 1), model)
        assert lines["v_h"][0] == pytest.approx(0.5)
        assert lines["h"][0] == pytest.approx(0.5)
        assert lines["beta_hat"] == pytest.approx(4.0 / 3.0)

    def test_line12_with_zero_epsilon(self):
        r = np.random.default_rng(4)
        model = unitary_transform(r.standard_normal((5, 7)), r.standard_normal(5))
        state = uamp_init(7, 5, epsilon0=0.0)
        lines = message_passing(state, model)
        np.testing.assert_allclose(lines["gamma_hat"], 1.0 / (lines["x_hat"] ** 2 + lines["tau_x"]), rtol=1e-15)

    def test_lines_against_hand_recursion(self):
        r = np.random.default_rng(5)
        a, y = r.standard_normal((4, 6)), r.standard_normal(4)
        u, sv, _ = np.linalg.svd(a)
        phi, rr = u.T @ a, u.T @ y
        lam = np.zeros(4)
        lam[:4] = sv ** 2
        tau_x, x, s, beta, gamma, eps = 1.0, np.zeros(6), np.zeros(4), 1.0, np.ones(6), 1e-3
        state = uamp_init(6, 4)
        model = unitary_transform(a, y)
        tuner = FixedTuner(0.3)
        for _ in range(4):
            tau_p = tau_x * lam
            p = phi @ x - tau_p * s
            v_h = tau_p / (1 + beta * tau_p)
            h = (beta * tau_p * rr + p) / (1 + beta * tau_p)
            beta = 4 / (np.sum((rr - h) ** 2) + np.sum(v_h))
            tau_s = 1 / (tau_p + 1 / beta)
            s = tau_s * (rr - p)
            tau_q = 6 / (lam @ tau_s)
            q = x + tau_q * phi.T @ s
            tau_x = tau_q / 6 * np.sum(1 / (1 + tau_q * gamma))
            x = q / (1 + tau_q * gamma)
            gamma = (2 * eps + 1) / (x ** 2 + tau_x)
            eps = 0.3
            state = uamp_sbl_iterate(state, model, tuner)
            np.testing.assert_allclose(state.x_hat, x, rtol=1e-10, atol=1e-13)
            assert state.beta_hat == pytest.approx(beta, rel=1e-10)
            np.testing.assert_allclose(state.gamma_hat, gamma, rtol=1e-10)

    def test_line_tag_on_failure(self):
        model = UnitaryModel(np.eye(2), np.ones(2), np.ones(2))
        state = uamp_init(2, 2)
        state.tau_x = np.array(np.inf)
        with pytest.raises(NumericalError) as err:
            message_passing(state, model)
        assert err.value.line == 1 and err.value.iteration == 1

    def test_tuner_non_finite(self):
        class Bad(Tuner):
            def __call__(self, gamma):
                return float("nan")

        model = unitary_transform(np.eye(2), np.ones(2))
        with pytest.raises(NumericalError) as err:
            uamp_sbl_iterate(uamp_init(2, 2), model, Bad())
        assert err.value.line == 13


class TestRun:
    def test_single_iteration(self):
        res = uamp_sbl_run(gen_instance(6, 8, 0.3, 20.0, seed=0), "empirical", iters=1)
        assert res.iterations_run == 1 == len(res.epsilon_trace) == len(res.beta_trace)
        with pytest.raises(ParameterError):
            uamp_sbl_run(gen_instance(6, 8, 0.3, 20.0, seed=0), "empirical", iters=0)

    def test_fixed_trace(self):
        res = uamp_sbl_run(gen_instance(20, 30, 0.2, 20.0, seed=1), "fixed:0.01", iters=15)
        assert res.epsilon_trace == [0.01] * 15

    def test_beta_estimate_consistent(self):
        ratios = []
        for seed in range(100):
            inst = gen_instance(80, 100, 0.1, 15.0, seed=seed)
            ratios.append(uamp_sbl_run(inst, "empirical").beta_trace[-1] / inst.beta_true)
        assert 0.5 <= np.mean(ratios) <= 2.0

    def test_permutation_equivariance(self):
        inst = gen_instance(40, 50, 0.1, 30.0, "corr:0.1", seed=2)
        perm = np.random.default_rng(3).permutation(50)
        base = uamp_sbl_run(inst, "empirical").x_hat
        inst.a = inst.a[:, perm]
        inst.x_true = inst.x_true[perm]
        permuted = uamp_sbl_run(inst, "empirical").x_hat
        assert np.max(np.abs(permuted - base[perm])) <= 1e-8

    def test_gamma_stays_positive(self):
        for seed in range(20):
            inst = gen_instance(15, 20, 0.3, 10.0 + 2 * seed, seed=seed)
            model = unitary_transform(inst.a, inst.y)
            state = uamp_init(20, 15)
            for _ in range(50):
                state = uamp_sbl_iterate(state, model, FixedTuner(-0.4))
                assert np.all(state.gamma_hat > 0) and state.tau_x > 0 and state.beta_hat > 0
