import numpy as np
import pytest

from oracles import untied_autograd_grads
from sbltune import unroll
from sbltune.errors import ParameterError, TapeError, TrainingError
from sbltune.problem import DatasetSpec, gen_dataset, gen_instance
from sbltune.tuners import INPUT_TRANSFORMS, FixedTuner, NeuralTuner, NnTunerParams, load_tuner
from sbltune.uamp import uamp_sbl_run
from sbltune.unroll import (
    AdamState,
    GradientBundle,
    TrainConfig,
    _ModelBank,
    adam_step,
    evaluate_loss,
    finite_difference_gradient,
    grad_check,
    grad_check_problem,
    init_params,
    loss_and_grad,
    mse_loss,
    relative_error,
    stack_models,
    train,
    unrolled_backward,
    unrolled_forward,
)


def bundle_of(grads: dict):
    return np.concatenate([grads["w"].ravel(), grads["b"], grads["alpha"], [grads["d"]]])


class TestLoss:
    def test_examples(self):
        x = np.array([[0.3, -1.0]])
        assert mse_loss(x, x) == 0.0
        assert mse_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])) == 1.0
        r = np.random.default_rng(0)
        a, b = r.standard_normal((4, 3)), r.standard_normal((4, 3))
        assert mse_loss(np.vstack([a, a]), np.vstack([b, b])) == pytest.approx(mse_loss(a, b), rel=1e-15)

    def test_errors(self):
        with pytest.raises(ParameterError):
            mse_loss(np.zeros((0, 3)), np.zeros((0, 3)))
        with pytest.raises(ParameterError):
            mse_loss(np.zeros((2, 3)), np.zeros((2, 4)))


class TestForward:
    def test_matches_runner_exactly(self):
        inst = gen_instance(12, 16, 0.2, 20.0, seed=1)
        params = init_params(16, 8, np.random.default_rng(2))
        x_hat, tape = unrolled_forward(inst, params, 7)
        np.testing.assert_array_equal(x_hat, uamp_sbl_run(inst, NeuralTuner(params), 7).x_hat)
        assert len(tape.nn_caches) == 7 and len(tape.states) == 8

    def test_zero_network_matches_fixed_zero(self):
        inst = gen_instance(12, 16, 0.2, 20.0, seed=3)
        x_hat, _ = unrolled_forward(inst, NnTunerParams.zeros(16, 5), 10)
        fixed = uamp_sbl_run(inst, FixedTuner(0.0), 10).x_hat
        np.testing.assert_allclose(x_hat, fixed, rtol=0, atol=1e-12)

    def test_batched_matches_single(self):
        insts = [gen_instance(6, 8, 0.4, 20.0, seed=s) for s in range(3)]
        params = init_params(8, 4, np.random.default_rng(0))
        batch, _ = unrolled_forward(insts, params, 5)
        for k, inst in enumerate(insts):
            np.testing.assert_allclose(batch[k], unrolled_forward(inst, params, 5)[0], rtol=1e-13, atol=1e-15)

    def test_dimension_check(self):
        with pytest.raises(ParameterError):
            unrolled_forward(gen_instance(6, 8, 0.4, 20.0, seed=0), NnTunerParams.zeros(9, 2), 3)
        with pytest.raises(ParameterError):
            unrolled_forward(gen_instance(6, 8, 0.4, 20.0, seed=0), NnTunerParams.zeros(8, 2), 0)


class TestBackward:
    @pytest.mark.parametrize("iters", [1, 2])
    def test_no_tuner_influence_gives_zero(self, iters):
        # the tuner output of the last two layers never reaches the final x_hat
        inst, params = grad_check_problem(0)
        _, grads = loss_and_grad(inst, inst.x_true, params, iters)
        assert np.all(grads.to_vector() == 0.0)

    @pytest.mark.parametrize("transform", INPUT_TRANSFORMS)
    @pytest.mark.parametrize("output", ["clamp", "affine"])
    def test_matches_finite_differences(self, transform, output):
        report = grad_check(seeds=3, transform=transform, output=output)
        assert report.max_rel_err < 1e-5, report

    def test_finite_differences_deeper_and_batched(self):
        insts = [gen_instance(6, 8, 0.4, 20.0, seed=s) for s in range(3)]
        _, params = grad_check_problem(1)
        x_true = np.stack([i.x_true for i in insts])
        model = stack_models(insts)
        _, grads = loss_and_grad(model, x_true, params, 6)
        fd = finite_difference_gradient(model, x_true, params, 6)
        assert relative_error(grads.to_vector(), fd).max() < 1e-5

    @pytest.mark.parametrize("iters", [3, 6, 10])
    def test_tied_equals_sum_of_untied(self, iters):
        pytest.importorskip("torch")
        for seed in range(3):
            inst, params = grad_check_problem(seed)
            _, tape = unrolled_forward(inst, params, iters)
            tied = unrolled_backward(tape, inst.x_true, params).to_vector()
            per_layer = unrolled_backward(tape, inst.x_true, params, per_layer=True)
            reference = untied_autograd_grads(tape.model.phi, tape.model.r, tape.model.lambda_vec,
                                              inst.x_true, params, iters)
            assert len(per_layer) == iters
            for ours, ref in zip(per_layer, reference):
                np.testing.assert_allclose(ours.to_vector(), bundle_of(ref), rtol=0, atol=1e-10)
            np.testing.assert_allclose(tied, sum(bundle_of(r) for r in reference), rtol=0, atol=1e-10)
            np.testing.assert_allclose(tied, sum(b.to_vector() for b in per_layer), rtol=0, atol=1e-12)

    def test_incomplete_tape(self):
        inst, params = grad_check_problem(0)
        _, tape = unrolled_forward(inst, params, 3, record=False)
        with pytest.raises(TapeError):
            unrolled_backward(tape, inst.x_true, params)
        _, tape = unrolled_forward(inst, params, 3)
        tape.nn_caches.pop()
        with pytest.raises(TapeError):
            unrolled_backward(tape, inst.x_true, params)
        _, tape = unrolled_forward(inst, params, 3)
        with pytest.raises(TapeError):
            unrolled_backward(tape, inst.x_true[:-1], params)

    def test_bundle_arithmetic(self):
        a = GradientBundle(np.ones((2, 3)), np.ones(2), np.ones(2), 1.0)
        b = (a + a).scaled(0.25)
        np.testing.assert_array_equal(b.to_vector(), np.full(11, 0.5))
        assert b.is_finite()


class TestAdam:
    def test_zero_gradient(self):
        params = NnTunerParams(np.ones((2, 3)), np.ones(2), np.ones(2), 1.0)
        state = AdamState(np.full(11, 0.5), np.full(11, 0.25), 3)
        zero = GradientBundle(np.zeros((2, 3)), np.zeros(2), np.zeros(2), 0.0)
        new, st = adam_step(params, zero, state)
        assert st.step == 4
        np.testing.assert_allclose(st.m, 0.45)
        np.testing.assert_allclose(st.v, 0.25 * 0.999)
        # non-zero moments still move the parameters; the raw gradient adds nothing
        m_hat, v_hat = 0.45 / (1 - 0.9 ** 4), 0.25 * 0.999 / (1 - 0.999 ** 4)
        np.testing.assert_allclose(new.to_vector(), 1 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8))
        fresh, _ = adam_step(params, zero, AdamState.zeros(params))
        assert fresh == params

    def test_first_step(self):
        g = np.array([0.3, -2.0, 1e-3, 5.0, 0.0, 0.1, -0.1, 7.0, 1.0, -1.0, 0.5])
        params = NnTunerParams.zeros(3, 2)
        grads = GradientBundle(g[:6].reshape(2, 3), g[6:8], g[8:10], g[10])
        new, st = adam_step(params, grads, AdamState.zeros(params), lr=0.01)
        np.testing.assert_allclose(new.to_vector(), -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_constant_gradient_step_tends_to_lr(self):
        params = NnTunerParams.zeros(1, 1)
        grads = GradientBundle(np.array([[0.7]]), np.array([0.7]), np.array([0.7]), 0.7)
        state = AdamState.zeros(params)
        for _ in range(2000):
            new, state = adam_step(params, grads, state, lr=0.01)
            step = params.to_vector() - new.to_vector()
            params = new
        np.testing.assert_allclose(step, 0.01, rtol=1e-6)

    def test_shape_check(self):
        params = NnTunerParams.zeros(3, 2)
        bad = GradientBundle(np.zeros((2, 2)), np.zeros(2), np.zeros(2), 0.0)
        with pytest.raises(ParameterError):
            adam_step(params, bad, AdamState.zeros(params))


class TestInit:
    def test_glorot(self):
        p = init_params(100, 256, np.random.default_rng(0))
        bound = np.sqrt(6 / (100 + 256))
        assert bound == pytest.approx(0.1298, abs=1e-4)
        assert np.all(np.abs(p.w) <= bound)
        assert np.abs(p.w).max() > 0.99 * bound
        assert np.all(np.abs(p.alpha) <= np.sqrt(6 / 257))
        assert np.all(p.b == 0) and p.d == 0.0

    def test_deterministic(self):
        assert init_params(5, 3, np.random.default_rng(4)) == init_params(5, 3, np.random.default_rng(4))


@pytest.fixture(scope="module")
def tiny_dataset():
    return gen_dataset(DatasetSpec(m=6, n=8, total_count=100, seed=1))


class TestTrain:
    def test_history_and_checkpoint(self, tiny_dataset, tmp_path):
        config = TrainConfig(unroll_iters=4, batch_size=8, epochs=3, l_hidden=6, seed=2)
        ckpt = tmp_path / "best.sbnn"
        params, hist = train(tiny_dataset, config, checkpoint_path=ckpt)
        assert len(hist) == 3
        assert hist.best_val_loss == min([hist.initial_val_loss] + hist.val_losses)
        bank = _ModelBank(tiny_dataset.subset("validation"))
        assert evaluate_loss(bank, params, config) == pytest.approx(hist.best_val_loss, rel=1e-12)
        if hist.best_epoch > 0:
            tuner = load_tuner(ckpt)
            assert tuner.params == params and tuner.transform == config.input_transform
        hist.to_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 4

    def test_deterministic(self, tiny_dataset):
        config = TrainConfig(unroll_iters=4, batch_size=8, epochs=2, l_hidden=6, seed=5)
        p1, h1 = train(tiny_dataset, config)
        p2, h2 = train(tiny_dataset, config)
        assert p1 == p2 and h1.rows == h2.rows

    def test_batch_larger_than_split(self, tiny_dataset):
        with pytest.raises(ParameterError):
            train(tiny_dataset, TrainConfig(batch_size=1000, epochs=1))

    def test_divergence(self, tiny_dataset, monkeypatch):
        def broken(*args, **kwargs):
            return float("nan"), GradientBundle(np.zeros((6, 8)), np.zeros(6), np.zeros(6), 0.0)

        monkeypatch.setattr(unroll, "loss_and_grad", broken)
        with pytest.raises(TrainingError) as err:
            train(tiny_dataset, TrainConfig(unroll_iters=3, batch_size=8, epochs=2, l_hidden=6))
        assert (err.value.epoch, err.value.batch) == (1, 0)

    def test_training_reduces_validation_loss(self):
        ds = gen_dataset(DatasetSpec(m=40, n=50, total_count=2000, seed=0))
        config = TrainConfig(unroll_iters=20, epochs=20, seed=0)
        _, hist = train(ds, config)
        assert hist.best_val_loss < hist.initial_val_loss
