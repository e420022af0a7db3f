import numpy as np
import pytest

import esprune as ep
from esprune.arch import LayerSpec
from esprune.engine import EngineError, loss_and_grads, predict_scores, sgd_step, \
    softmax_cross_entropy
from esprune.engine import _conv_forward, _pool_forward

from oracles import brute_force_select, naive_conv2d, naive_forward, naive_pool


def fc_probe_arch(num_classes, in_shape):
    layers = (LayerSpec("fc", "fully_connected", ("input",), filters=num_classes),)
    return ep.ArchSpec(family="cnn", layers=layers, input_shape=in_shape,
                       num_classes=num_classes)


class TestForward:
    def test_identity_1x1_conv(self):
        layers = (LayerSpec("c", "conv", ("input",), filters=3, kernel=(1, 1)),)
        arch = ep.ArchSpec(family="cnn", layers=layers, input_shape=(3, 5, 5),
                           num_classes=2)
        model = ep.init_model(arch)
        model.weights["c"]["w"] = np.eye(3).reshape(3, 3, 1, 1)
        x = np.random.default_rng(0).random((2, 3, 5, 5))
        np.testing.assert_array_equal(ep.forward(model, x), x)

    def test_zero_weight_residual_block_is_identity_on_nonnegative_input(self):
        layers = (
            LayerSpec("c1", "conv", ("input",), filters=4, kernel=(3, 3), padding=1,
                      activation="relu", batch_norm=True),
            LayerSpec("c2", "conv", ("c1",), filters=4, kernel=(3, 3), padding=1,
                      activation="linear", batch_norm=True),
            LayerSpec("add", "residual_add", ("c2", "input"), activation="relu"),
        )
        arch = ep.ArchSpec(family="resnet", layers=layers, input_shape=(4, 6, 6),
                           num_classes=2)
        model = ep.init_model(arch, seed=0)
        model.weights["c1"]["w"][:] = 0.0
        model.weights["c2"]["w"][:] = 0.0
        x = np.random.default_rng(1).random((3, 4, 6, 6))  # nonnegative
        np.testing.assert_allclose(ep.forward(model, x), x, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,kernel", [(1, 1, 3), (2, 1, 3), (1, 0, 1),
                                                       (2, 0, 2), (1, 2, 5)])
    def test_conv_matches_naive_loops(self, stride, padding, kernel):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.standard_normal((2, 3, 9, 9))
        w = rng.standard_normal((4, 3, kernel, kernel))
        got, _ = _conv_forward(x, w, stride, padding)
        np.testing.assert_allclose(got, naive_conv2d(x, w, stride, padding), atol=1e-10)

    @pytest.mark.parametrize("mode", ["max", "avg"])
    @pytest.mark.parametrize("kernel,stride", [((2, 2), 2), ((1, 1), 2), ((3, 3), 1)])
    def test_pool_matches_naive_loops(self, mode, kernel, stride):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 8, 8))
        got, _ = _pool_forward(x, *kernel, stride, mode)
        np.testing.assert_allclose(got, naive_pool(x, *kernel, stride, mode), atol=1e-12)

    def test_whole_model_matches_naive_reference(self, tiny_models):
        rng = np.random.default_rng(3)
        for model in tiny_models.values():
            x = rng.random((4, *model.arch.input_shape))
            got = ep.forward(model, x)
            want = naive_forward(model.arch, model.weights, x)
            np.testing.assert_allclose(got, want, atol=1e-10)
            assert got.shape == (4, model.arch.num_classes)

    def test_shape_mismatch_is_an_error(self, tiny_models):
        with pytest.raises(EngineError, match="does not match input"):
            ep.forward(tiny_models["cnn"], np.zeros((1, 3, 9, 9)))


class TestLoss:
    def test_uniform_scores_give_log_num_classes(self):
        scores = np.zeros((6, 10))
        loss, _ = softmax_cross_entropy(scores, np.arange(6) % 10)
        assert loss == pytest.approx(np.log(10), rel=1e-12)

    def test_loss_is_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            scores = rng.standard_normal((5, 4)) * 10
            loss, _ = softmax_cross_entropy(scores, rng.integers(0, 4, 5))
            assert loss >= 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        scores = rng.standard_normal((3, 5))
        labels = rng.integers(0, 5, 3)
        _, grad = softmax_cross_entropy(scores, labels)
        for i in range(3):
            for j in range(5):
                h = 1e-6
                sp = scores.copy(); sp[i, j] += h
                sm = scores.copy(); sm[i, j] -= h
                num = (softmax_cross_entropy(sp, labels)[0]
                       - softmax_cross_entropy(sm, labels)[0]) / (2 * h)
                assert grad[i, j] == pytest.approx(num, abs=1e-6)


class TestGradients:
    def test_analytic_gradients_match_finite_differences(self, tiny_models):
        # every layer kind is exercised across the three families; the
        # acceptance suite repeats this exhaustively per parameter tensor
        rng = np.random.default_rng(5)
        for model in tiny_models.values():
            x = rng.standard_normal((4, *model.arch.input_shape))
            y = rng.integers(0, model.arch.num_classes, 4)
            _, grads = loss_and_grads(model, x, y)
            for lid, g in grads.items():
                for name, ga in g.items():
                    flat = model.weights[lid][name].reshape(-1)
                    for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                        h = 1e-5 * max(1.0, abs(flat[i]))
                        old = flat[i]
                        flat[i] = old + h
                        lp, _ = loss_and_grads(model, x, y)
                        flat[i] = old - h
                        lm, _ = loss_and_grads(model, x, y)
                        flat[i] = old
                        num = (lp - lm) / (2 * h)
                        ana = ga.reshape(-1)[i]
                        assert abs(num - ana) / max(abs(num), abs(ana), 1e-8) < 1e-4


class TestTrain:
    def test_zero_epochs_returns_model_unchanged(self, tiny_models, blob_data):
        model = tiny_models["cnn"]
        data = ep.synthetic(5, 10, 12, seed=0)
        out = ep.train(model, data, ep.TrainConfig(epochs=0, learning_rate=0.1))
        assert out is not model
        for lid, params in model.weights.items():
            for name, arr in params.items():
                assert np.array_equal(out.weights[lid][name], arr)

    def test_linearly_separable_two_class_set_reaches_low_error(self):
        data = ep.synthetic(2, 50, 8, seed=1)
        arch = ep.build_preset("tiny_cnn", num_classes=2, input_shape=(3, 8, 8))
        model = ep.train(ep.init_model(arch, seed=0), data,
                         ep.TrainConfig(epochs=20, learning_rate=0.1, seed=0))
        assert ep.error_rate(model, data) < 0.05

    def test_same_seed_gives_bit_identical_weights(self, tiny_models):
        data = ep.synthetic(5, 8, 12, seed=2)
        cfg = ep.TrainConfig(epochs=2, learning_rate=0.05, seed=7)
        a = ep.train(tiny_models["resnet"], data, cfg)
        b = ep.train(tiny_models["resnet"], data, cfg)
        for lid, params in a.weights.items():
            for name, arr in params.items():
                assert np.array_equal(arr, b.weights[lid][name])

    def test_sgd_step_is_exactly_minus_lr_times_gradient(self, tiny_models):
        model = ep.copy_model(tiny_models["cnn"])
        rng = np.random.default_rng(0)
        x = rng.random((4, *model.arch.input_shape))
        y = rng.integers(0, 5, 4)
        _, grads = loss_and_grads(model, x, y)
        before = {lid: {n: a.copy() for n, a in p.items()}
                  for lid, p in model.weights.items()}
        sgd_step(model, grads, 0.01)
        for lid, g in grads.items():
            for name, dv in g.items():
                np.testing.assert_array_equal(
                    model.weights[lid][name], before[lid][name] - 0.01 * dv)

    def test_non_finite_loss_aborts_with_diagnostic(self, tiny_models):
        model = ep.copy_model(tiny_models["cnn"])
        model.weights["conv3"]["w"][0, 0, 0, 0] = np.inf
        data = ep.synthetic(5, 8, 12, seed=3)
        with pytest.raises(EngineError, match=r"epoch 0, step 0.*conv3"):
            ep.train(model, data, ep.TrainConfig(epochs=1, learning_rate=0.1))


class TestErrorRate:
    def test_perfect_predictions_score_zero(self):
        # feed one-hot "images" straight into an identity FC head
        arch = fc_probe_arch(10, (10, 1, 1))
        model = ep.init_model(arch)
        model.weights["fc"]["w"] = np.eye(10)
        images = np.eye(10).reshape(10, 10, 1, 1)
        data = ep.Dataset(images, np.arange(10), 10)
        assert ep.error_rate(model, data) == 0.0

    def test_constant_scores_break_ties_to_class_zero(self):
        arch = fc_probe_arch(10, (4, 1, 1))
        model = ep.init_model(arch)
        model.weights["fc"]["w"] = np.zeros((10, 4))
        images = np.random.default_rng(0).random((50, 4, 1, 1))
        data = ep.Dataset(images, np.repeat(np.arange(10), 5), 10)
        assert ep.error_rate(model, data) == 0.9

    def test_matches_per_sample_argmax_oracle(self, tiny_models):
        data = ep.synthetic(5, 10, 12, seed=4)
        model = tiny_models["densenet"]
        scores = ep.forward(model, data.images)  # single batch: same BN statistics
        wrong = sum(int(np.argmax(s) != y) for s, y in zip(scores, data.labels))
        assert ep.error_rate(model, data) == wrong / len(data)

    def test_empty_dataset_is_an_error(self, tiny_models):
        empty = ep.Dataset(np.zeros((0, 3, 12, 12)), np.zeros(0, dtype=int), 5)
        with pytest.raises(EngineError, match="empty"):
            ep.error_rate(tiny_models["cnn"], empty)


class TestSerialization:
    def test_round_trip_is_bit_exact(self, tiny_models, tmp_path):
        for fam, model in tiny_models.items():
            out = tmp_path / fam
            ep.save_model(model, out)
            loaded = ep.load_model(out)
            assert loaded.arch == model.arch
            for lid, params in model.weights.items():
                for name, arr in params.items():
                    assert np.array_equal(loaded.weights[lid][name], arr)
                    assert loaded.weights[lid][name].dtype == arr.dtype

    def test_float32_round_trip(self, tiny_archs, tmp_path):
        model = ep.init_model(tiny_archs["cnn"], seed=1, dtype=np.float32)
        ep.save_model(model, tmp_path / "m")
        loaded = ep.load_model(tmp_path / "m")
        assert loaded.dtype == np.float32
        np.testing.assert_array_equal(loaded.weights["conv1"]["w"],
                                      model.weights["conv1"]["w"])

    def test_tampered_blob_is_detected(self, tiny_models, tmp_path):
        ep.save_model(tiny_models["cnn"], tmp_path / "m")
        blob = bytearray((tmp_path / "m" / "weights.bin").read_bytes())
        blob[10] ^= 0xFF
        (tmp_path / "m" / "weights.bin").write_bytes(bytes(blob))
        with pytest.raises(EngineError, match="checksum"):
            ep.load_model(tmp_path / "m")

    def test_scores_survive_round_trip(self, tiny_models, tmp_path):
        model = tiny_models["resnet"]
        ep.save_model(model, tmp_path / "m")
        loaded = ep.load_model(tmp_path / "m")
        x = np.random.default_rng(2).random((3, *model.arch.input_shape))
        np.testing.assert_array_equal(ep.forward(loaded, x), ep.forward(model, x))
