import numpy as np
import pytest

from errors import ComputationError, FormatError, ImageIOError, ParameterError, StateError
from tensor_core import (
    Adam,
    Graph,
    ParamSet,
    Tensor,
    add,
    affine_modulate,
    avg_pool,
    backward,
    conv2d,
    decode_checkpoint,
    double_precision,
    encode_checkpoint,
    feature_dropout,
    from_batch,
    fully_connected,
    global_avg_pool,
    gradcheck,
    instance_norm,
    l1_loss,
    leaky_relu,
    load_checkpoint,
    mse_loss,
    mul,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    reshape,
    to_batch,
)

GRAD_TOL = 1e-4


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


def target_like(t):
    return Tensor(np.random.default_rng(99).normal(size=t.shape))


class TestGradients:
    """Analytic gradients against central differences, in float64."""

    @pytest.mark.parametrize("kernel,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 1, 0)])
    def test_conv2d(self, rng, kernel, stride, padding):
        with double_precision():
            x = param(rng, 2, 3, 6, 6)
            w = param(rng, 4, 3, kernel, kernel, scale=0.3)
            b = param(rng, 4)
            target = target_like(conv2d(x, w, b, stride, padding))
            err = gradcheck(lambda x, w, b: mse_loss(conv2d(x, w, b, stride, padding), target), [x, w, b])
        assert err < GRAD_TOL

    def test_conv2d_without_bias(self, rng):
        with double_precision():
            x = param(rng, 1, 2, 5, 5)
            w = param(rng, 3, 2, 3, 3)
            err = gradcheck(lambda x, w: mse_loss(conv2d(x, w, None, 1, 1), Tensor(np.zeros((1, 3, 5, 5)))), [x, w])
        assert err < GRAD_TOL

    def test_activations(self, rng):
        with double_precision():
            # keep inputs away from the kink at zero
            data = rng.uniform(0.1, 1.0, size=(1, 2, 3, 3)) * rng.choice([-1, 1], size=(1, 2, 3, 3))
            x = Tensor(data, requires_grad=True)
            zeros = Tensor(np.ones((1, 2, 3, 3)))
            assert gradcheck(lambda x: mse_loss(relu(x), zeros), [x]) < GRAD_TOL
            assert gradcheck(lambda x: mse_loss(leaky_relu(x), zeros), [x]) < GRAD_TOL

    def test_pooling_and_norm(self, rng):
        with double_precision():
            x = param(rng, 2, 3, 4, 4)
            t_pool = Tensor(rng.normal(size=(2, 3, 2, 2)))
            t_gap = Tensor(rng.normal(size=(2, 3, 1, 1)))
            t_norm = Tensor(rng.normal(size=(2, 3, 4, 4)))
            assert gradcheck(lambda x: mse_loss(avg_pool(x), t_pool), [x]) < GRAD_TOL
            assert gradcheck(lambda x: mse_loss(global_avg_pool(x), t_gap), [x]) < GRAD_TOL
            assert gradcheck(lambda x: mse_loss(instance_norm(x), t_norm), [x]) < 1e-3

    def test_pixel_shuffle(self, rng):
        with double_precision():
            x = param(rng, 1, 8, 3, 3)
            t = Tensor(rng.normal(size=(1, 2, 6, 6)))
            assert gradcheck(lambda x: mse_loss(pixel_shuffle(x, 2), t), [x]) < GRAD_TOL

    @pytest.mark.parametrize("per_sample", [False, True])
    def test_affine_modulate(self, rng, per_sample):
        with double_precision():
            x = param(rng, 2, 3, 4, 4)
            shape = (2, 3) if per_sample else (3,)
            s, t = param(rng, *shape), param(rng, *shape)
            target = Tensor(rng.normal(size=(2, 3, 4, 4)))
            assert gradcheck(lambda x, s, t: mse_loss(affine_modulate(x, s, t), target), [x, s, t]) < GRAD_TOL

    def test_fully_connected_and_reshape(self, rng):
        with double_precision():
            v = param(rng, 2, 1, 1, 5)
            w, b = param(rng, 4, 5), param(rng, 4)
            target = Tensor(rng.normal(size=(2, 4)))
            err = gradcheck(lambda v, w, b: mse_loss(fully_connected(reshape(v, (2, 5)), w, b), target), [v, w, b])
        assert err < GRAD_TOL

    def test_add_mul_l1(self, rng):
        with double_precision():
            a, b = param(rng, 1, 2, 3, 3), param(rng, 1, 2, 3, 3)
            target = Tensor(rng.normal(size=(1, 2, 3, 3)) + 10.0)
            assert gradcheck(lambda a, b: l1_loss(add(mul(a, b), a), target, 2.0), [a, b]) < GRAD_TOL

    def test_shared_input_accumulates(self, rng):
        with double_precision():
            x = param(rng, 1, 1, 2, 2)
            assert gradcheck(lambda x: mse_loss(add(x, x), Tensor(np.zeros((1, 1, 2, 2)))), [x]) < GRAD_TOL


class TestGraph:
    def test_backward_twice_is_a_state_error(self, rng):
        x = param(rng, 1, 1, 2, 2)
        with Graph() as graph:
            loss = mse_loss(x, Tensor(np.zeros((1, 1, 2, 2))))
        backward(graph, loss)
        with pytest.raises(StateError):
            backward(graph, loss)
        graph.reset()
        with graph:
            loss = mse_loss(x, Tensor(np.zeros((1, 1, 2, 2))))
        backward(graph, loss)

    def test_ops_outside_a_graph_are_not_recorded(self, rng):
        x = param(rng, 1, 1, 2, 2)
        out = relu(x)
        with Graph() as graph:
            pass
        assert graph.nodes == []
        assert out.shape == (1, 1, 2, 2)

    def test_non_scalar_loss_rejected(self, rng):
        x = param(rng, 1, 1, 2, 2)
        with Graph() as graph:
            out = relu(x)
        with pytest.raises(ParameterError):
            backward(graph, out)

    def test_non_finite_input_raises(self):
        with pytest.raises(ComputationError):
            relu(Tensor(np.array([[[[np.nan]]]])))

    @pytest.mark.parametrize("call", [
        lambda: conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 3, 5, 5)))),
        lambda: conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3)))),
        lambda: conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 3, 3, 3))), stride=3),
        lambda: pixel_shuffle(Tensor(np.zeros((1, 6, 2, 2))), 2),
        lambda: avg_pool(Tensor(np.zeros((1, 1, 3, 3)))),
        lambda: add(Tensor(np.zeros(3)), Tensor(np.zeros(4))),
        lambda: instance_norm(Tensor(np.zeros((1, 1, 1, 1)))),
    ])
    def test_shape_errors(self, call):
        with pytest.raises(ParameterError):
            call()


class TestShapes:
    def test_pixel_unshuffle_inverts_shuffle(self, rng):
        arr = rng.normal(size=(2, 12, 3, 5))
        assert np.array_equal(pixel_unshuffle(pixel_shuffle(Tensor(arr, dtype=np.float64), 2).data, 2), arr)

    def test_batch_layout(self, rng):
        raster = rng.uniform(size=(4, 5, 3))
        t = to_batch(raster)
        assert t.shape == (1, 3, 4, 5)
        assert np.allclose(from_batch(t)[0], raster, atol=1e-6)

    def test_strided_conv_output_size(self):
        out = conv2d(Tensor(np.zeros((1, 3, 7, 8))), Tensor(np.zeros((2, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 2, 4, 4)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -3.0])
        Adam([p], lr=0.1).step()
        assert np.allclose(p.data, [0.9, -1.9], atol=1e-6)

    def test_minimises_quadratic(self, rng):
        p = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        target = Tensor(np.full((1, 1, 2, 2), 0.25))
        opt = Adam([p], lr=0.05)
        for _ in range(300):
            opt.zero_grad()
            with Graph() as graph:
                loss = mse_loss(p, target)
            backward(graph, loss)
            opt.step()
        assert np.allclose(p.data, 0.25, atol=1e-2)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        params = ParamSet()
        params.add("a.weight", rng.normal(size=(2, 3, 3, 3)))
        params.add("a.bias", np.zeros(2))
        params.save(tmp_path / "w.htvw")
        arrays = load_checkpoint(tmp_path / "w.htvw")
        assert list(arrays) == ["a.weight", "a.bias"]
        assert np.array_equal(arrays["a.weight"], params["a.weight"].data.astype(np.float32))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_checkpoint(b"NOPE" + bytes(20))

    def test_truncated(self, rng):
        blob = encode_checkpoint({"w": rng.normal(size=(4, 4))})
        with pytest.raises(ImageIOError):
            decode_checkpoint(blob[:-5])

    def test_load_state_dict_checks_names_and_shapes(self):
        params = ParamSet()
        params.add("w", np.zeros((2, 2)))
        with pytest.raises(ParameterError):
            params.load_state_dict({"v": np.zeros((2, 2))})
        with pytest.raises(ParameterError):
            params.load_state_dict({"w": np.zeros((3, 2))})


def conv_reference(x, w, b, stride, padding):
    """Direct nested-loop convolution."""
    n_batch, _, h, wd = x.shape
    out_ch, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = (h + 2 * padding - k) // stride + 1, (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n_batch, out_ch, ho, wo))
    for n in range(n_batch):
        for o in range(out_ch):
            for i in range(ho):
                for j in range(wo):
                    window = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = np.sum(window * w[o]) + b[o]
    return out


def away_from_zero(rng, *shape):
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1, 1], size=shape)


def conv_case(kernel, stride):
    def build(rng):
        x, w, b = param(rng, 1, 2, 6, 6), param(rng, 3, 2, kernel, kernel, scale=0.5), param(rng, 3)
        target = target_like(conv2d(x, w, b, stride, kernel // 2))
        return lambda x, w, b: mse_loss(conv2d(x, w, b, stride, kernel // 2), target), [x, w, b]
    return build


def activation_case(op):
    def build(rng):
        x = Tensor(away_from_zero(rng, 1, 2, 3, 3), requires_grad=True)
        target = Tensor(rng.normal(size=(1, 2, 3, 3)))
        return lambda x: mse_loss(op(x), target), [x]
    return build


def unary_case(op, out_shape, in_shape=(1, 2, 4, 4)):
    def build(rng):
        x = param(rng, *in_shape)
        target = Tensor(rng.normal(size=out_shape))
        return lambda x: mse_loss(op(x), target), [x]
    return build


def affine_case(rng):
    x, s, t = param(rng, 2, 3, 3, 3), param(rng, 2, 3), param(rng, 2, 3)
    target = Tensor(rng.normal(size=(2, 3, 3, 3)))
    return lambda x, s, t: mse_loss(affine_modulate(x, s, t), target), [x, s, t]


def fc_case(rng):
    v, w, b = param(rng, 2, 5), param(rng, 4, 5), param(rng, 4)
    target = Tensor(rng.normal(size=(2, 4)))
    return lambda v, w, b: mse_loss(fully_connected(v, w, b), target), [v, w, b]


def mse_case(rng):
    pred = param(rng, 1, 3, 4, 4)
    target = Tensor(rng.normal(size=(1, 3, 4, 4)))
    return lambda pred: mse_loss(pred, target), [pred]


def dropout_case(rng):
    x = param(rng, 2, 4, 3, 3)
    target = Tensor(rng.normal(size=(2, 4, 3, 3)))
    mask_seed = int(rng.integers(1 << 30))
    return lambda x: mse_loss(feature_dropout(x, 0.5, True, mask_seed), target), [x]


GRADIENT_CASES = {
    "conv1x1_s1": conv_case(1, 1),
    "conv1x1_s2": conv_case(1, 2),
    "conv3x3_s1": conv_case(3, 1),
    "conv3x3_s2": conv_case(3, 2),
    "relu": activation_case(relu),
    "leaky_relu": activation_case(leaky_relu),
    "avg_pool": unary_case(avg_pool, (1, 2, 2, 2)),
    "global_avg_pool": unary_case(global_avg_pool, (1, 2, 1, 1)),
    "instance_norm": unary_case(instance_norm, (1, 2, 4, 4)),
    "pixel_shuffle": unary_case(lambda x: pixel_shuffle(x, 2), (1, 1, 4, 4), in_shape=(1, 4, 2, 2)),
    "affine_modulate": affine_case,
    "fully_connected": fc_case,
    "mse": mse_case,
    "feature_dropout": dropout_case,
}


class TestGradientSweep:
    """Twenty random instances per op, float64 central differences."""

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("op", sorted(GRADIENT_CASES))
    def test_random_instances(self, op, seed):
        rng = np.random.default_rng([seed, 17])
        with double_precision():
            fn, tensors = GRADIENT_CASES[op](rng)
            assert gradcheck(fn, tensors) < 1e-3

    def test_leaky_relu_slope_below_zero(self):
        x = Tensor(np.array([[[[-1.0]]]]), requires_grad=True, dtype=np.float64)
        with Graph() as graph:
            loss = mse_loss(leaky_relu(x), Tensor(np.zeros((1, 1, 1, 1)), dtype=np.float64))
        backward(graph, loss)
        # d/dx (0.1 x)^2 at x = -1
        assert x.grad[0, 0, 0, 0] == pytest.approx(2 * 0.1 * -0.1)


class TestOpValues:
    @pytest.mark.parametrize("kernel,stride", [(1, 1), (1, 2), (3, 1), (3, 2)])
    def test_conv2d_matches_nested_loops(self, rng, kernel, stride):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, kernel, kernel))
        b = rng.normal(size=4)
        padding = kernel // 2
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                     stride, padding)
        assert np.allclose(out.data, conv_reference(x, w, b, stride, padding), atol=1e-10)

    def test_avg_pool_example(self):
        x = Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))
        assert avg_pool(x).data.reshape(-1).tolist() == [4.0]

    def test_instance_norm_statistics(self, rng):
        x = Tensor(rng.normal(2.0, 3.0, size=(2, 3, 8, 8)), dtype=np.float64)
        out = instance_norm(x).data
        assert np.allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-10)
        assert np.allclose(out.var(axis=(2, 3)), 1.0, atol=1e-5)

    def test_instance_norm_ignores_per_channel_affine_input(self, rng):
        x = rng.normal(size=(1, 3, 6, 6))
        scale = rng.uniform(1.0, 4.0, size=(1, 3, 1, 1))
        offset = rng.normal(0, 5, size=(1, 3, 1, 1))
        plain = instance_norm(Tensor(x, dtype=np.float64)).data
        moved = instance_norm(Tensor(x * scale + offset, dtype=np.float64)).data
        assert np.allclose(plain, moved, atol=1e-3)

    def test_one_by_one_conv_commutes_with_pixel_permutation(self, rng):
        x = rng.normal(size=(1, 5, 6, 7))
        w = Tensor(rng.normal(size=(4, 5, 1, 1)))
        b = Tensor(rng.normal(size=4))
        order = rng.permutation(6 * 7)
        shuffled = x.reshape(1, 5, -1)[:, :, order].reshape(x.shape)
        out = conv2d(Tensor(x), w, b).data.reshape(1, 4, -1)
        out_shuffled = conv2d(Tensor(shuffled), w, b).data.reshape(1, 4, -1)
        assert np.array_equal(out[:, :, order], out_shuffled)


class TestDropout:
    def test_identity_at_inference(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 3, 3)))
        assert feature_dropout(x, 0.5, training=False) is x

    def test_training_zeroes_and_rescales(self, rng):
        x = Tensor(np.ones((4, 16, 8, 8)), dtype=np.float64)
        out = feature_dropout(x, 0.5, training=True, rng_seed=3).data
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert 0.4 < np.mean(out == 0.0) < 0.6

    def test_mask_is_reproducible_from_seed(self, rng):
        x = Tensor(rng.normal(size=(1, 8, 4, 4)))
        a = feature_dropout(x, 0.5, training=True, rng_seed=11).data
        b = feature_dropout(x, 0.5, training=True, rng_seed=11).data
        c = feature_dropout(x, 0.5, training=True, rng_seed=12).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_bad_probability(self):
        with pytest.raises(ParameterError):
            feature_dropout(Tensor(np.zeros((1, 1, 2, 2))), 1.0, training=True)


def adam_scalar_reference(p, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        p -= lr * (m / (1 - beta1 ** t)) / ((v / (1 - beta2 ** t)) ** 0.5 + eps)
    return p


class TestAdamOracle:
    def test_three_steps_match_scalar_formula(self):
        grads = [0.5, -0.2, 0.1]
        p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        opt = Adam([p], lr=0.1)
        for g in grads:
            p.grad = np.array([g])
            opt.step()
        assert p.data[0] == pytest.approx(adam_scalar_reference(1.0, grads, 0.1), abs=1e-12)

    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([0.3, -1.2]), requires_grad=True, dtype=np.float64)
        opt = Adam([p], lr=0.5)
        for _ in range(3):
            opt.zero_grad()
            opt.step()
        assert p.data.tolist() == [0.3, -1.2]
