import numpy as np
import pytest

from rose_ood.autodiff import (
    Network,
    backward_per_sample,
    col2im,
    conv2d_spec,
    dense_spec,
    grad_check,
    im2col,
    relu_spec,
    reshape_spec,
    sum_of_squares_loss,
)
from rose_ood.errors import AutodiffError, ShapeError
from rose_ood.tensor import Rng


def toy_encoder():
    conv1 = conv2d_spec("conv1", (1, 6, 6), 2, kernel=3, padding=1, has_bias=True)
    conv2 = conv2d_spec("conv2", conv1.out_shape, 3, kernel=3, stride=2, padding=1)
    features = int(np.prod(conv2.out_shape))
    specs = [
        conv1,
        relu_spec("relu1", conv1.out_shape),
        conv2,
        relu_spec("relu2", conv2.out_shape),
        reshape_spec("flatten", conv2.out_shape, (features,)),
        dense_spec("dense", features, 4),
    ]
    return Network.from_specs(specs, Rng(0))


@pytest.fixture
def inputs():
    return np.random.default_rng(1).uniform(0.0, 1.0, (3, 1, 6, 6))


def test_finite_difference_over_every_parameter(float64, inputs):
    net = toy_encoder()
    report = grad_check(net, inputs, tolerance=1e-4)
    assert report.n_checked == sum(v.size for v in net.parameters().values())
    assert report.passed, f"{report.worst_parameter}: {report.max_rel_error:.3e}"


def test_per_sample_gradients_match_single_sample_backward(float64, inputs):
    net = toy_encoder()
    tape = net.forward(inputs)
    _, grad_out = sum_of_squares_loss(tape.output)
    sets = backward_per_sample(net, tape, grad_out, layers=["conv1", "conv2", "dense"])

    for row in range(inputs.shape[0]):
        single = net.forward(inputs[row : row + 1])
        _, g = sum_of_squares_loss(single.output)
        params = net.backward(single, g).params
        np.testing.assert_allclose(sets[row]["conv2"].grad, params["conv2"]["weight"], rtol=1e-10, atol=1e-12)
        # Bias gradients ride in the trailing homogeneous column.
        np.testing.assert_allclose(sets[row]["conv1"].grad[:, :-1], params["conv1"]["weight"], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(sets[row]["conv1"].grad[:, -1], params["conv1"]["bias"], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(sets[row]["dense"].grad[:, :-1], params["dense"]["weight"], rtol=1e-10, atol=1e-12)


def test_captured_statistics_contract_to_gradient(float64, inputs):
    net = toy_encoder()
    tape = net.forward(inputs)
    _, grad_out = sum_of_squares_loss(tape.output)
    for gs in backward_per_sample(net, tape, grad_out):
        for g in gs.layers.values():
            np.testing.assert_allclose(g.grad, g.delta.T @ g.h, rtol=1e-12, atol=1e-14)


def test_backward_counts_samples(float64, inputs):
    net = toy_encoder()
    tape = net.forward(inputs)
    net.backward(tape, np.ones_like(tape.output))
    assert net.samples_backpropagated == inputs.shape[0]


def test_backward_without_forward():
    net = toy_encoder()
    with pytest.raises(AutodiffError):
        net.backward(None, np.zeros((1, 4)))


def test_capture_of_unparameterized_layer(inputs):
    net = toy_encoder()
    tape = net.forward(inputs.astype(np.float32))
    with pytest.raises(AutodiffError):
        net.backward(tape, np.ones_like(tape.output), capture=["relu1"])


def test_shape_mismatch_between_layers():
    with pytest.raises(ShapeError):
        Network.from_specs([dense_spec("a", 3, 4), dense_spec("b", 5, 2)])


def test_conv_that_does_not_fit():
    with pytest.raises(ShapeError):
        conv2d_spec("c", (1, 2, 2), 1, kernel=5)


def test_col2im_is_adjoint_of_im2col(float64):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 7, 7))
    cols = im2col(x, kernel=3, stride=2, padding=1)
    y = rng.standard_normal(cols.shape)
    back = col2im(y, x.shape, kernel=3, stride=2, padding=1, out_hw=(4, 4))
    assert np.sum(cols * y) == pytest.approx(np.sum(x * back), rel=1e-12)


def test_conv_forward_matches_direct_sliding_window(float64):
    spec = conv2d_spec("conv", (2, 5, 5), 3, kernel=3, stride=2, padding=1, has_bias=True)
    net = Network.from_specs([spec], Rng(4))
    layer = net.layer("conv")
    layer.params["bias"] = np.array([0.1, -0.2, 0.3])
    x = np.random.default_rng(5).standard_normal((2, 2, 5, 5))

    kernel = layer.params["weight"].reshape(3, 2, 3, 3)
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    q, out_h, out_w = spec.out_shape
    expected = np.empty((2, q, out_h, out_w))
    for n in range(2):
        for o in range(q):
            for i in range(out_h):
                for j in range(out_w):
                    window = padded[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    expected[n, o, i, j] = np.sum(window * kernel[o]) + layer.params["bias"][o]

    assert (out_h, out_w) == (3, 3)
    np.testing.assert_allclose(net.forward(x).output, expected, rtol=1e-12, atol=1e-12)


def test_grad_check_flags_a_corrupted_gradient(float64, inputs):
    net = toy_encoder()
    tape = net.forward(inputs)
    _, grad_out = sum_of_squares_loss(tape.output)
    result = net.backward(tape, grad_out)
    analytic = {f"{layer}.{key}": value.copy() for layer, grads in result.params.items() for key, value in grads.items()}
    assert grad_check(net, inputs, tolerance=1e-4, analytic=analytic).passed

    analytic["conv2.weight"] = analytic["conv2.weight"] * 1.05
    report = grad_check(net, inputs, tolerance=1e-4, analytic=analytic)
    assert not report.passed
    assert report.worst_parameter == "conv2.weight"
    assert report.max_rel_error > 1e-2
