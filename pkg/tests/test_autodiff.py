import numpy as np
import pytest

from msaseg.autodiff import Tape, TapeError, backward, finite_diff_check, relative_error
from msaseg.losses import cross_entropy
from msaseg.tensor import Conv2dSpec, Tensor
from msaseg.train import RunConfig, gradcheck

F64 = np.float64


def t64(a):
    return Tensor(a, dtype=F64)


def test_sigmoid_gradient_at_zero():
    tape = Tape()
    x = tape.param("x", t64([0.0]))
    y = tape.sigmoid(x)
    assert backward(tape, y)["x"].item() == 0.25


def test_product_rule():
    tape = Tape()
    a = tape.param("a", t64([2.0, -3.0]))
    b = tape.param("b", t64([5.0, 7.0]))
    grads = backward(tape, tape.sum(tape.mul(a, b)))
    np.testing.assert_array_equal(grads["a"].data, [5.0, 7.0])
    np.testing.assert_array_equal(grads["b"].data, [2.0, -3.0])


def test_sum_of_params_gives_unit_gradients():
    tape = Tape()
    p = tape.param("p", t64(np.random.default_rng(0).standard_normal((2, 3))))
    q = tape.param("q", t64([1.5]))
    loss = tape.add(tape.sum(p), tape.sum(q))
    grads = backward(tape, loss)
    assert np.all(grads["p"].data == 1.0) and grads["q"].item() == 1.0


def test_zero_times_anything_and_unused_params():
    tape = Tape()
    p = tape.param("p", t64(np.arange(4.0).reshape(1, 1, 2, 2)))
    tape.param("unused", t64(np.ones(3)))
    loss = tape.scale(tape.sum(tape.sigmoid(p)), 0.0)
    grads = backward(tape, loss)
    assert np.all(grads["p"].data == 0.0)
    assert grads["unused"].shape == (3,) and np.all(grads["unused"].data == 0.0)


def test_fan_out_accumulates():
    tape = Tape()
    x = tape.param("x", t64([3.0]))
    loss = tape.sum(tape.add(tape.mul(x, x), x))
    assert backward(tape, loss)["x"].item() == 7.0


def test_non_scalar_loss_rejected():
    tape = Tape()
    x = tape.param("x", t64([1.0, 2.0]))
    with pytest.raises(TapeError, match="scalar"):
        backward(tape, tape.sigmoid(x))


def test_input_from_another_tape_rejected():
    other = Tape().param("x", t64([1.0]))
    with pytest.raises(TapeError, match="not a node on this tape"):
        Tape().sigmoid(other)


def test_duplicate_param_name_rejected():
    tape = Tape()
    tape.param("x", t64([1.0]))
    with pytest.raises(TapeError):
        tape.param("x", t64([1.0]))


def test_record_custom_op():
    tape = Tape()
    x = tape.param("x", t64([2.0]))
    y = tape.record("cube", [x], t64(x.value.data ** 3), lambda g: (g * 3 * x.value.data ** 2,))
    assert y.op == "cube" and tape.op_sequence() == ["cube"]
    assert backward(tape, y)["x"].item() == 12.0


def test_conv_softmax_chain_gradients_finite():
    rng = np.random.default_rng(0)
    params = {"w": Tensor(rng.standard_normal((3, 2, 3, 3))), "b": Tensor(np.zeros(3))}
    x = Tensor(rng.standard_normal((1, 2, 6, 6)))
    tape = Tape()
    w, b = tape.param("w", params["w"]), tape.param("b", params["b"])
    spec = Conv2dSpec(2, 3, 3, padding=2, dilation=2)
    y = tape.softmax_channels(tape.conv2d(tape.constant(x), w, b, spec))
    mask = tape.constant(Tensor(rng.standard_normal(y.shape)))
    grads = backward(tape, tape.sum(tape.mul(y, mask)))
    assert all(np.all(np.isfinite(g.data)) for g in grads.values())


# -- per-op central-difference checks (64-bit) --------------------------------

def _check_op(build, shapes, seed=0, tol=1e-6, samples=40, positive=False):
    rng = np.random.default_rng(seed)
    params = {}
    for k, shape in enumerate(shapes):
        v = rng.standard_normal(shape)
        params[f"in{k}"] = t64(np.abs(v) + 0.5 if positive else v)
    mix_shape = None

    def forward(p):
        nonlocal mix_shape
        tape = Tape()
        nodes = [tape.param(f"in{k}", p[f"in{k}"]) for k in range(len(shapes))]
        out = build(tape, *nodes)
        if mix_shape is None:
            mix_shape = out.shape
        # random projection so every output coordinate matters
        weights = tape.constant(t64(np.random.default_rng(99).standard_normal(mix_shape)))
        return tape, tape.sum(tape.mul(out, weights))

    report = finite_diff_check(forward, params, epsilon=1e-6, sample_count=samples, seed=seed)
    assert report.max_rel_err < tol, report.entries


OP_CASES = {
    "conv2d": (lambda t, x, w, b: t.conv2d(x, w, b, Conv2dSpec(2, 3, 3, padding=1)), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_dilated_strided": (lambda t, x, w: t.conv2d(x, w, None, Conv2dSpec(2, 2, 3, 2, 3, 3)), [(1, 2, 7, 8), (2, 2, 3, 3)]),
    "conv2d_1x1": (lambda t, x, w, b: t.conv2d(x, w, b, Conv2dSpec(3, 2, 1)), [(2, 3, 4, 4), (2, 3, 1, 1), (2,)]),
    "resize_up": (lambda t, x: t.bilinear_resize(x, 7, 9), [(1, 2, 3, 4)]),
    "resize_down": (lambda t, x: t.bilinear_resize(x, 2, 3), [(2, 1, 8, 8)]),
    "resize_align": (lambda t, x: t.bilinear_resize(x, 5, 5, align_corners=True), [(1, 1, 3, 3)]),
    "maxpool": (lambda t, x: t.maxpool2d(x, 2), [(2, 2, 6, 6)]),
    "maxpool_overlap": (lambda t, x: t.maxpool2d(x, 3, 2), [(1, 2, 7, 7)]),
    "avgpool": (lambda t, x: t.avgpool2d(x, 3, 2), [(1, 2, 7, 7)]),
    "softmax": (lambda t, x: t.softmax_channels(x), [(2, 3, 3, 3)]),
    "sigmoid": (lambda t, x: t.sigmoid(x), [(2, 3)]),
    "relu": (lambda t, x: t.relu(x), [(3, 4)]),
    "mul": (lambda t, a, b: t.mul(a, b), [(2, 3), (2, 3)]),
    "add": (lambda t, a, b: t.add(a, b), [(2, 3), (2, 3)]),
    "maximum": (lambda t, a, b: t.maximum(a, b), [(4, 4), (4, 4)]),
    "scale": (lambda t, x: t.scale(x, -2.5), [(3,)]),
    "concat": (lambda t, a, b: t.concat_channels([a, b]), [(1, 2, 3, 3), (1, 1, 3, 3)]),
    "slice": (lambda t, x: t.slice_channels(x, 1, 3), [(2, 4, 2, 2)]),
    "broadcast": (lambda t, x: t.broadcast_channels(x, 3), [(2, 1, 3, 3)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_backward_matches_central_differences(name):
    build, shapes = OP_CASES[name]
    _check_op(build, shapes)


def test_cross_entropy_backward():
    labels = np.array([[[0, 2], [255, 1]]])

    def forward(p):
        tape = Tape()
        return tape, cross_entropy(tape, tape.param("s", p["s"]), labels)

    params = {"s": t64(np.random.default_rng(4).standard_normal((1, 3, 2, 2)))}
    assert finite_diff_check(forward, params, 1e-6, 12).max_rel_err < 1e-6


def test_softmax_jacobian_rows_sum_to_zero():
    x = np.random.default_rng(1).standard_normal((1, 4, 1, 1))
    jac = np.zeros((4, 4))
    for i in range(4):
        tape = Tape()
        xn = tape.param("x", t64(x))
        y = tape.softmax_channels(xn)
        seed = np.zeros((1, 4, 1, 1))
        seed[0, i] = 1.0
        jac[i] = backward(tape, tape.sum(tape.mul(y, tape.constant(t64(seed)))))["x"].data.reshape(-1)
    np.testing.assert_allclose(jac.sum(axis=1), 0.0, atol=1e-12)


@pytest.mark.parametrize("src,dst", [((4, 4), (8, 8)), ((3, 5), (9, 15)), ((8, 8), (4, 4)), ((2, 2), (2, 2))])
def test_resize_backward_conserves_mass(src, dst):
    rng = np.random.default_rng(2)
    tape = Tape()
    x = tape.param("x", t64(rng.standard_normal((1, 2, *src))))
    y = tape.bilinear_resize(x, *dst)
    seed = rng.standard_normal(y.shape)
    g = backward(tape, tape.sum(tape.mul(y, tape.constant(t64(seed)))))["x"].data
    assert g.sum() == pytest.approx(seed.sum(), abs=1e-10)


def test_maxpool_tie_routes_to_first_element():
    tape = Tape()
    x = tape.param("x", t64(np.ones((1, 1, 2, 2))))
    g = backward(tape, tape.sum(tape.maxpool2d(x, 2)))["x"].data[0, 0]
    np.testing.assert_array_equal(g, [[1.0, 0.0], [0.0, 0.0]])


# -- the checker itself -------------------------------------------------------

def test_finite_diff_exact_for_linear_function():
    rng = np.random.default_rng(0)
    xs = t64(rng.standard_normal(6))

    def forward(p):
        tape = Tape()
        return tape, tape.sum(tape.mul(tape.param("w", p["w"]), tape.constant(xs)))

    for h in (1e-1, 1e-3, 1e-6):
        report = finite_diff_check(forward, {"w": t64(rng.standard_normal(6))}, epsilon=h, sample_count=6)
        assert report.max_rel_err < 1e-6


def test_finite_diff_smooth_scalar():
    def forward(p):
        tape = Tape()
        return tape, tape.sigmoid(tape.param("w", p["w"]))

    report = finite_diff_check(forward, {"w": t64([0.0])}, epsilon=1e-5, sample_count=1)
    assert report.max_rel_err < 1e-8


def test_finite_diff_reports_a_wrong_gradient():
    def forward(p):
        tape = Tape()
        w = tape.param("w", p["w"])
        wrong = tape.record("bad_square", [w], t64(w.value.data ** 2), lambda g: (g * w.value.data,))
        return tape, tape.sum(wrong)

    report = finite_diff_check(forward, {"w": t64([1.0, 2.0])}, epsilon=1e-5, sample_count=2)
    assert report.max_rel_err == pytest.approx(0.5, abs=1e-6)
    assert report.worst_param == "w" and not report.passed(1e-4)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)


def test_full_model_float64_gradcheck():
    report = gradcheck(RunConfig(), sample_count=50, epsilon=1e-5)
    assert report.max_rel_err < 1e-4


def test_full_model_float32_gradients():
    # float32 tape gradients against double-precision central differences
    report = gradcheck(RunConfig(), sample_count=50, epsilon=1e-4, dtype=np.float32, fd_dtype=np.float64)
    assert report.max_rel_err < 1e-3
