"""Layer forward/backward contracts, Adam, gradient checking, checkpoints."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markovtyper import tensor
from markovtyper.errors import ConfigurationError, DataError, DimensionError
from markovtyper.tensor import AdamState, ParamStore, adam_step, decay_lr, grad_check

from helpers import jitter_params


def projection_loss(forward, backward, proj):
    """Scalar loss sum(proj * y) whose gradient at y is exactly proj."""

    def loss_fn(store):
        store.zero_grads()
        y, cache = forward(store)
        backward(store, cache, proj)
        return float((y * proj).sum())

    return loss_fn


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def test_linear_identity():
    store = ParamStore(0)
    tensor.add_linear(store, "lin", 3, 3)
    store.value("lin.w")[...] = np.eye(3)
    store.value("lin.b")[...] = 0.0
    y, _ = tensor.linear(store, "lin", np.array([1.0, 2.0, 3.0], dtype=np.float32))
    np.testing.assert_allclose(y, [1.0, 2.0, 3.0])


def test_linear_zero_weights_returns_bias():
    store = ParamStore(0)
    tensor.add_linear(store, "lin", 4, 2)
    store.value("lin.w")[...] = 0.0
    store.value("lin.b")[...] = [0.5, -1.5]
    for _ in range(3):
        x = np.random.default_rng(1).normal(size=(5, 4)).astype(np.float32)
        y, _ = tensor.linear(store, "lin", x)
        np.testing.assert_allclose(y, np.tile([0.5, -1.5], (5, 1)))


def test_linear_shape_mismatch_names_operand():
    store = ParamStore(0)
    tensor.add_linear(store, "proj", 4, 2)
    with pytest.raises(DimensionError, match="proj"):
        tensor.linear(store, "proj", np.zeros((3, 5), dtype=np.float32))


def test_linear_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    store = ParamStore(0, dtype=np.float64)
    tensor.add_linear(store, "lin", 4, 3)
    jitter_params(store, 1)
    store.add_raw("x", rng.normal(size=(2, 4)))
    proj = rng.normal(size=(2, 3))

    def loss_fn(s):
        s.zero_grads()
        y, cache = tensor.linear(s, "lin", s.value("x"))
        s.grad("x")[...] += tensor.linear_bwd(s, cache, proj)
        return float((y * proj).sum())

    assert grad_check(loss_fn, store, step=1e-6).max_rel_error < 1e-3


def test_linear_gradient_float32_matches_mirror():
    # 32-bit gradients agree with the FD-verified 64-bit mirror; raw 32-bit
    # central differences at h = 1e-3 are noise-limited around 3e-3.
    rng = np.random.default_rng(3)
    store32 = ParamStore(0, dtype=np.float32)
    tensor.add_linear(store32, "lin", 4, 3)
    jitter_params(store32, 1)
    x = rng.normal(size=(2, 4)).astype(np.float32)
    proj = rng.normal(size=(2, 3)).astype(np.float32)
    store64 = store32.astype(np.float64)

    grads = {}
    for store in (store32, store64):
        store.zero_grads()
        _, cache = tensor.linear(store, "lin", store.dtype.type(1) * x.astype(store.dtype))
        tensor.linear_bwd(store, cache, proj.astype(store.dtype))
        grads[store.dtype.itemsize] = {n: store.grad(n).astype(np.float64) for n in ("lin.w", "lin.b")}

    for name in ("lin.w", "lin.b"):
        a, b = grads[4][name], grads[8][name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-2)
        assert float((np.abs(a - b) / denom).max()) < 1e-3


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------


def test_conv1d_identity_kernel():
    store = ParamStore(0)
    tensor.add_conv1d(store, "c", 1, 1, 1)
    store.value("c.w")[...] = 1.0
    x = np.arange(8, dtype=np.float32).reshape(1, 8)
    y, _ = tensor.conv1d(store, "c", x, stride=1)
    np.testing.assert_allclose(y, x)


def test_conv1d_output_length():
    store = ParamStore(0)
    tensor.add_conv1d(store, "c", 1, 2, 5)
    x = np.zeros((1, 16), dtype=np.float32)
    y, _ = tensor.conv1d(store, "c", x, stride=2)
    assert y.shape == (2, 6)  # floor((16 - 5) / 2) + 1


def test_conv1d_time_shorter_than_kernel():
    store = ParamStore(0)
    tensor.add_conv1d(store, "c", 1, 1, 5)
    with pytest.raises(DimensionError, match="kernel"):
        tensor.conv1d(store, "c", np.zeros((1, 4), dtype=np.float32))


@pytest.mark.parametrize("kernel,stride,time_len", [(3, 1, 10), (3, 2, 11), (5, 2, 16), (1, 1, 4)])
def test_conv1d_gradient_matches_finite_differences(kernel, stride, time_len):
    rng = np.random.default_rng(kernel * 10 + stride)
    store = ParamStore(0, dtype=np.float64)
    tensor.add_conv1d(store, "c", 2, 3, kernel)
    jitter_params(store, 5)
    store.add_raw("x", rng.normal(size=(2, 2, time_len)))
    t_out = (time_len - kernel) // stride + 1
    proj = rng.normal(size=(2, 3, t_out))

    def loss_fn(s):
        s.zero_grads()
        y, cache = tensor.conv1d(s, "c", s.value("x"), stride=stride)
        s.grad("x")[...] += tensor.conv1d_bwd(s, cache, proj)
        return float((y * proj).sum())

    assert grad_check(loss_fn, store, step=1e-6).max_rel_error < 1e-3


# ---------------------------------------------------------------------------
# rect
# ---------------------------------------------------------------------------


def test_rect_basic():
    y, _ = tensor.rect(np.array([-1.0, 0.0, 2.0], dtype=np.float32))
    np.testing.assert_allclose(y, [0.0, 0.0, 2.0])


def test_rect_all_negative_zero_gradient():
    x = -np.abs(np.random.default_rng(0).normal(size=7)).astype(np.float32) - 0.1
    y, cache = tensor.rect(x)
    assert np.all(y == 0)
    gx = tensor.rect_bwd(cache, np.ones_like(x))
    assert np.all(gx == 0)


def test_rect_gradient_away_from_zero():
    rng = np.random.default_rng(1)
    x = rng.normal(size=20)
    x = x[np.abs(x) > 1e-3][:10]
    store = ParamStore(0, dtype=np.float64)
    store.add_raw("x", x)
    proj = rng.normal(size=x.shape)

    def loss_fn(s):
        s.zero_grads()
        y, cache = tensor.rect(s.value("x"))
        s.grad("x")[...] += tensor.rect_bwd(cache, proj)
        return float((y * proj).sum())

    assert grad_check(loss_fn, store, step=1e-6).max_rel_error < 1e-3


# ---------------------------------------------------------------------------
# layernorm
# ---------------------------------------------------------------------------


def test_layernorm_default_normalizes():
    store = ParamStore(0)
    tensor.add_layernorm(store, "ln", 16)
    x = np.random.default_rng(0).normal(size=(5, 16)).astype(np.float32) * 3 + 1
    y, _ = tensor.layernorm(store, "ln", x)
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_layernorm_constant_vector_maps_to_zero():
    store = ParamStore(0)
    tensor.add_layernorm(store, "ln", 6)
    y, _ = tensor.layernorm(store, "ln", np.full((6,), 3.25, dtype=np.float32))
    np.testing.assert_allclose(y, 0.0, atol=1e-7)


def test_layernorm_single_element_rejected():
    store = ParamStore(0)
    tensor.add_layernorm(store, "ln", 1)
    with pytest.raises(DimensionError, match="variance"):
        tensor.layernorm(store, "ln", np.zeros((3, 1), dtype=np.float32))


def test_layernorm_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    store = ParamStore(0, dtype=np.float64)
    tensor.add_layernorm(store, "ln", 8)
    jitter_params(store, 3, scale=0.1)
    store.add_raw("x", rng.normal(size=(8,)))
    proj = rng.normal(size=(8,))

    def loss_fn(s):
        s.zero_grads()
        y, cache = tensor.layernorm(s, "ln", s.value("x"))
        s.grad("x")[...] += tensor.layernorm_bwd(s, cache, proj)
        return float((y * proj).sum())

    assert grad_check(loss_fn, store, step=1e-6).max_rel_error < 1e-3


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform_on_zeros():
    np.testing.assert_allclose(tensor.softmax(np.zeros(4, dtype=np.float32)), 0.25)


def test_softmax_shift_invariance():
    x = np.array([0.3, -1.2, 2.0, 0.0, 5.5], dtype=np.float32)
    np.testing.assert_allclose(tensor.softmax(x), tensor.softmax(x + 2.0), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=12))
def test_softmax_is_probability_vector(values):
    y = tensor.softmax(np.asarray(values, dtype=np.float32))
    assert np.all(y >= 0)
    assert abs(float(y.sum()) - 1.0) <= 1e-6


def test_softmax_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=6)
    y = tensor.softmax(x)
    # analytic Jacobian row i via backward with a basis vector
    analytic = np.stack([tensor.softmax_bwd(y, np.eye(6)[i]) for i in range(6)])
    step = 1e-6
    numeric = np.zeros((6, 6))
    for j in range(6):
        up = tensor.softmax(x + step * np.eye(6)[j])
        down = tensor.softmax(x - step * np.eye(6)[j])
        numeric[:, j] = (up - down) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    assert float((np.abs(analytic - numeric) / denom).max()) < 1e-3


# ---------------------------------------------------------------------------
# randomized layer property: analytic vs finite differences over many seeds
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients_randomized(seed):
    rng = np.random.default_rng(seed)
    d_in = int(rng.integers(2, 6))
    d_out = int(rng.integers(2, 6))
    kernel = int(rng.integers(1, 4))
    time_len = int(rng.integers(kernel + 1, kernel + 8))
    stride = int(rng.integers(1, 3))
    store = ParamStore(seed, dtype=np.float64)
    tensor.add_linear(store, "lin", d_in, d_out)
    tensor.add_conv1d(store, "c", 2, d_out, kernel)
    tensor.add_layernorm(store, "ln", d_in + 2)
    jitter_params(store, seed + 1)
    store.add_raw("xl", rng.normal(size=(3, d_in)))
    store.add_raw("xc", rng.normal(size=(2, 2, time_len)))
    store.add_raw("xn", rng.normal(size=(4, d_in + 2)))
    t_out = (time_len - kernel) // stride + 1
    proj_l = rng.normal(size=(3, d_out))
    proj_c = rng.normal(size=(2, d_out, t_out))
    proj_n = rng.normal(size=(4, d_in + 2))

    def loss_fn(s):
        s.zero_grads()
        yl, cl = tensor.linear(s, "lin", s.value("xl"))
        yc, cc = tensor.conv1d(s, "c", s.value("xc"), stride=stride)
        yn, cn = tensor.layernorm(s, "ln", s.value("xn"))
        s.grad("xl")[...] += tensor.linear_bwd(s, cl, proj_l)
        s.grad("xc")[...] += tensor.conv1d_bwd(s, cc, proj_c)
        s.grad("xn")[...] += tensor.layernorm_bwd(s, cn, proj_n)
        return float((yl * proj_l).sum() + (yc * proj_c).sum() + (yn * proj_n).sum())

    assert grad_check(loss_fn, store, step=1e-6).max_rel_error < 1e-3


# ---------------------------------------------------------------------------
# adam + decay
# ---------------------------------------------------------------------------


def test_adam_first_step_closed_form():
    store = ParamStore(0)
    store.add_constant("p", (1,), 0.0)
    store.grad("p")[...] = 1.0
    state = AdamState(learning_rate=0.001)
    adam_step(store, state)
    # bias-corrected m-hat = v-hat = 1 on the first step
    assert state.step_count == 1
    np.testing.assert_allclose(store.value("p"), -0.001, rtol=1e-5)


def test_adam_zero_gradient_is_noop():
    store = ParamStore(0)
    tensor.add_linear(store, "lin", 3, 3)
    before = {n: store.value(n).copy() for n in store.names()}
    state = AdamState()
    store.zero_grads()
    adam_step(store, state)
    for name in store.names():
        np.testing.assert_array_equal(store.value(name), before[name])


def test_adam_descends_quadratic():
    store = ParamStore(0)
    store.add_constant("x", (1,), 1.0)
    state = AdamState(learning_rate=0.1)
    for _ in range(100):
        store.zero_grads()
        store.grad("x")[...] = 2.0 * store.value("x")
        adam_step(store, state)
    assert abs(float(store.value("x")[0])) < 0.05


def test_adam_step_count_increments():
    store = ParamStore(0)
    store.add_constant("p", (2,), 0.0)
    state = AdamState()
    for expected in range(1, 5):
        adam_step(store, state)
        assert state.step_count == expected


def test_decay_lr_paper_factor():
    state = AdamState(learning_rate=0.001)
    decay_lr(state, 0.97)
    assert state.learning_rate == pytest.approx(0.00097, rel=1e-12)


def test_decay_lr_identity_factor():
    state = AdamState(learning_rate=0.5)
    decay_lr(state, 1.0)
    assert state.learning_rate == 0.5


def test_decay_lr_two_hundred_applications():
    state = AdamState(learning_rate=0.001)
    for _ in range(200):
        decay_lr(state, 0.97)
    assert state.learning_rate == pytest.approx(0.001 * 0.97**200, rel=1e-9)
    assert state.learning_rate == pytest.approx(2.26e-6, rel=5e-3)


def test_decay_lr_rejects_bad_factor():
    state = AdamState()
    with pytest.raises(ConfigurationError):
        decay_lr(state, 0.0)
    with pytest.raises(ConfigurationError):
        decay_lr(state, 1.5)


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------


def test_grad_check_flags_corrupted_backward():
    rng = np.random.default_rng(9)
    store = ParamStore(0, dtype=np.float64)
    tensor.add_linear(store, "lin", 3, 2)
    jitter_params(store, 2)
    x = rng.normal(size=(4, 3))
    proj = rng.normal(size=(4, 2))

    def corrupted(s):
        s.zero_grads()
        y, cache = tensor.linear(s, "lin", x)
        tensor.linear_bwd(s, cache, proj)
        for name in ("lin.w", "lin.b"):
            s.grad(name)[...] *= -1.0  # deliberate sign flip
        return float((y * proj).sum())

    report = grad_check(corrupted, store, step=1e-6)
    assert report.max_rel_error > 0.5


def test_determinism_bitwise():
    def run():
        store = ParamStore(42)
        tensor.add_linear(store, "lin", 6, 4)
        tensor.add_conv1d(store, "c", 2, 3, 3)
        x = np.random.default_rng(0).normal(size=(5, 6)).astype(np.float32)
        y, _ = tensor.linear(store, "lin", x)
        return y.tobytes(), store.value("lin.w").tobytes(), store.value("c.w").tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    store = ParamStore(7)
    tensor.add_linear(store, "lin", 5, 3)
    tensor.add_conv1d(store, "conv", 2, 4, 3)
    tensor.save_checkpoint(store, tmp_path, config={"kind": "test"})
    loaded, config = tensor.load_checkpoint(tmp_path)
    assert config == {"kind": "test"}
    assert sorted(loaded.names()) == sorted(store.names())
    for name in store.names():
        assert loaded.value(name).tobytes() == store.value(name).tobytes()


def test_checkpoint_truncated_blob(tmp_path):
    store = ParamStore(7)
    tensor.add_linear(store, "lin", 5, 3)
    tensor.save_checkpoint(store, tmp_path)
    blob = (tmp_path / tensor.CHECKPOINT_BLOB).read_bytes()
    (tmp_path / tensor.CHECKPOINT_BLOB).write_bytes(blob[:-8])
    with pytest.raises(DataError, match="truncated"):
        tensor.load_checkpoint(tmp_path)


def test_checkpoint_missing_manifest(tmp_path):
    with pytest.raises(DataError, match="manifest"):
        tensor.load_checkpoint(tmp_path / "nope")


def test_checkpoint_rejects_nonfinite(tmp_path):
    store = ParamStore(7)
    tensor.add_linear(store, "lin", 2, 2)
    store.value("lin.w")[0, 0] = np.nan
    tensor.save_checkpoint(store, tmp_path)
    with pytest.raises(DataError, match="non-finite"):
        tensor.load_checkpoint(tmp_path)


def test_param_store_rejects_duplicates():
    store = ParamStore(0)
    store.add_constant("p", (2,))
    with pytest.raises(ConfigurationError):
        store.add_constant("p", (2,))


def test_zero_grads_is_exact():
    store = ParamStore(0)
    tensor.add_linear(store, "lin", 3, 3)
    store.grad("lin.w")[...] = 1.5
    store.zero_grads()
    assert np.all(store.grad("lin.w") == 0.0)
