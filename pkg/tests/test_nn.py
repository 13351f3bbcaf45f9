import numpy as np
import pytest

from imagesig.nn import (
    ALIGNMENT,
    AdamState,
    ModelParams,
    ModelSpec,
    ShapeError,
    adam_step,
    backward,
    build_model,
    count_flops,
    count_params,
    focal_loss,
    forward,
    load_model,
    save_model,
    serialize_model,
    softmax,
)
from imagesig.sigcore import tensor_dim, witt_dims
from oracles import cross_entropy, finite_difference, relative_error

TOY = {
    "fc": ModelSpec("fc", rows=3, width=4, neurons=5),
    "cnn1d": ModelSpec("cnn1d", rows=20, width=4, neurons=5, filters=(3, 4)),
}


def toy_batch(spec, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, spec.rows, spec.width)), rng.integers(0, spec.classes, size=n)


# --- counting ---------------------------------------------------------------


@pytest.mark.parametrize(
    "spec,params",
    [
        (ModelSpec("fc", 64, 120), 384_152),
        (ModelSpec("cnn1d", 64, 120), 37_112),
        (ModelSpec("cnn1d", 128, 120), 59_512),
        (ModelSpec("fc", 32, 3), 4_952),
        (ModelSpec("fc", 32, tensor_dim(3, 6)), 1_747_352),
        (ModelSpec("fc", 64, 32), 102_552),
    ],
)
def test_param_counts(spec, params):
    assert count_params(spec) == params


def test_cnn_layer_breakdown():
    shapes = dict(ModelSpec().tensor_shapes())
    size = {k: int(np.prod(v)) for k, v in shapes.items()}
    assert size["conv1.weight"] + size["conv1.bias"] == 11_552
    assert size["conv2.weight"] + size["conv2.bias"] == 6_208
    assert size["dense.weight"] + size["dense.bias"] == 19_250
    assert size["out.weight"] + size["out.bias"] == 102


@pytest.mark.parametrize("res", [32, 64, 128])
@pytest.mark.parametrize("depth", [1, 2, 3, 4])
@pytest.mark.parametrize("encoder", ["fc", "cnn1d"])
def test_count_matches_built_model(res, depth, encoder):
    for width in (tensor_dim(3, depth), sum(witt_dims(3, depth))):
        spec = ModelSpec(encoder, res, width)
        assert count_params(spec) == build_model(spec).n_params


def test_flops():
    assert count_flops(ModelSpec("fc", 64, 120)) == 768_200
    cnn = count_flops(ModelSpec("cnn1d", 64, 120))
    assert abs(cnn - 1.69e6) / 1.69e6 < 0.01
    two = count_flops(ModelSpec("cnn1d", 128, 120))
    assert abs(two - 3.49e6) / 3.49e6 < 0.01


def test_short_input_rejected():
    with pytest.raises(ShapeError):
        ModelSpec("cnn1d", rows=8, width=4)
    with pytest.raises(ValueError):
        ModelSpec("lstm")


# --- forward -----------------------------------------------------------------


@pytest.mark.parametrize("encoder", ["fc", "cnn1d"])
def test_forward_properties(encoder):
    spec = TOY[encoder]
    model = build_model(spec, seed=1)
    x, _ = toy_batch(spec, n=8)
    probs, _ = forward(model, x)
    assert probs.shape == (8, 2)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12
    single, _ = forward(model, x[3:4])
    assert np.allclose(single[0], probs[3], rtol=0, atol=1e-15)

    zeroed = model.copy()
    zeroed.tensors["out.weight"][:] = 0
    zeroed.tensors["out.bias"][:] = 0
    assert np.allclose(forward(zeroed, x)[0], 0.5, atol=0)


def test_forward_shape_error():
    model = build_model(TOY["fc"])
    with pytest.raises(ShapeError):
        forward(model, np.zeros((2, 4, 4)))
    flat = forward(model, np.zeros((2, 12)))[0]
    assert flat.shape == (2, 2)


def test_softmax_stable():
    p = softmax(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))
    assert np.allclose(p, [[1.0, 0.0], [0.5, 0.5]])


def test_init_deterministic():
    a, b = build_model(ModelSpec(), seed=3), build_model(ModelSpec(), seed=3)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    assert not np.array_equal(a.tensors["dense.weight"], build_model(ModelSpec(), seed=4).tensors["dense.weight"])
    assert not np.any(a.tensors["dense.bias"])


# --- focal loss -----------------------------------------------------------------


def test_focal_examples():
    loss, _ = focal_loss(np.array([[0.5, 0.5]]), [1], gamma=0)
    assert abs(loss - np.log(2)) < 1e-12
    loss, _ = focal_loss(np.array([[0.1, 0.9]]), [1], alpha=[1.0, 1.84], gamma=2)
    assert abs(loss - 0.0019387) < 1e-6
    loss, _ = focal_loss(np.array([[1e-12, 1 - 1e-12]]), [1])
    assert loss < 1e-15


def test_focal_is_cross_entropy_at_gamma_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        probs = softmax(rng.normal(size=(16, 3)))
        y = rng.integers(0, 3, size=16)
        assert abs(focal_loss(probs, y, gamma=0)[0] - cross_entropy(probs, y)) < 1e-12
        alpha = rng.uniform(0.5, 2, size=3)
        assert abs(focal_loss(probs, y, alpha, gamma=0)[0] - cross_entropy(probs, y, alpha)) < 1e-12


def test_focal_validation():
    with pytest.raises(ValueError):
        focal_loss(np.array([[0.5, 0.5]]), [0], gamma=-1)
    with pytest.raises(ValueError):
        focal_loss(np.array([[0.5, 0.5]]), [0], alpha=[0, 1])


# --- backward -------------------------------------------------------------------


@pytest.mark.parametrize("encoder", ["fc", "cnn1d"])
@pytest.mark.parametrize("gamma", [0.0, 2.0])
def test_gradient_check(encoder, gamma):
    spec = TOY[encoder]
    model = build_model(spec, seed=2)
    x, y = toy_batch(spec, seed=5)
    alpha = np.array([0.7, 1.6])
    probs, cache = forward(model, x)
    _, dlogits = focal_loss(probs, y, alpha, gamma)
    grads = backward(model, cache, dlogits)
    fd = finite_difference(model, x, y, alpha, gamma)
    for name in model.tensors:
        assert relative_error(grads[name], fd[name]) < 1e-4, name


@pytest.mark.parametrize("encoder", ["fc", "cnn1d"])
def test_backward_linearity(encoder):
    spec = TOY[encoder]
    model = build_model(spec, seed=0)
    x, _ = toy_batch(spec, n=1)
    _, cache = forward(model, x)
    zero = backward(model, cache, np.zeros((1, 2)))
    assert all(not np.any(g) for g in zero.values())

    d = np.array([[0.3, -0.3]])
    one = backward(model, cache, d)
    _, cache2 = forward(model, np.concatenate([x, x]))
    two = backward(model, cache2, np.concatenate([d, d]))
    for k in one:
        assert np.allclose(two[k], 2 * one[k], atol=1e-14)


def test_backward_needs_matching_cache():
    model = build_model(TOY["fc"])
    x, _ = toy_batch(TOY["fc"])
    _, cache = forward(model, x)
    with pytest.raises(ValueError):
        backward(model, None, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        backward(model, cache, np.zeros((3, 2)))
    with pytest.raises(ValueError):
        backward(build_model(TOY["cnn1d"]), cache, np.zeros((4, 2)))


# --- adam -------------------------------------------------------------------------


def test_adam_zero_gradient():
    model = build_model(TOY["fc"])
    state = AdamState.for_model(model)
    new, state2 = adam_step(model, {k: np.zeros_like(v) for k, v in model.tensors.items()}, state)
    assert all(np.array_equal(new.tensors[k], model.tensors[k]) for k in model.tensors)
    assert state2.step == 1 and state.step == 0


def test_adam_first_step_is_signed_lr():
    model = build_model(TOY["fc"])
    rng = np.random.default_rng(0)
    grads = {k: rng.choice([-2.0, 0.5, 3.0], size=v.shape) for k, v in model.tensors.items()}
    new, _ = adam_step(model, grads, AdamState.for_model(model, lr=1e-3))
    for k in model.tensors:
        step = new.tensors[k] - model.tensors[k]
        assert np.allclose(step, -1e-3 * np.sign(grads[k]), rtol=1e-6, atol=0)


def test_adam_deterministic():
    model = build_model(TOY["fc"])
    grads = {k: np.ones_like(v) for k, v in model.tensors.items()}
    a, _ = adam_step(model, grads, AdamState.for_model(model))
    b, _ = adam_step(model, grads, AdamState.for_model(model))
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_loss_decreases_on_separable_toy():
    rng = np.random.default_rng(0)
    spec = ModelSpec("fc", rows=1, width=4, neurons=8)
    y = np.repeat([0, 1], 10)
    x = rng.normal(size=(20, 1, 4)) + np.where(y[:, None, None] == 1, 2.0, -2.0)
    model = build_model(spec, seed=0)
    state = AdamState.for_model(model, lr=1e-3)
    losses = []
    for _ in range(50):
        probs, cache = forward(model, x)
        loss, d = focal_loss(probs, y, gamma=2.0)
        losses.append(loss)
        model, state = adam_step(model, backward(model, cache, d), state)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# --- model file -----------------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    model = build_model(ModelSpec(), seed=1)
    path = tmp_path / "m.imgsig"
    n = save_model(path, model, {"note": "x"})
    data = path.read_bytes()
    assert n == len(data) and data[:8] == b"IMGSIG01"
    back, header = load_model(path)
    assert header["note"] == "x" and back.spec == model.spec
    for k, t in model.tensors.items():
        assert np.array_equal(back.tensors[k], t.astype(np.float32))
    _, sizes = serialize_model(model)
    assert sizes["header"] % ALIGNMENT == 0
    assert sizes["weights"] + sizes["biases"] == 4 * 37_112
    assert save_model(tmp_path / "again.imgsig", back, {"note": "x"}) == n
    assert (tmp_path / "again.imgsig").read_bytes() == data


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.imgsig"
    path.write_bytes(b"NOTAMODEL" + bytes(100))
    with pytest.raises(ValueError):
        load_model(path)


def test_params_validation():
    spec = TOY["fc"]
    with pytest.raises(ShapeError):
        ModelParams(spec, {"dense.weight": np.zeros((12, 5))})
