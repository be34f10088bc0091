import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dr2net.errors import CheckpointError, DimensionError, InvalidParameterError, StateError
from dr2net.model import (CONV_INIT_STD, FC_INIT_STD, dr2_forward, init_model, linear_forward,
                          load_model, loss_and_grads, residual_forward, save_model, zero_residual)
from dr2net.sensing import make_operator, measure
from dr2net.tensor import batchnorm_forward, conv2d_forward, relu

from oracles import end_to_end_gradient_error, float64_model


def trained_like(m=43, blocks=2, seed=0):
    """Random model with recorded BN statistics, so inference works."""
    model = init_model(m, blocks, seed)
    r = np.random.default_rng(seed)
    for block in model.blocks:
        for _, layer in block.named_layers():
            if hasattr(layer, "stats"):
                layer.stats.mean[...] = r.standard_normal(layer.stats.mean.shape) * 1e-3
                layer.stats.var[...] = r.uniform(1e-6, 1e-5, layer.stats.var.shape)
                layer.stats.recorded = True
    return model


def test_init_statistics():
    model = init_model(272, 4, seed=1)
    assert model.wf.shape == (1089, 272)
    assert model.wf.std() == pytest.approx(FC_INIT_STD, rel=0.1)
    convs = np.concatenate([p.ravel() for n, p in model.parameters().items()
                            if n.endswith("weight") and n.startswith("blocks.")])
    assert convs.std() == pytest.approx(CONV_INIT_STD, rel=0.1)
    for name, p in model.parameters().items():
        if name.endswith("bias") or name.endswith("beta"):
            assert np.all(p == 0)
        if name.endswith("gamma"):
            assert np.all(p == 1)


def test_init_deterministic():
    a, b = init_model(43, 2, seed=5), init_model(43, 2, seed=5)
    for (n, p), (_, q) in zip(a.parameters().items(), b.parameters().items()):
        assert p.tobytes() == q.tobytes(), n


def test_init_validates():
    with pytest.raises(InvalidParameterError):
        init_model(10, 9)
    with pytest.raises(InvalidParameterError):
        init_model(0, 1)
    with pytest.raises(DimensionError):
        init_model(10, 0, operator=make_operator(11))


def test_parameter_names():
    names = list(init_model(10, 1).parameters())
    assert names[:2] == ["linear.weight", "linear.bias"]
    assert "blocks.0.conv1.weight" in names and "blocks.0.bn2.gamma" in names
    assert len(names) == 2 + 3 * 2 + 2 * 2


def test_linear_forward_examples():
    model = init_model(10, 0)
    model.wf[...] = 0
    assert np.all(linear_forward(np.ones(10), model) == 0)
    toy = init_model(2, 0)
    toy.wf[...] = 0
    toy.wf[:, 0] = 1  # every row is [1, 0]
    out = linear_forward(np.array([0.25, 0.5]), toy)
    assert out.shape == (33, 33) and out[0, 0] == 0.25


def test_linear_forward_row_major():
    model = init_model(1, 0)
    model.wf[...] = 0
    model.wf[34, 0] = 1
    out = linear_forward(np.array([1.0]), model)
    assert out[1, 1] == 1 and out.sum() == 1


def test_linear_forward_shape_error():
    with pytest.raises(DimensionError):
        linear_forward(np.zeros(5), init_model(10, 0))


@pytest.mark.parametrize("blocks", [0, 1, 3])
def test_zero_residual_is_identity(blocks):
    model = zero_residual(init_model(43, blocks, seed=3))
    y = np.random.default_rng(0).standard_normal((100, 43)).astype(np.float32)
    assert dr2_forward(y, model).tobytes() == linear_forward(y, model).tobytes()
    assert np.all(residual_forward(linear_forward(y, model)[:, None], model) == 0)


@pytest.mark.parametrize("blocks", [0, 1, 2, 4])
def test_output_shape(blocks):
    model = trained_like(10, blocks)
    x = np.random.default_rng(0).random((1, 33, 33)).astype(np.float32)
    assert residual_forward(x, model).shape == (1, 33, 33)
    assert dr2_forward(np.ones(10, np.float32), model).shape == (33, 33)


def test_recomposition_identity():
    model = trained_like(43, 2, seed=4)
    y = np.random.default_rng(1).standard_normal((6, 43)).astype(np.float32)
    xhat = linear_forward(y, model)
    d_hat = residual_forward(xhat, model)
    out = dr2_forward(y, model)
    assert out.tobytes() == (xhat + d_hat).tobytes()
    # the subtraction itself rounds in float32
    np.testing.assert_allclose(out - xhat, d_hat, rtol=0, atol=np.spacing(np.abs(out).max()))


def test_single_block_matches_layer_composition():
    model = trained_like(43, 1, seed=6).astype(np.float64)
    b = model.blocks[0]
    x = np.random.default_rng(2).random((3, 1, 33, 33))
    a = conv2d_forward(x, b.conv1.params["weight"], b.conv1.params["bias"], 5)
    a = relu(batchnorm_forward(a, b.bn1.params["gamma"], b.bn1.params["beta"], "infer", b.bn1.stats)[0])
    a = conv2d_forward(a, b.conv2.params["weight"], b.conv2.params["bias"], 0)
    a = relu(batchnorm_forward(a, b.bn2.params["gamma"], b.bn2.params["beta"], "infer", b.bn2.stats)[0])
    a = conv2d_forward(a, b.conv3.params["weight"], b.conv3.params["bias"], 3)
    np.testing.assert_allclose(residual_forward(x, model), a, rtol=1e-12, atol=1e-14)


def test_inference_requires_recorded_stats():
    with pytest.raises(StateError):
        dr2_forward(np.ones(10, np.float32), init_model(10, 1))


def test_loss_and_grads_shapes_and_linear_only():
    model = init_model(10, 1)
    Y = np.random.default_rng(0).standard_normal((4, 10))
    X = np.random.default_rng(1).random((4, 1089))
    loss, grads = loss_and_grads(model, Y, X)
    assert list(grads) == list(model.parameters())
    for name, g in grads.items():
        assert g.shape == model.parameters()[name].shape
    loss_fc, g_fc = loss_and_grads(model, Y, X, residual=False)
    assert list(g_fc) == ["linear.weight", "linear.bias"]
    pred = linear_forward(Y, model).reshape(4, -1).astype(np.float64)
    assert loss_fc == pytest.approx(np.mean(np.sum((pred - X) ** 2, axis=1)), rel=1e-5)


def test_zero_residual_loss_equals_linear_loss():
    model = zero_residual(init_model(10, 2))
    Y = np.random.default_rng(0).standard_normal((4, 10))
    X = np.random.default_rng(1).random((4, 1089))
    full, _ = loss_and_grads(model, Y, X, mode="infer", need_grads=False)
    lin, _ = loss_and_grads(model, Y, X, residual=False, need_grads=False)
    assert full == lin


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient(seed):
    worst = end_to_end_gradient_error(float64_model(seed=seed), seed=seed, per_param=8)
    assert max(worst.values()) <= 1e-3, worst


def test_save_load_bitwise(tmp_path):
    model = trained_like(109, 2, seed=9)
    model.info["note"] = "x"
    save_model(model, tmp_path / "m.dr2")
    back = load_model(tmp_path / "m.dr2")
    y = np.random.default_rng(0).standard_normal((5, 109)).astype(np.float32)
    assert dr2_forward(y, back).tobytes() == dr2_forward(y, model).tobytes()
    assert back.info == {"note": "x"} and back.block_count == 2
    assert back.measurement_rate == pytest.approx(109 / 1089)


def test_checkpoint_reproduces_measurements(tmp_path):
    op = make_operator(272, seed=7)
    model = init_model(272, 0, operator=op)
    save_model(model, tmp_path / "m.dr2")
    back = load_model(tmp_path / "m.dr2")
    x = np.random.default_rng(0).random((3, 1089))
    assert measure(x, back.operator).tobytes() == measure(x, op).tobytes()
    assert back.operator.seed == 7


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad.dr2").write_bytes(b"XXXXX" + bytes(50))
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "bad.dr2")
    save_model(init_model(10, 1), tmp_path / "ok.dr2")
    data = (tmp_path / "ok.dr2").read_bytes()
    (tmp_path / "short.dr2").write_bytes(data[:-10])
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "short.dr2")


@settings(max_examples=10, deadline=None)
@given(blocks=st.integers(0, 3), seed=st.integers(0, 1000))
def test_copy_is_independent(blocks, seed):
    model = init_model(10, blocks, seed)
    clone = model.copy()
    model.wf[...] += 1
    assert not np.array_equal(model.wf, clone.wf)
    assert clone.block_count == blocks
