import numpy as np
import pytest

from replaycm import nnet
from replaycm.nnet import Network, TrainConfig

# one micro-net per layer kind; every net stays under 500 parameters
MICRO_NETS = {
    "dense": ([{"kind": "dense", "units": 3}], (4,), "mse"),
    "conv1d": ([{"kind": "conv1d", "filters": 3, "kernel": 3, "l2": 0.01},
                {"kind": "flatten"}, {"kind": "dense", "units": 1}], (6, 2), "mse"),
    "tdnn": ([{"kind": "tdnn", "units": 3, "context": [-2, 0, 2]},
              {"kind": "stats_pool"}, {"kind": "dense", "units": 2}], (9, 2), "mse"),
    # a nonlinearity before batch norm, as in the TDNN; a bias feeding batch norm
    # directly has an identically zero gradient and nothing to check
    "batch_norm": ([{"kind": "dense", "units": 4}, {"kind": "tanh"}, {"kind": "batch_norm"},
                    {"kind": "dense", "units": 1}], (3,), "mse"),
    "relu": ([{"kind": "dense", "units": 5}, {"kind": "relu"}, {"kind": "dense", "units": 1}], (3,), "mse"),
    "tanh": ([{"kind": "dense", "units": 4}, {"kind": "tanh"}], (3,), "mse"),
    "gaussian_noise": ([{"kind": "gaussian_noise", "std": 0.1}, {"kind": "dense", "units": 2}], (3,), "mse"),
    "max_pool1d": ([{"kind": "conv1d", "filters": 2, "kernel": 3}, {"kind": "max_pool1d", "pool": 2},
                    {"kind": "flatten"}, {"kind": "dense", "units": 1}], (8, 1), "mse"),
    "stats_pool": ([{"kind": "tdnn", "units": 3, "context": [-1, 0, 1]}, {"kind": "stats_pool"},
                    {"kind": "dense", "units": 3}], (7, 2), "softmax_cross_entropy"),
    "flatten": ([{"kind": "conv1d", "filters": 2, "kernel": 3}, {"kind": "flatten"},
                 {"kind": "dense", "units": 2}], (5, 2), "mse"),
}


def _targets(net, loss, rng, batch):
    out = net.output_shape[-1]
    if loss == "mse":
        return rng.normal(size=(batch, out))
    return rng.integers(0, out, batch)


@pytest.mark.parametrize("kind", sorted(MICRO_NETS))
def test_gradient_check_every_layer_kind(kind):
    specs, shape, loss = MICRO_NETS[kind]
    for seed in range(3):
        rng = np.random.default_rng(seed)
        net = Network(specs, shape, seed=seed)
        assert net.n_params() <= 500
        x = rng.normal(size=(4,) + shape)
        t = _targets(net, loss, rng, 4)
        errs = nnet.gradient_check(net, x, t, loss, eps=1e-5, check_input=True)
        assert max(errs.values()) < 1e-4, errs


def test_hand_computed_dense_gradient():
    net = Network([{"kind": "dense", "units": 1}], (2,), seed=0)
    net.layers[0].params["W"] = np.array([[0.5], [-1.0]])
    net.layers[0].params["b"] = np.array([0.25])
    x = np.array([[1.0, 2.0]])
    net.train_mode()
    y = net.forward(x)
    value, grads = net.backward(np.array([[1.0]]), "mse")
    # y = 0.5 - 2 + 0.25 = -1.25, loss = (y - 1)^2 = 5.0625, dL/dy = 2(y - 1) = -4.5
    assert y[0, 0] == pytest.approx(-1.25)
    assert value == pytest.approx(5.0625)
    np.testing.assert_allclose(grads[0]["W"], [[-4.5], [-9.0]])
    np.testing.assert_allclose(grads[0]["b"], [-4.5])


def test_zero_loss_zero_gradients():
    net = Network([{"kind": "dense", "units": 2}], (3,), seed=1)
    x = np.random.default_rng(0).normal(size=(5, 3))
    t = net.predict(x)
    net.train_mode()
    net.forward(x)
    value, grads = net.backward(t, "mse")
    assert value == 0.0
    assert all(np.all(g == 0) for gs in grads for g in gs.values())


def test_backward_in_infer_mode_raises():
    net = Network([{"kind": "dense", "units": 1}], (2,))
    with pytest.raises(nnet.ModeError):
        net.backward(np.zeros((1, 1)))


def test_noise_identity_in_infer_mode():
    net = Network([{"kind": "gaussian_noise", "std": 0.001}], (7,))
    x = np.random.default_rng(0).normal(size=(3, 7))
    assert np.array_equal(net.predict(x), x)
    net.train_mode()
    assert not np.array_equal(net.forward(x), x)


def test_tanh_codomain():
    net = Network([{"kind": "tanh"}], (4,))
    y = net.predict(np.array([[-1e6, -3.0, 2.0, 1e6]]))
    assert np.all(np.abs(y) <= 1)
    assert np.all(np.abs(y[0, 1:3]) < 1)


def test_maxpool_410_to_205():
    net = Network([{"kind": "max_pool1d", "pool": 2, "stride": 2}], (410, 1))
    assert net.output_shape == (205, 1)
    x = np.random.default_rng(0).normal(size=(2, 410, 1))
    np.testing.assert_array_equal(net.predict(x), x.reshape(2, 205, 2, 1).max(axis=2))


def test_shape_error_names_layer():
    net = Network([{"kind": "dense", "units": 3}, {"kind": "dense", "units": 2}], (4,))
    with pytest.raises(nnet.ShapeError, match="layer 0"):
        net.predict(np.zeros((1, 5)))


def test_batchnorm_train_output_moments():
    net = Network([{"kind": "batch_norm"}], (6,), seed=0)
    bn = net.layers[0]
    bn.params["gamma"] = np.linspace(0.5, 2.0, 6)
    bn.params["beta"] = np.linspace(-1.0, 1.0, 6)
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(64, 6))
    net.train_mode()
    y = net.forward(x)
    np.testing.assert_allclose(y.mean(axis=0), bn.params["beta"], atol=1e-6)
    # eps in the denominator shrinks the variance by var / (var + eps)
    var = x.var(axis=0)
    np.testing.assert_allclose(y.var(axis=0), bn.params["gamma"] ** 2 * var / (var + 1e-5), atol=1e-6)
    np.testing.assert_allclose(y.var(axis=0), bn.params["gamma"] ** 2, rtol=1e-6)


def test_l2_step_shrinks_weights_with_zero_data_gradient():
    net = Network([{"kind": "conv1d", "filters": 2, "kernel": 3, "l2": 0.1}, {"kind": "flatten"}], (4, 1))
    W0 = net.layers[0].params["W"].copy()
    net.layers[0].params["b"][:] = 0
    x = np.zeros((2, 4, 1))
    net.train_mode()
    net.forward(x)
    _, grads = net.backward(np.zeros((2, 8)), "mse")
    opt = nnet.Adam(net, lr=1e-3)
    opt.step(grads)
    W1 = net.layers[0].params["W"]
    nz = W0 != 0
    assert np.all(np.abs(W1[nz]) < np.abs(W0[nz]))


def test_stats_pool_examples():
    out = nnet.stats_pool(np.array([[0.0], [2.0]]))
    np.testing.assert_allclose(out, [1.0, 1.0])
    const = nnet.stats_pool(np.tile(np.arange(4.0), (10, 1)))
    assert np.all(const[4:] == 0)
    x = np.random.default_rng(0).normal(size=(50, 64))
    np.testing.assert_allclose(nnet.stats_pool(x), np.concatenate([x.mean(0), x.std(0)]), atol=1e-9)
    with pytest.raises(ValueError, match="2 frames"):
        nnet.stats_pool(np.zeros((1, 3)))


def _toy_regression(seed=0, n=200):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = np.where(X[:, :1] + X[:, 1:] > 0, 1.0, -1.0)
    return X, y


def test_training_loss_decreases_first_three_epochs():
    X, y = _toy_regression()
    net = Network([{"kind": "dense", "units": 1}, {"kind": "tanh"}], (2,), seed=0)
    res = nnet.train(net, X, y, TrainConfig(lr=0.01, max_epochs=3, batch_size=16, seed=0))
    losses = [tr for _, tr, _ in res.history]
    assert losses[0] > losses[1] > losses[2]


def test_patience_zero_stops_at_first_non_improvement():
    X, y = _toy_regression(1)
    net = Network([{"kind": "dense", "units": 1}, {"kind": "tanh"}], (2,), seed=0)
    res = nnet.train(net, X, y, TrainConfig(lr=0.5, max_epochs=200, patience=0, seed=0))
    vals = [va for _, _, va in res.history]
    assert res.stopped_early
    assert all(b < a for a, b in zip(vals[:-2], vals[1:-1]))
    assert vals[-1] >= min(vals[:-1])


def test_equal_loss_counts_as_non_improving():
    # no trainable parameters, so the validation loss is exactly constant
    net = Network([{"kind": "tanh"}], (1,), seed=0)
    X = np.random.default_rng(0).normal(size=(30, 1))
    res = nnet.train(net, X, np.zeros((30, 1)), TrainConfig(max_epochs=50, patience=3, seed=0))
    assert res.best_epoch == 1
    assert len(res.history) == 4


def test_early_stopping_restores_best_weights():
    X, y = _toy_regression(2)
    net = Network([{"kind": "dense", "units": 1}, {"kind": "tanh"}], (2,), seed=3)
    res = nnet.train(net, X, y, TrainConfig(lr=0.3, max_epochs=60, patience=2, seed=3))
    tr, va = nnet.split_validation(len(X), 0.1, 3)
    assert nnet.evaluate_loss(net, X[va], y[va]) == pytest.approx(res.best_val_loss, rel=1e-5)


def test_training_is_deterministic_bitwise():
    X, y = _toy_regression(3)
    specs = [{"kind": "gaussian_noise", "std": 0.1}, {"kind": "dense", "units": 4},
             {"kind": "batch_norm"}, {"kind": "relu"}, {"kind": "dense", "units": 1}]
    blobs = []
    for _ in range(2):
        net = Network(specs, (2,), seed=7)
        nnet.train(net, X, y, TrainConfig(max_epochs=5, seed=7))
        blobs.append(net.to_bytes("h"))
    assert blobs[0] == blobs[1]


def test_nan_loss_aborts_with_diagnostic():
    X = np.random.default_rng(0).normal(size=(20, 2))
    X[3, 0] = np.inf
    net = Network([{"kind": "dense", "units": 1}], (2,), seed=0)
    with pytest.raises(nnet.NumericError, match="epoch 1"):
        nnet.train(net, X, np.zeros((20, 1)), TrainConfig(batch_size=32, seed=0))


def test_checkpoint_roundtrip(tmp_path):
    specs, shape, _ = MICRO_NETS["batch_norm"]
    net = Network(specs, shape, seed=4)
    net.round_to_float32()
    net.save(tmp_path / "n.ckpt", "cafe")
    raw = (tmp_path / "n.ckpt").read_bytes()
    assert raw.startswith(b"RDNET01")
    back, h = nnet.load_checkpoint_bytes(raw)
    assert h == "cafe" and nnet.read_checkpoint_hash(tmp_path / "n.ckpt") == "cafe"
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(back.predict(x), net.predict(x))


def test_history_text_format():
    res = nnet.TrainResult(history=[(1, 0.5, 0.25), (2, 0.4, 0.2)])
    lines = res.history_text().splitlines()
    assert lines[0].split() == ["1", "0.50000000", "0.25000000"]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)
