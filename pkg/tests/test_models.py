import numpy as np
import pytest

from superfit.exceptions import ConfigurationError, DimensionError
from superfit.gradcheck import model_check
from superfit.models import build_middlecnn, build_model, build_tinymlp


def test_middlecnn_output_shape():
    model = build_middlecnn(3, 32, 10)
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    assert model.predict_logits(x).shape == (2, 10)


def test_middlecnn_parameter_count():
    model = build_middlecnn(3, 32, 10)
    per_layer = {name: sum(p.size for p in layer.parameters().values()) for name, layer in model.layers}
    assert per_layer["conv1"] == 1_792
    assert per_layer["conv2"] == 73_856
    assert per_layer["conv3"] == 295_168
    assert per_layer["bn1"] + per_layer["bn2"] + per_layer["bn3"] == 896
    assert per_layer["fc1"] == 4_195_328
    assert per_layer["fc2"] == 10_250
    assert model.parameter_count() == 4_577_290


def test_middlecnn_rejects_28_without_padding():
    with pytest.raises(ConfigurationError):
        build_middlecnn(1, 28, 10)


def test_middlecnn_pads_mnist_to_32():
    model = build_middlecnn(1, 28, 10, pad_to=32, channels=(4, 4, 4), hidden=8)
    assert model.input_shape == (1, 28, 28)
    assert model.predict_logits(np.zeros((3, 1, 28, 28))).shape == (3, 10)
    with pytest.raises(ConfigurationError):
        build_middlecnn(1, 28, 10, pad_to=31)


def test_tinymlp_parameter_count_and_shape():
    model = build_tinymlp(2, 8, 2)
    assert model.parameter_count() == 42
    assert model.predict_logits(np.zeros((5, 2))).shape == (5, 2)


def test_tinymlp_rejects_empty_dims():
    with pytest.raises(ConfigurationError):
        build_tinymlp(0, 8, 2)


def test_wrong_input_shape():
    with pytest.raises(DimensionError):
        build_tinymlp(3, 4, 2)(np.zeros((2, 4)))


def test_tinymlp_full_gradient_check():
    rng = np.random.default_rng(7)
    res = model_check(build_tinymlp(4, 6, 3, seed=7, dtype=np.float64), rng.uniform(0, 1, (5, 4)),
                      rng.integers(0, 3, 5), "tinymlp", 7, tolerance=1e-5)
    assert res.passed and res.checked == 4 * 6 + 6 + 6 * 3 + 3, res.line()


def test_seeded_initialisation_is_reproducible():
    a, b = build_middlecnn(3, 16, 4, channels=(4, 8, 8), hidden=16, seed=3), \
        build_middlecnn(3, 16, 4, channels=(4, 8, 8), hidden=16, seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and va.tobytes() == vb.tobytes()
    c = build_middlecnn(3, 16, 4, channels=(4, 8, 8), hidden=16, seed=4)
    assert a.state_dict()["param/conv1.weight"].tobytes() != c.state_dict()["param/conv1.weight"].tobytes()


def test_biases_start_at_zero_and_weights_are_bounded():
    model = build_tinymlp(100, 50, 3, seed=0)
    params = model.named_parameters()
    assert not params["fc1.bias"].data.any()
    bound = np.sqrt(2 / (1 + 0.01**2)) * np.sqrt(3 / 100)
    assert np.abs(params["fc1.weight"].data).max() <= bound


def _small_cnn():
    model = build_middlecnn(3, 16, 5, channels=(4, 8, 8), hidden=16, seed=1)
    rng = np.random.default_rng(0)
    model.train()
    model(rng.uniform(0, 1, (8, 3, 16, 16)).astype(np.float32))  # populate running stats
    return model.eval()


def test_eval_forward_is_deterministic():
    model = _small_cnn()
    x = np.random.default_rng(1).uniform(0, 1, (4, 3, 16, 16)).astype(np.float32)
    assert model.predict_logits(x).tobytes() == model.predict_logits(x).tobytes()


def test_batched_forward_equals_single_forwards():
    model = _small_cnn()
    x = np.random.default_rng(2).uniform(0, 1, (6, 3, 16, 16)).astype(np.float32)
    batched = model.predict_logits(x)
    singles = np.concatenate([model.predict_logits(x[i:i + 1]) for i in range(6)])
    np.testing.assert_allclose(batched, singles, atol=1e-5, rtol=0)


def test_training_forward_updates_running_stats_only_in_train_mode():
    model = _small_cnn()
    before = {k: v.copy() for k, v in model.named_buffers().items()}
    model.predict_logits(np.ones((2, 3, 16, 16)))
    for k, v in model.named_buffers().items():
        np.testing.assert_array_equal(v, before[k])


def test_state_dict_round_trip_into_fresh_model():
    model = _small_cnn()
    fresh = build_middlecnn(3, 16, 5, channels=(4, 8, 8), hidden=16, seed=9)
    fresh.load_state_dict(model.state_dict())
    x = np.random.default_rng(3).uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
    assert fresh.predict_logits(x).tobytes() == model.predict_logits(x).tobytes()


def test_build_model_rebuilds_from_hparams():
    model = build_tinymlp(3, 4, 2, seed=5)
    again = build_model(model.arch, model.hparams)
    assert again.state_dict()["param/fc1.weight"].tobytes() == model.state_dict()["param/fc1.weight"].tobytes()
    with pytest.raises(ConfigurationError):
        build_model("resnet18", {})


def test_astype_and_frozen():
    model = build_tinymlp(3, 4, 2)
    assert model.astype(np.float64).dtype == np.float64 and model.dtype == np.float32
    with model.frozen():
        assert not any(p.requires_grad for p in model.parameters())
    assert all(p.requires_grad for p in model.parameters())
