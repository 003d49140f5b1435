import struct

import numpy as np
import pytest

from adhocloc.nn import (
    Conv2D,
    Dense,
    Flatten,
    NetworkWeights,
    ReLU,
    ShapeMismatchError,
    Softmax,
    WeightsFormatError,
    conv2d,
    forward,
    load_manifest,
    load_weights,
    manifest_path_for,
    save_manifest,
    save_weights,
    softmax,
)


def conv2d_naive(x, weights, bias):
    """Quadruple-loop reference convolution."""
    oc, ic, kh, kw = weights.shape
    _, h, w = x.shape
    out = np.zeros((oc, h - kh + 1, w - kw + 1))
    for o in range(oc):
        for i in range(h - kh + 1):
            for j in range(w - kw + 1):
                acc = 0.0
                for c in range(ic):
                    for p in range(kh):
                        for q in range(kw):
                            acc += x[c, i + p, j + q] * weights[o, c, p, q]
                out[o, i, j] = acc + bias[o]
    return out


def random_model(rng, L=5):
    layers = (
        Conv2D(rng.standard_normal((3, 1, 2, 2)), rng.standard_normal(3)),
        ReLU(),
        Conv2D(rng.standard_normal((2, 3, 2, 2)), rng.standard_normal(2)),
        ReLU(),
        Flatten(),
        Dense(rng.standard_normal((L, 2 * 2 * 6)), rng.standard_normal(L)),
        Softmax(),
    )
    return NetworkWeights(layers, (1, 4, 8))


class TestForward:
    def test_zero_dense_gives_uniform(self):
        L = 37
        model = NetworkWeights(
            (Flatten(), Dense(np.zeros((L, 12)), np.zeros(L)), Softmax()),
            (1, 3, 4),
        )
        out = forward(model, np.random.default_rng(0).standard_normal((1, 3, 4)))
        assert np.allclose(out, 1.0 / L)

    def test_identity_1x1_conv(self):
        x = np.random.default_rng(1).standard_normal((1, 5, 7))
        out = conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        assert np.allclose(out, x)

    def test_conv_matches_naive_reference(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 8, 8))
        w = rng.standard_normal((5, 4, 3, 2))
        b = rng.standard_normal(5)
        assert np.max(np.abs(conv2d(x, w, b) - conv2d_naive(x, w, b))) < 1e-10

    def test_output_is_simplex(self):
        rng = np.random.default_rng(3)
        model = random_model(rng)
        out = forward(model, rng.standard_normal((1, 4, 8)))
        assert out.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(out > 0)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        model = random_model(rng)
        x = rng.standard_normal((1, 4, 8))
        assert np.array_equal(forward(model, x), forward(model, x))

    def test_input_shape_mismatch(self):
        model = random_model(np.random.default_rng(5))
        with pytest.raises(ShapeMismatchError):
            forward(model, np.zeros((1, 4, 9)))

    def test_softmax_stable_for_large_inputs(self):
        out = softmax(np.array([1e4, -1e4, 0.0]))
        assert np.all(np.isfinite(out))
        assert out.sum() == pytest.approx(1.0)
        assert np.all(out > 0)


class TestValidation:
    def test_channel_mismatch_names_layer(self):
        layers = (
            Conv2D(np.zeros((2, 3, 2, 2)), np.zeros(2)),  # expects 3 channels
            Softmax(),
        )
        with pytest.raises(ShapeMismatchError, match="layer 0"):
            NetworkWeights(layers, (1, 4, 8))

    def test_dense_without_flatten_names_layer(self):
        layers = (Dense(np.zeros((5, 32)), np.zeros(5)), Softmax())
        with pytest.raises(ShapeMismatchError, match="layer 0"):
            NetworkWeights(layers, (1, 4, 8))

    def test_dense_dim_mismatch_names_layer(self):
        layers = (Flatten(), Dense(np.zeros((5, 33)), np.zeros(5)), Softmax())
        with pytest.raises(ShapeMismatchError, match="layer 1"):
            NetworkWeights(layers, (1, 4, 8))

    def test_non_finite_weights_rejected(self):
        w = np.zeros((5, 32))
        w[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            NetworkWeights((Flatten(), Dense(w, np.zeros(5)), Softmax()), (1, 4, 8))


class TestAdlwFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        model = random_model(rng)
        path = tmp_path / "model.adlw"
        save_weights(model, path)
        back = load_weights(path, input_shape=(1, 4, 8))
        assert len(back.layers) == len(model.layers)
        for a, b in zip(model.layers, back.layers):
            assert type(a) is type(b)
            if hasattr(a, "weights"):
                assert np.array_equal(a.weights, b.weights)
                assert np.array_equal(a.bias, b.bias)

    def test_truncated_file(self, tmp_path):
        rng = np.random.default_rng(7)
        model = random_model(rng)
        path = tmp_path / "model.adlw"
        save_weights(model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(WeightsFormatError, match="truncated"):
            load_weights(path, input_shape=(1, 4, 8))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.adlw"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(WeightsFormatError, match="magic"):
            load_weights(path, input_shape=(1, 4, 8))

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "model.adlw"
        path.write_bytes(b"ADLW" + struct.pack("<II", 99, 0))
        with pytest.raises(WeightsFormatError, match="version 99"):
            load_weights(path, input_shape=(1, 4, 8))

    def test_shape_from_manifest(self, tmp_path):
        rng = np.random.default_rng(8)
        model = random_model(rng)
        path = tmp_path / "model.adlw"
        save_weights(model, path)
        save_manifest(
            manifest_path_for(path),
            {"input_channels": 1, "input_height": 4, "input_width": 8, "grid_classes": 5},
        )
        back = load_weights(path)
        assert back.input_shape == (1, 4, 8)

    def test_missing_shape_and_manifest(self, tmp_path):
        model = random_model(np.random.default_rng(9))
        path = tmp_path / "model.adlw"
        save_weights(model, path)
        with pytest.raises(WeightsFormatError, match="manifest"):
            load_weights(path)

    def test_wrong_shape_fails_validation(self, tmp_path):
        model = random_model(np.random.default_rng(10))
        path = tmp_path / "model.adlw"
        save_weights(model, path)
        with pytest.raises(ShapeMismatchError):
            load_weights(path, input_shape=(1, 4, 9))


class TestManifest:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.manifest.txt"
        save_manifest(path, {"input_channels": 1, "note": "toy run"})
        entries = load_manifest(path)
        assert entries["input_channels"] == "1"
        assert entries["note"] == "toy run"

    def test_skips_comments_and_blanks(self, tmp_path):
        path = tmp_path / "m.manifest.txt"
        path.write_text("# header\n\ninput_channels = 1\n")
        assert load_manifest(path) == {"input_channels": "1"}
