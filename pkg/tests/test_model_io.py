import json

import numpy as np
import pytest

from relprop import model_graph as mg
from relprop import model_io as io
from relprop.errors import (
    ImageFormatError,
    ManifestShapeError,
    NonFiniteWeightError,
    TruncatedBlobError,
    VersionMismatchError,
)


def build_mixed_net():
    rng = np.random.default_rng(9)
    block = mg.ResidualBlock(
        (mg.Conv2D(rng.normal(size=(3, 3, 3, 2)), rng.normal(size=3), (2, 2), "same"), mg.ReLU()),
        projection=mg.Conv2D(rng.normal(size=(3, 1, 1, 2)), None, (2, 2)),
    )
    layers = (
        mg.Conv2D(rng.normal(size=(2, 3, 3, 1)), rng.normal(size=2), (1, 1), "same"),
        mg.ReLU(),
        block,
        mg.AvgPool2D((2, 2), (2, 2)),
        mg.Flatten(),
        mg.Dense(rng.normal(size=(4, 12)), rng.normal(size=4)),
    )
    return mg.Network(layers, (8, 8, 1), 4, name="mixed",
                      preprocessing=mg.Preprocessing("centered", np.array([0.5, 0.5, 0.5])))


class TestModelRoundTrip:
    def test_blob_byte_identical(self):
        net = build_mixed_net()
        manifest, blob = io.save_model(net)
        again = io.load_model_bytes(manifest, blob)
        manifest2, blob2 = io.save_model(again)
        assert blob == blob2
        assert json.loads(manifest) == json.loads(manifest2)

    def test_forward_agrees_after_round_trip(self):
        net = build_mixed_net()
        manifest, blob = io.save_model(net)
        again = io.load_model_bytes(manifest, blob)
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(8, 8, 1))
        a, _ = mg.forward(net, x)
        b, _ = mg.forward(again, x)
        # weights pass through binary32 once; outputs agree to that precision
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)

    def test_dense2_fixture_layer_count(self, models_dir):
        net = io.load_model(models_dir / "dense2.json", models_dir / "dense2.bin")
        assert len(net.layers) == 2
        assert net.num_outputs == 2

    def test_truncated_blob(self):
        net = build_mixed_net()
        manifest, blob = io.save_model(net)
        with pytest.raises(TruncatedBlobError):
            io.load_model_bytes(manifest, blob[:-4])

    def test_trailing_bytes_rejected(self):
        net = build_mixed_net()
        manifest, blob = io.save_model(net)
        with pytest.raises(ManifestShapeError):
            io.load_model_bytes(manifest, blob + b"\x00\x00\x00\x00")

    def test_version_mismatch(self):
        net = build_mixed_net()
        manifest, blob = io.save_model(net)
        doc = json.loads(manifest)
        doc["format_version"] = 99
        with pytest.raises(VersionMismatchError):
            io.load_model_bytes(json.dumps(doc).encode(), blob)

    def test_declared_shape_larger_than_blob(self):
        # manifest says Dense[3,2] but the blob only holds a [2,2] weight
        manifest = {
            "format_version": 1,
            "input_shape": [2],
            "num_outputs": 3,
            "layers": [{
                "kind": "dense", "weights_shape": [3, 2],
                "weights_offset": 0, "weights_length": 24,
                "bias_offset": 24, "bias_length": 12,
            }],
        }
        blob = np.zeros(4, dtype="<f4").tobytes()  # 16 bytes: fits [2,2] only
        with pytest.raises(TruncatedBlobError):
            io.load_model_bytes(json.dumps(manifest).encode(), blob)

    def test_declared_length_inconsistent_with_shape(self):
        manifest = {
            "format_version": 1,
            "input_shape": [2],
            "num_outputs": 3,
            "layers": [{
                "kind": "dense", "weights_shape": [3, 2],
                "weights_offset": 0, "weights_length": 16,
                "bias_offset": 16, "bias_length": 12,
            }],
        }
        blob = np.zeros(7, dtype="<f4").tobytes()
        with pytest.raises(ManifestShapeError):
            io.load_model_bytes(json.dumps(manifest).encode(), blob)

    def test_overlapping_ranges_rejected(self):
        manifest = {
            "format_version": 1,
            "input_shape": [2],
            "num_outputs": 2,
            "layers": [{
                "kind": "dense", "weights_shape": [2, 2],
                "weights_offset": 0, "weights_length": 16,
                "bias_offset": 8, "bias_length": 8,
            }],
        }
        blob = np.zeros(6, dtype="<f4").tobytes()
        with pytest.raises(ManifestShapeError):
            io.load_model_bytes(json.dumps(manifest).encode(), blob)

    def test_non_finite_weights_rejected(self):
        manifest = {
            "format_version": 1,
            "input_shape": [2],
            "num_outputs": 2,
            "layers": [{
                "kind": "dense", "weights_shape": [2, 2],
                "weights_offset": 0, "weights_length": 16,
                "bias_offset": 16, "bias_length": 8,
            }],
        }
        values = np.array([1.0, np.inf, 0.0, 1.0, 0.0, 0.0], dtype="<f4")
        with pytest.raises(NonFiniteWeightError):
            io.load_model_bytes(json.dumps(manifest).encode(), values.tobytes())


class TestImageIO:
    def test_red_image_scaling(self, tmp_path):
        path = tmp_path / "red.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes([255, 0, 0] * 4))
        img = io.load_image(path)
        assert img.shape == (2, 2, 3)
        np.testing.assert_array_equal(img[:, :, 0], np.ones((2, 2)))
        np.testing.assert_array_equal(img[:, :, 1:], np.zeros((2, 2, 2)))

    def test_round_trip_integer_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        raster = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
        img = raster.astype(np.float64) / 255.0
        path = tmp_path / "x.ppm"
        io.save_image(img, path)
        again = io.load_image(path)
        np.testing.assert_array_equal(np.rint(again * 255).astype(np.uint8), raster)

    def test_header_comments_accepted(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n1 1\n# more\n255\n" + bytes([1, 2, 3]))
        img = io.load_image(path)
        np.testing.assert_allclose(img[0, 0], np.array([1, 2, 3]) / 255.0)

    def test_bad_maxval(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes([0] * 6))
        with pytest.raises(ImageFormatError):
            io.load_image(path)

    def test_truncated_raster(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes([0] * 5))
        with pytest.raises(ImageFormatError):
            io.load_image(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "p5.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(ImageFormatError):
            io.load_image(path)


class TestMaskIO:
    def test_mask_encoding(self, tmp_path):
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = True
        path = tmp_path / "m.pgm"
        io.save_mask(mask, path)
        data = path.read_bytes()
        assert data == b"P5\n2 2\n255\n" + bytes([255, 0, 0, 0])

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        mask = rng.random((6, 5)) < 0.4
        path = tmp_path / "m.pgm"
        io.save_mask(mask, path)
        np.testing.assert_array_equal(io.load_mask(path), mask)

    def test_threshold_at_midpoint(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n3 1\n255\n" + bytes([127, 128, 255]))
        np.testing.assert_array_equal(io.load_mask(path), [[False, True, True]])
