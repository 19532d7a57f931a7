import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlkd.heatmaps import dequantize, emit_heatmaps, load_map, quantize, read_pgm, write_map, write_pgm
from mlkd.model import extract_attention, forward, init_model
from mlkd.tensor import Tensor


class TestPgm:
    def test_round_trip(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, size=(4, 5)).astype(np.uint8)
        write_pgm(tmp_path / "a.pgm", px)
        assert (tmp_path / "a.pgm").read_text().startswith("P2\n5 4\n255\n")
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), px)

    def test_rejects_other_formats(self, tmp_path):
        (tmp_path / "b.pgm").write_text("P5\n1 1\n255\n0\n")
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "b.pgm")

    def test_constant_map_is_uniform_gray(self, tmp_path):
        write_map(tmp_path / "c.pgm", np.full((4, 4), 3.0))
        assert set(read_pgm(tmp_path / "c.pgm").ravel()) == {128}
        np.testing.assert_array_equal(load_map(tmp_path / "c.pgm"), 3.0)

    def test_sidecar_always_written(self, tmp_path):
        write_map(tmp_path / "d.pgm", np.arange(4.0).reshape(2, 2), {"kind": "cam"})
        side = json.loads((tmp_path / "d.json").read_text())
        assert side["min"] == 0.0 and side["max"] == 3.0 and side["kind"] == "cam"


class TestEmit:
    def test_files_and_round_trip(self, tmp_path):
        model = init_model(6, (16,), seed=0)
        images = np.random.default_rng(0).random((3, 32, 32))
        written = emit_heatmaps(model, images, [1], tmp_path, threshold=0.0)
        bundle = forward(model, images[1])
        cams = [p for p in written if "_cam_" in p.name]
        assert len(cams) == 6
        for path in cams:
            k = int(path.name.split("_k")[1].split("_")[0])
            assert f"_p{bundle.probs.data[k]:.3f}" in path.name
            truth = bundle.cams.data[k].reshape(4, 4)
            span = truth.max() - truth.min()
            assert np.max(np.abs(load_map(path) - truth)) <= span / 255

    def test_threshold_filters_classes(self, tmp_path):
        model = init_model(6, (16,), seed=0)
        images = np.random.default_rng(0).random((1, 32, 32))
        written = emit_heatmaps(model, images, [0], tmp_path, threshold=1.0)
        assert sorted(p.name for p in written) == ["ex0000_attention.pgm", "ex0000_image.pgm"]

    def test_empty_selection(self, tmp_path):
        with pytest.raises(ValueError, match="no examples"):
            emit_heatmaps(init_model(6, (16,)), np.zeros((1, 32, 32)), [], tmp_path)

    def test_attention_unchanged_by_negated_maps(self, tmp_path):
        x = np.random.default_rng(2).normal(size=(16, 5))
        write_map(tmp_path / "pos.pgm", extract_attention(Tensor(x)).data.reshape(4, 4))
        write_map(tmp_path / "neg.pgm", extract_attention(Tensor(-x)).data.reshape(4, 4))
        assert (tmp_path / "pos.pgm").read_bytes() == (tmp_path / "neg.pgm").read_bytes()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-6, 1e6))
def test_quantization_error_bound(seed, scale):
    values = np.random.default_rng(seed).normal(size=(4, 4)) * scale
    q, lo, hi = quantize(values)
    err = np.max(np.abs(dequantize(q, lo, hi) - values))
    # rounding to the nearest level is at most half a step
    assert err <= (hi - lo) / 255 * (0.5 + 1e-9)
