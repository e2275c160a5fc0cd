"""Tests for sliding-window prediction and recomposition."""

import os

import numpy as np
import pytest

from coactseg.inference import (
    InferenceConfig, coverage_count, patch_grid, predict_new_lesions, sliding_window_predict,
    window_origins, write_predictions,
)
from coactseg.network import HEADS, forward, init_params
from coactseg.utils import ConfigError, InferenceError
from coactseg.volume import LabelVolume, Volume3D, load_volume, make_sample_two


@pytest.fixture
def sample(rng):
    dims = (8, 6, 10)
    mask = np.ones(dims, dtype=np.uint8)
    mask[0] = 0
    x_b = Volume3D(rng.normal(size=dims))
    x_fu = Volume3D(rng.normal(size=dims))
    return make_sample_two(x_b, x_fu, LabelVolume.from_array(rng.random(dims) < 0.1),
                           LabelVolume(mask), sample_id="case")


@pytest.fixture
def net(tiny_net_config):
    return init_params(tiny_net_config)


class TestWindows:

    def test_last_origin_clamped(self):
        assert window_origins(8, 4, 3) == [0, 3, 4]
        assert window_origins(8, 4, 4) == [0, 4]
        assert window_origins(4, 4, 1) == [0]

    def test_patch_too_large(self):
        with pytest.raises(InferenceError):
            window_origins(3, 4, 1)

    def test_every_voxel_covered(self):
        counts = coverage_count((8, 6, 10), 4, 3)
        assert counts.min() >= 1

    def test_grid_size(self):
        assert len(patch_grid((8, 6, 10), 4, 4)) == 2 * 2 * 3

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            InferenceConfig(patch_size=4, stride=5).validate()
        with pytest.raises(ConfigError):
            InferenceConfig(patch_size=4, stride=0).validate()
        with pytest.raises(ConfigError):
            InferenceConfig(patch_size=4, stride=2, threshold=1.0).validate()


class TestRecomposition:

    def test_constant_network(self, net, sample):
        for tensor in net.parameters():
            tensor.values = np.zeros_like(tensor.values)
        result = sliding_window_predict(net, sample, InferenceConfig(patch_size=4, stride=1))
        brain = sample.brain_mask.data > 0
        for head in HEADS:
            assert np.all(result.probabilities[head].data[brain] == 0.5)
            assert np.all(result.probabilities[head].data[~brain] == 0.0)
            assert result.labels[head].count() == 0

    def test_brute_force_oracle(self, net, sample):
        cfg = InferenceConfig(patch_size=4, stride=3)
        result = sliding_window_predict(net, sample, cfg)
        origins = patch_grid(sample.dims, 4, 3)
        cache = {}
        for origin in origins:
            window = tuple(slice(o, o + 4) for o in origin)
            triple = forward(net, sample.baseline.data[window], sample.follow_up.data[window],
                             sample.difference.data[window])
            cache[origin] = {head: t.values[0, 0] for head, t in triple.as_dict().items()}
        brain = sample.brain_mask.data > 0
        for head in HEADS:
            expected = np.zeros(sample.dims)
            for voxel in np.ndindex(*sample.dims):
                values = [cache[o][head][tuple(v - s for v, s in zip(voxel, o))]
                          for o in origins if all(s <= v < s + 4 for v, s in zip(voxel, o))]
                expected[voxel] = sum(values) / len(values) if brain[voxel] else 0.0
            assert np.max(np.abs(result.probabilities[head].data - expected)) <= 1e-12

    def test_tiling_stride(self, net, sample):
        result = sliding_window_predict(net, sample, InferenceConfig(patch_size=2, stride=2))
        window = (slice(2, 4), slice(0, 2), slice(4, 6))
        triple = forward(net, sample.baseline.data[window], sample.follow_up.data[window],
                         sample.difference.data[window])
        np.testing.assert_array_equal(result.probabilities["p_nl"].data[window], triple.p_nl.values[0, 0])
        assert np.all(result.coverage == 1)

    def test_labels_follow_threshold(self, net, sample):
        cfg = InferenceConfig(patch_size=4, stride=2, threshold=0.5)
        result = sliding_window_predict(net, sample, cfg)
        for head in HEADS:
            expected = result.probabilities[head].data > 0.5
            assert np.array_equal(result.labels[head].data.astype(bool), expected)

    def test_deterministic(self, net, sample):
        cfg = InferenceConfig(patch_size=4, stride=2)
        a = sliding_window_predict(net, sample, cfg)
        b = sliding_window_predict(net, sample, cfg)
        assert np.array_equal(a.probabilities["p_al_2"].data, b.probabilities["p_al_2"].data)

    def test_volume_smaller_than_patch(self, net, sample):
        with pytest.raises(InferenceError):
            sliding_window_predict(net, sample, InferenceConfig(patch_size=8, stride=2))

    def test_new_lesion_shape(self, net, sample):
        labels = predict_new_lesions(net, sample, InferenceConfig(patch_size=4, stride=2))
        assert labels.dims == sample.dims


def test_write_predictions(tmp_path, net, sample):
    result = sliding_window_predict(net, sample, InferenceConfig(patch_size=4, stride=4))
    paths = write_predictions(result, str(tmp_path), "case")
    assert len(paths) == 6
    assert all(os.path.exists(p) for p in paths.values())
    loaded = load_volume(paths["p_nl_prob"])
    assert np.array_equal(loaded.data, result.probabilities["p_nl"].data)
