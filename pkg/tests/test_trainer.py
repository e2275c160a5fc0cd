"""Tests for Adam, the training loop and the staged schedule."""

import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from coactseg.losses import LossWeights
from coactseg.network import SegNetConfig, load_checkpoint
from coactseg.phantom import PhantomConfig, gen_dataset, gen_single, gen_two, read_manifest
from coactseg.trainer import (
    LOG_COLUMNS, AdamState, TrainConfig, adam_step, patch_diagnostics, staged, train,
    train_on_samples, train_staged,
)
from coactseg.utils import ConfigError, TrainingError, read_table_seed

SMALL_NET = SegNetConfig(levels=2, base_channels=2, head_channels=2, param_seed=5)


@pytest.fixture(scope="module")
def small_samples():
    cfg = PhantomConfig(dims=(8, 8, 8), lesion_count_range=(1, 1), lesion_radius_range_vox=(1, 1),
                        new_lesion_count_range=(1, 1), seed=21)
    singles = [gen_single(replace(cfg, seed=s)) for s in (1, 2)]
    twos = [gen_two(replace(cfg, seed=s))[0] for s in (3, 4)]
    return singles + twos


def _cfg(**overrides):
    base = TrainConfig(iterations=4, n_single=1, n_two=1, patch_size=4, shift_margin=1,
                       weights=LossWeights(1.0, 1.0, 2), seed=9, log_every=1,
                       checkpoint_every=100, network=SMALL_NET)
    return replace(base, **overrides)


class TestAdam:

    def test_first_step_scalar(self):
        params, state = adam_step([np.array([0.0])], [np.array([1.0])],
                                  AdamState.zeros_like([np.zeros(1)]), lr=0.1)
        assert params[0][0] == pytest.approx(-0.1, rel=1e-6)
        assert state.step == 1

    def test_zero_gradient(self, rng):
        start = rng.standard_normal((3, 2))
        params, _ = adam_step([start], [np.zeros((3, 2))], AdamState.zeros_like([start]), lr=0.5)
        np.testing.assert_array_equal(params[0], start)

    def test_missing_gradient_is_zero(self, rng):
        start = rng.standard_normal(4)
        params, _ = adam_step([start], [None], AdamState.zeros_like([start]), lr=0.5)
        np.testing.assert_array_equal(params[0], start)

    def test_inputs_untouched(self, rng):
        start = rng.standard_normal(4)
        copy = start.copy()
        state = AdamState.zeros_like([start])
        adam_step([start], [np.ones(4)], state, lr=0.1)
        np.testing.assert_array_equal(start, copy)
        assert state.step == 0

    def test_trajectory_is_deterministic(self, rng):
        grads = [rng.standard_normal(5) for _ in range(10)]

        def run():
            params, state = [np.zeros(5)], AdamState.zeros_like([np.zeros(5)])
            for g in grads:
                params, state = adam_step(params, [g], state, lr=0.01)
            return params[0]
        assert np.array_equal(run(), run())


class TestTrainConfig:

    def test_switch_after_end(self):
        with pytest.raises(ConfigError):
            _cfg(weights=LossWeights(1.0, 1.0, 10)).validate()

    def test_patch_divisibility(self):
        with pytest.raises(ConfigError):
            _cfg(patch_size=5).validate()

    def test_positive_lr(self):
        with pytest.raises(ConfigError):
            _cfg(lr=0.0).validate()

    def test_staged_switch(self):
        assert staged(_cfg(iterations=10)).weights.switch_iteration == 5


class TestTraining:

    def test_lambda_trace(self, small_samples):
        result = train_on_samples(small_samples, _cfg(iterations=6, weights=LossWeights(1.0, 1.0, 3)))
        assert list(result.log.columns) == LOG_COLUMNS
        assert list(result.log["iteration"]) == [0, 1, 2, 3, 4, 5]
        assert list(result.log["lambda2"]) == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        assert np.all(np.isfinite(result.log["total"]))

    def test_single_iteration(self, small_samples):
        result = train_on_samples(small_samples, _cfg(iterations=1, weights=LossWeights(1.0, 1.0, 0),
                                                      log_every=10))
        assert len(result.log) == 1
        assert result.checkpoint == ""

    def test_deterministic(self, small_samples):
        a = train_on_samples(small_samples, _cfg())
        b = train_on_samples(small_samples, _cfg())
        for x, y in zip(a.net.parameters(), b.net.parameters()):
            assert np.array_equal(x.values, y.values)
        pd.testing.assert_frame_equal(a.log.drop(columns="seconds"), b.log.drop(columns="seconds"))

    def test_staged_differs_from_immediate(self, small_samples):
        immediate = train_on_samples(small_samples, _cfg(weights=LossWeights(1.0, 1.0, 0)))
        delayed = train_on_samples(small_samples, staged(_cfg()))
        assert any(not np.array_equal(x.values, y.values)
                   for x, y in zip(immediate.net.parameters(), delayed.net.parameters()))

    def test_missing_kind(self, small_samples):
        singles = [s for s in small_samples if s.kind.value == "single"]
        with pytest.raises(TrainingError):
            train_on_samples(singles, _cfg())

    def test_single_only_batches(self, small_samples):
        singles = [s for s in small_samples if s.kind.value == "single"]
        result = train_on_samples(singles, _cfg(n_single=2, n_two=0))
        assert (result.log["l_nl"] == 0.0).all()

    def test_diagnostics(self, small_samples):
        result = train_on_samples(small_samples, _cfg())
        report = patch_diagnostics(result.net, small_samples, n_batches=2, seed=0, patch_size=4,
                                   shift_margin=1)
        assert set(report) == {"p_al_1", "p_al_2", "p_nl", "head_gap"}
        assert all(0.0 <= report[h] <= 1.0 for h in ("p_al_1", "p_al_2", "p_nl"))
        assert report["head_gap"] >= 0


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = PhantomConfig(dims=(8, 8, 8), lesion_count_range=(1, 1), lesion_radius_range_vox=(1, 1),
                        new_lesion_count_range=(1, 1), seed=4)
    gen_dataset(cfg, 1, 1, str(out), val_single=1, val_two=1)
    return read_manifest(str(out / "manifest.tsv"))


class TestTrainFromManifest:

    def test_outputs(self, manifest, tmp_path):
        result = train(manifest, _cfg(iterations=4, checkpoint_every=2), str(tmp_path))
        assert os.path.exists(tmp_path / "checkpoint_000002.ckpt")
        assert os.path.exists(tmp_path / "train_log.csv")
        net, header = load_checkpoint(result.checkpoint)
        assert header["iteration"] == 4
        assert header["seed"] == 9
        assert read_table_seed(str(tmp_path / "train_log.csv")) == 9
        log = pd.read_csv(tmp_path / "train_log.csv", comment="#")
        assert list(log.columns) == LOG_COLUMNS
        assert len(log) == 4

    def test_checkpoints_are_reproducible(self, manifest, tmp_path):
        first = train(manifest, _cfg(), str(tmp_path / "a")).checkpoint
        second = train(manifest, _cfg(), str(tmp_path / "b")).checkpoint
        with open(first, "rb") as a, open(second, "rb") as b:
            assert a.read() == b.read()

    def test_staged_wrapper(self, manifest, tmp_path):
        result = train_staged(manifest, _cfg(iterations=4, weights=LossWeights(1.0, 1.0, 0)),
                              str(tmp_path))
        assert list(result.log["lambda2"]) == [0.0, 0.0, 1.0, 1.0]

    def test_invalid_manifest(self):
        with pytest.raises(TrainingError):
            train(pd.DataFrame({"sample_id": []}), _cfg(), None)


@pytest.fixture(scope="module")
def phantoms():
    cfg = PhantomConfig(dims=(16, 16, 16), lesion_count_range=(2, 2),
                        lesion_radius_range_vox=(2, 2), new_lesion_count_range=(1, 1), seed=1337)
    return ([gen_single(replace(cfg, seed=s)) for s in (1, 2)]
            + [gen_two(replace(cfg, seed=s))[0] for s in (3, 4)])


@pytest.mark.slow
class TestOverfit:

    def test_loss_drops(self, phantoms):
        cfg = TrainConfig(iterations=300, patch_size=16, shift_margin=2,
                          weights=LossWeights(1.0, 1.0, 150), log_every=25, seed=1337,
                          network=SegNetConfig(levels=2, base_channels=4, head_channels=4))
        result = train_on_samples(phantoms, cfg)
        assert result.log["total"].iloc[-1] < 0.5 * result.log["total"].iloc[0]
