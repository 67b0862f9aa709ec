import csv

import numpy as np
import pytest

from rose_ood.data import gen_noise
from rose_ood.errors import DataFormatError
from rose_ood.evaluation import auroc
from rose_ood.pipeline import BRIGHTNESS_GRID, FIT_STREAM, RosePipeline
from rose_ood.rose import normalize
from rose_ood.schemas import ImageDataset
from rose_ood.storage import load_checkpoint
from rose_ood.tensor import Rng
from rose_ood.vae import GradientStream, build_vae


def test_brightness_grid():
    assert BRIGHTNESS_GRID == (0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8)


class TestFit:
    def test_artifact_matches_model(self, fitted):
        _, model, artifact = fitted
        assert artifact.method == "ekfac"
        assert artifact.layer_names == list(model.selected_layers)
        assert artifact.fingerprint == model.fingerprint()
        assert artifact.weights_checksum == model.weights_checksum()

    def test_calibration_scores_are_standardized(self, fitted, smooth_images):
        pipeline, model, artifact = fitted
        _, cal_idx = pipeline.fit_subset(smooth_images, pipeline.config.fisher.n_samples, pipeline.seed)
        stream = GradientStream(
            model, smooth_images.images[cal_idx], cal_idx, rng=Rng(pipeline.seed).spawn(FIT_STREAM), batch_size=8
        )
        normalized = normalize(np.concatenate(stream.map_chunks(artifact.raw_scores), axis=0), artifact.stats)
        np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(normalized.std(axis=0), 1.0, rtol=1e-9)
        assert artifact.stats.n_samples == 24
        assert artifact.stats.layer_names == artifact.layer_names
        assert np.all(artifact.stats.sigma > 0)

    def test_too_many_samples(self, tiny_config, smooth_images):
        pipeline = RosePipeline(tiny_config)
        model = build_vae(tiny_config.model)
        with pytest.raises(DataFormatError, match="exceeds"):
            pipeline.fit(model, smooth_images, n_samples=len(smooth_images) + 1)

    def test_calibration_split(self, tiny_config, smooth_images):
        tiny_config.fisher.calibration_split = 0.25
        pipeline = RosePipeline(tiny_config)
        fit_idx, cal_idx = pipeline.fit_subset(smooth_images, 24, seed=0)
        assert (len(fit_idx), len(cal_idx)) == (18, 6)
        assert not set(fit_idx) & set(cal_idx)
        artifact = pipeline.fit(build_vae(tiny_config.model), smooth_images, n_samples=24, method="diag")
        assert artifact.stats.n_samples == 6
        assert all(factor.n_samples == 18 for factor in artifact.layers.values())

    def test_calibration_part_is_not_the_tail(self, tiny_config):
        tiny_config.fisher.calibration_split = 0.25
        pipeline = RosePipeline(tiny_config)
        rows = ImageDataset(images=np.zeros((100, 1, 2, 2)), label="rows")
        fit_idx, cal_idx = pipeline.fit_subset(rows, 100, seed=0)
        assert (len(fit_idx), len(cal_idx)) == (75, 25)
        assert np.array_equal(np.sort(np.concatenate([fit_idx, cal_idx])), np.arange(100))
        assert cal_idx.min() < fit_idx.max() and fit_idx.min() < cal_idx.max()
        assert np.any(cal_idx < 50) and np.any(cal_idx >= 50)
        assert np.all(np.diff(fit_idx) > 0) and np.all(np.diff(cal_idx) > 0)

    def test_subset_depends_on_seed(self, tiny_config, smooth_images):
        pipeline = RosePipeline(tiny_config)
        first, _ = pipeline.fit_subset(smooth_images, 10, seed=0)
        again, _ = pipeline.fit_subset(smooth_images, 10, seed=0)
        other, _ = pipeline.fit_subset(smooth_images, 10, seed=1)
        np.testing.assert_array_equal(first, again)
        assert not np.array_equal(first, other)

    def test_saves_artifact(self, tiny_config, smooth_images, tmp_path):
        pipeline = RosePipeline(tiny_config)
        out = str(tmp_path / "f.rfsh")
        pipeline.fit(build_vae(tiny_config.model), smooth_images, n_samples=8, method="diag", out=out)
        assert pipeline.store.load_fisher(out).method == "diag"


class TestTrain:
    def test_writes_checkpoint_and_curve(self, tiny_config, smooth_images):
        pipeline = RosePipeline(tiny_config)
        model, curve = pipeline.train(smooth_images)
        loaded = load_checkpoint(pipeline.store.checkpoint_path)
        assert loaded.fingerprint() == model.fingerprint()
        assert loaded.weights_checksum() == model.weights_checksum()
        with open(pipeline.store.path("model.loss.csv"), encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "learning_rate", "loss"]
        assert len(rows) == len(curve) + 1
        assert float(rows[-1][2]) == pytest.approx(curve[-1].loss)


class TestSweeps:
    def test_unit_brightness_matches_plain_auroc(self, fitted, smooth_images):
        pipeline, model, artifact = fitted
        ood = gen_noise(8, (16, 16), seed=5)
        in_table = pipeline.score(model, artifact, smooth_images)
        plain = pipeline.score(model, artifact, ood)
        sweep = pipeline.brightness_sweep(model, artifact, in_table, ood, grid=(1.0,))
        assert sweep.grid == [1.0]
        assert sweep.mean("rose") == pytest.approx(auroc(in_table.rose, plain.rose))
        assert sweep.mean("nll") == pytest.approx(auroc(in_table.nll, plain.nll))
        assert sweep.std("rose") == 0.0

    def test_fisher_samples_repeats(self, fitted, smooth_images):
        pipeline, model, _ = fitted
        ood = gen_noise(6, (16, 16), seed=5)
        sweep = pipeline.fisher_samples_sweep(model, smooth_images, smooth_images, ood, grid=(8, 16), repeats=2)
        assert sweep.axis == "fisher_samples"
        assert [len(point) for point in sweep.aurocs["rose"]] == [2, 2]
        assert all(0.0 <= value <= 1.0 for point in sweep.aurocs["rose"] for value in point)
