import logging
import math

import numpy as np
import pytest

from rose_ood.config import ScoreConfig
from rose_ood.errors import ConfigError, DataFormatError, FingerprintMismatchError, ShapeError
from rose_ood.fisher import FisherArtifact
from rose_ood.rose import (
    RoseConfig,
    aggregate,
    calibrate,
    check_artifact,
    normalize,
    read_score_table,
    rose_score,
    rose_scores,
    score_pipeline,
    write_score_table,
)
from rose_ood.schemas import LayerStats, score_table_header


def _unit_stats(n_layers):
    return LayerStats(
        layer_names=[str(i) for i in range(n_layers)],
        mu=np.zeros(n_layers),
        sigma=np.ones(n_layers),
        n_samples=10,
        degenerate=np.zeros(n_layers, dtype=bool),
    )


class TestCalibrate:
    def test_population_standard_deviation(self):
        stats = calibrate(np.array([[0.0], [2.0]]))
        assert stats.mu[0] == 1.0
        assert stats.sigma[0] == 1.0
        assert stats.n_samples == 2

    def test_matches_two_pass_variance(self):
        raw = np.random.default_rng(0).gamma(2.0, 3.0, (300, 4))
        stats = calibrate(raw)
        np.testing.assert_allclose(stats.mu, raw.mean(axis=0), rtol=1e-10)
        np.testing.assert_allclose(stats.sigma, raw.std(axis=0, ddof=0), rtol=1e-10)

    def test_constant_layer_is_degenerate(self, caplog):
        raw = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
        with caplog.at_level(logging.WARNING, logger="rose_ood.rose"):
            stats = calibrate(raw, ["flat", "varied"])
        assert stats.mu[0] == 3.0
        assert stats.degenerate.tolist() == [True, False]
        assert "flat" in caplog.text
        np.testing.assert_array_equal(normalize(raw, stats)[:, 0], 0.0)

    def test_needs_two_samples(self):
        with pytest.raises(DataFormatError):
            calibrate(np.ones((1, 3)))

    def test_layer_name_count(self):
        with pytest.raises(ShapeError):
            calibrate(np.ones((4, 2)), ["only-one"])


class TestRoseScore:
    def test_max_norm(self):
        assert rose_score([1.0, -2.0, 0.5], _unit_stats(3)) == 1.0

    def test_one_norm(self):
        assert rose_score([1.0, -2.0, 0.5], _unit_stats(3), RoseConfig(p=1)) == 1.5

    def test_all_below_mean_is_zero(self):
        assert rose_score([-1.0, -0.5, 0.0], _unit_stats(3), RoseConfig(p=2)) == 0.0

    def test_beta_shifts_before_relu(self):
        config = RoseConfig(beta=[0.0, 3.0, 0.0], p=math.inf)
        assert rose_score([1.0, -2.0, 0.5], _unit_stats(3), config) == 1.0
        config = RoseConfig(beta=[0.0, 4.0, 0.0], p=math.inf)
        assert rose_score([1.0, -2.0, 0.5], _unit_stats(3), config) == 2.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            rose_score([1.0, 2.0], _unit_stats(3))
        with pytest.raises(ShapeError):
            rose_score([1.0, 2.0, 3.0], _unit_stats(3), RoseConfig(beta=[0.0, 1.0]))

    def test_norm_order_below_one(self):
        with pytest.raises(ConfigError):
            RoseConfig(p=0.5)

    def test_p_norms_are_non_increasing(self):
        normalized = np.random.default_rng(1).standard_normal((50, 4))
        values = [aggregate(normalized, RoseConfig(p=p)) for p in (1, 2, 3, math.inf)]
        for small_p, large_p in zip(values, values[1:]):
            assert np.all(large_p <= small_p + 1e-12)

    def test_monotone_in_each_layer(self):
        stats = calibrate(np.random.default_rng(2).standard_normal((40, 3)))
        raw = np.array([0.2, -0.3, 0.1])
        base = rose_score(raw, stats, RoseConfig(p=2))
        for layer in range(3):
            bumped = raw.copy()
            bumped[layer] += 0.5
            assert rose_score(bumped, stats, RoseConfig(p=2)) >= base

    @pytest.mark.parametrize("c", [1e-3, 1.0, 1e3])
    def test_layer_scaling_leaves_rose_unchanged(self, c):
        rng = np.random.default_rng(3)
        calib = rng.uniform(0.5, 2.0, (200, 4)).astype(np.float32)
        test = rng.uniform(0.5, 3.0, (50, 4)).astype(np.float32)
        factor = np.array([1.0, c, 1.0, 1.0], dtype=np.float32)
        _, base = rose_scores(test, calibrate(calib))
        _, scaled = rose_scores(test * factor, calibrate(calib * factor))
        np.testing.assert_allclose(scaled, base, rtol=1e-6, atol=1e-6)


class TestScoreTable:
    def test_header(self):
        assert score_table_header(2) == ["id", "s_raw_1", "s_raw_2", "s_hat_1", "s_hat_2", "rose", "nll"]

    def test_round_trip_keeps_every_digit(self, fitted, smooth_images, tmp_path):
        pipeline, model, artifact = fitted
        table = pipeline.score(model, artifact, smooth_images)
        path = tmp_path / "scores.csv"
        write_score_table(table, str(path))
        back = read_score_table(str(path))
        np.testing.assert_array_equal(back.raw, table.raw)
        np.testing.assert_array_equal(back.normalized, table.normalized)
        np.testing.assert_array_equal(back.rose, table.rose)
        np.testing.assert_array_equal(back.nll, table.nll)
        assert path.read_text(encoding="utf-8").splitlines()[0] == ",".join(table.header())

    def test_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,a,b,c,d\n0,1,2,3,4\n", encoding="utf-8")
        with pytest.raises(DataFormatError):
            read_score_table(str(path))

    def test_rejects_non_finite(self, tmp_path):
        path = tmp_path / "nan.csv"
        path.write_text(",".join(score_table_header(1)) + "\n0,1,nan,0.5,2\n", encoding="utf-8")
        with pytest.raises(DataFormatError):
            read_score_table(str(path))

    def test_rejects_short_rows(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text(",".join(score_table_header(1)) + "\n0,1,2\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match=":2:"):
            read_score_table(str(path))


class TestScorePipeline:
    def test_one_backward_pass_per_sample(self, fitted, smooth_images):
        pipeline, model, artifact = fitted
        before = model.samples_backpropagated
        table = pipeline.score(model, artifact, smooth_images)
        assert model.samples_backpropagated - before == len(smooth_images)
        assert len(table) == len(smooth_images)
        assert len(table.header()) == 2 * len(model.selected_layers) + 3

    def test_rerun_is_bit_identical(self, fitted, smooth_images):
        pipeline, model, artifact = fitted
        first = pipeline.score(model, artifact, smooth_images)
        second = pipeline.score(model, artifact, smooth_images)
        np.testing.assert_array_equal(first.raw, second.raw)
        np.testing.assert_array_equal(first.nll, second.nll)

    def test_threads_do_not_change_rows(self, fitted, smooth_images):
        _, model, artifact = fitted
        config = ScoreConfig(batch_size=5, nll_k=3)
        serial = score_pipeline(model, artifact, None, smooth_images, config, seed=4, threads=1)
        parallel = score_pipeline(model, artifact, None, smooth_images, config, seed=4, threads=4)
        np.testing.assert_array_equal(serial.raw, parallel.raw)
        np.testing.assert_array_equal(serial.rose, parallel.rose)
        np.testing.assert_array_equal(serial.ids, np.arange(len(smooth_images)))

    def test_rose_is_recomputable_from_raw_columns(self, fitted, smooth_images):
        pipeline, model, artifact = fitted
        table = pipeline.score(model, artifact, smooth_images)
        normalized, rose = rose_scores(table.raw, artifact.stats)
        np.testing.assert_allclose(table.normalized, normalized, rtol=1e-12)
        np.testing.assert_allclose(table.rose, rose, rtol=1e-12)

    def test_foreign_artifact_is_refused(self, fitted, smooth_images):
        _, model, artifact = fitted
        foreign = FisherArtifact(artifact.method, artifact.layers, 123, artifact.weights_checksum, artifact.stats)
        with pytest.raises(FingerprintMismatchError):
            score_pipeline(model, foreign, None, smooth_images)
        with pytest.raises(FingerprintMismatchError):
            check_artifact(model, FisherArtifact(artifact.method, artifact.layers, model.fingerprint(), 1))

    def test_missing_statistics(self, fitted, smooth_images):
        _, model, artifact = fitted
        bare = FisherArtifact(artifact.method, artifact.layers, artifact.fingerprint, artifact.weights_checksum)
        with pytest.raises(DataFormatError):
            score_pipeline(model, bare, None, smooth_images)
