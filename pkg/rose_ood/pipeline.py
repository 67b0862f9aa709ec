"""Orchestration layer for training, Fisher fitting, scoring and evaluation."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import AppConfig
from .data import brightness
from .errors import DataFormatError
from .evaluation import auroc, robustness_sweep
from .fisher import FisherArtifact, fit
from .rose import calibrate, score_pipeline
from .runtime import resolve_threads
from .schemas import ImageDataset, ScoreTable, SweepResult
from .storage import ArtifactStore
from .tensor import Rng, set_precision
from .vae import EpochLoss, GradientStream, VaeModel, build_vae, train

logger = logging.getLogger(__name__)

FIT_STREAM = 3
SUBSET_STREAM = 4
BRIGHTNESS_GRID = tuple(round(0.2 * i, 1) for i in range(1, 10))


def write_loss_curve(curve: Sequence[EpochLoss], path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "learning_rate", "loss"])
        for point in curve:
            writer.writerow([point.epoch, format(point.learning_rate, ".17g"), format(point.loss, ".17g")])


class RosePipeline:
    """High-level pipeline composed of the model, Fisher and scoring modules."""

    def __init__(self, config: AppConfig, threads: Optional[int] = None):
        self.config = config
        set_precision(config.runtime.precision)
        self.threads = resolve_threads(threads if threads is not None else config.runtime.threads)
        self.store = ArtifactStore(config.paths.artifacts_dir)

    @property
    def seed(self) -> int:
        return self.config.runtime.seed

    def train(self, dataset: ImageDataset, out: Optional[str] = None) -> Tuple[VaeModel, List[EpochLoss]]:
        """Build, train and checkpoint the VAE; the loss curve lands next to the checkpoint."""
        model = build_vae(self.config.model, seed=self.config.train.seed)
        model, curve = train(model, dataset, self.config.train)
        path = self.store.save_model(model, out)
        write_loss_curve(curve, str(Path(path).with_suffix(".loss.csv")))
        return model, curve

    def fit_subset(self, dataset: ImageDataset, n_samples: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """Indices used for fitting and for calibration."""
        if n_samples > len(dataset):
            raise DataFormatError(f"--n-samples {n_samples} exceeds dataset size {len(dataset)}")
        drawn = Rng(seed).spawn(SUBSET_STREAM).choice(len(dataset), n_samples)
        split = self.config.fisher.calibration_split
        if split <= 0:
            chosen = np.sort(drawn)
            return chosen, chosen
        n_cal = max(2, int(round(split * n_samples)))
        if n_cal >= n_samples:
            raise DataFormatError(f"calibration split leaves no samples to fit ({n_samples} total)")
        # Split in draw order so both parts are uniform over the dataset.
        return np.sort(drawn[: n_samples - n_cal]), np.sort(drawn[n_samples - n_cal :])

    def _stream(self, model: VaeModel, dataset: ImageDataset, indices: np.ndarray, seed: int) -> GradientStream:
        fisher_cfg = self.config.fisher
        return GradientStream(
            model,
            dataset.images[indices],
            indices,
            k=fisher_cfg.iwae_k,
            rng=Rng(seed).spawn(FIT_STREAM),
            batch_size=fisher_cfg.batch_size,
            threads=self.threads,
        )

    def fit(
        self,
        model: VaeModel,
        dataset: ImageDataset,
        n_samples: Optional[int] = None,
        method: Optional[str] = None,
        seed: Optional[int] = None,
        out: Optional[str] = None,
    ) -> FisherArtifact:
        """Fit per-layer factors on in-distribution samples, then calibrate μ/σ."""
        fisher_cfg = self.config.fisher
        seed = self.seed if seed is None else seed
        method = method or fisher_cfg.method
        fit_idx, cal_idx = self.fit_subset(dataset, n_samples or fisher_cfg.n_samples, seed)

        factors = fit(
            self._stream(model, dataset, fit_idx, seed),
            method=method,
            damping_rel=fisher_cfg.damping_rel,
            eig_solver=fisher_cfg.eig_solver,
        )
        ordered = {name: factors[name] for name in model.selected_layers}
        artifact = FisherArtifact(method, ordered, model.fingerprint(), model.weights_checksum())

        stream = self._stream(model, dataset, cal_idx, seed)
        raw = np.concatenate(stream.map_chunks(artifact.raw_scores), axis=0)
        artifact.stats = calibrate(raw, model.selected_layers)
        logger.info(
            "fitted %s on %d sample(s), calibrated on %d: mu=%s sigma=%s",
            method,
            len(fit_idx),
            len(cal_idx),
            np.array2string(artifact.stats.mu, precision=4),
            np.array2string(artifact.stats.sigma, precision=4),
        )
        if out is not None:
            self.store.save_fisher(artifact, out)
        return artifact

    def score(self, model: VaeModel, artifact: FisherArtifact, dataset: ImageDataset) -> ScoreTable:
        return score_pipeline(
            model, artifact, None, dataset, self.config.score, seed=self.seed, threads=self.threads
        )

    def brightness_sweep(
        self,
        model: VaeModel,
        artifact: FisherArtifact,
        in_table: ScoreTable,
        ood: ImageDataset,
        grid: Sequence[float] = BRIGHTNESS_GRID,
    ) -> SweepResult:
        """AUROC of ROSE and NLL against ``ood`` under each brightness factor."""

        def point(factor: float, repeat: int) -> Dict[str, float]:
            table = self.score(model, artifact, brightness(ood, factor))
            return {"rose": auroc(in_table.rose, table.rose), "nll": auroc(in_table.nll, table.nll)}

        return robustness_sweep("brightness", grid, point)

    def fisher_samples_sweep(
        self,
        model: VaeModel,
        train_set: ImageDataset,
        in_test: ImageDataset,
        ood: ImageDataset,
        grid: Sequence[int],
        repeats: int = 1,
        method: Optional[str] = None,
    ) -> SweepResult:
        """ROSE AUROC as the number of Fisher samples varies; each repeat draws a new subset."""

        def point(n: float, repeat: int) -> Dict[str, float]:
            artifact = self.fit(model, train_set, n_samples=int(n), method=method, seed=self.seed + repeat)
            in_table = self.score(model, artifact, in_test)
            out_table = self.score(model, artifact, ood)
            return {"rose": auroc(in_table.rose, out_table.rose)}

        return robustness_sweep("fisher_samples", grid, point, repeats=repeats)

