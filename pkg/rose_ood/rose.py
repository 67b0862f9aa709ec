"""Layer-wise normalization of Fisher quadratic forms and their aggregation into ROSE."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .config import ScoreConfig, parse_norm_order
from .errors import AutodiffError, DataFormatError, FingerprintMismatchError, ShapeError
from .fisher import FisherArtifact
from .runtime import chunk_ranges, ordered_map
from .schemas import ImageDataset, LayerStats, ScoreTable, score_table_header
from .tensor import Rng, as_tensor
from .vae import VaeModel, iwae_nll, latent_noise, score_gradients

logger = logging.getLogger(__name__)

DEGENERATE_REL = 1e-12
# Streams derived from the run seed; per-sample noise is spawned below these.
SCORE_STREAM = 1
NLL_STREAM = 2


@dataclass
class RoseConfig:
    """Aggregation hyper-parameters: offsets ``beta`` (one per layer) and norm order ``p``."""

    beta: Optional[Sequence[float]] = None
    p: float = math.inf

    def __post_init__(self) -> None:
        self.p = parse_norm_order(self.p)

    @classmethod
    def from_score_config(cls, config: ScoreConfig) -> "RoseConfig":
        return cls(beta=config.beta, p=config.p)

    def beta_vector(self, n_layers: int) -> np.ndarray:
        if self.beta is None:
            return np.zeros(n_layers)
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (n_layers,):
            raise ShapeError(f"beta has {beta.size} entries, expected one per layer ({n_layers})")
        return beta


def calibrate(raw_scores: np.ndarray, layer_names: Optional[Sequence[str]] = None) -> LayerStats:
    """Per-layer mean and population standard deviation of in-distribution raw scores."""
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.ndim != 2:
        raise ShapeError(f"raw scores must be an (N, L) matrix, got shape {raw.shape}")
    if raw.shape[0] < 2:
        raise DataFormatError(f"calibration needs at least 2 samples, got {raw.shape[0]}")
    names = list(layer_names) if layer_names is not None else [str(i) for i in range(1, raw.shape[1] + 1)]
    if len(names) != raw.shape[1]:
        raise ShapeError(f"{len(names)} layer names for {raw.shape[1]} score columns")

    mu = raw.mean(axis=0)
    sigma = np.sqrt(np.mean((raw - mu) ** 2, axis=0))
    degenerate = sigma <= np.maximum(DEGENERATE_REL * np.abs(mu), np.finfo(np.float64).tiny)
    for name in np.asarray(names)[degenerate]:
        logger.warning("layer %s has (near) zero score variance; its normalized score is fixed at 0", name)
    return LayerStats(layer_names=names, mu=mu, sigma=sigma, n_samples=int(raw.shape[0]), degenerate=degenerate)


def normalize(raw_scores: np.ndarray, stats: LayerStats) -> np.ndarray:
    """ŝ = (s − μ) / σ per layer; degenerate layers map to 0."""
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.shape[-1] != stats.n_layers:
        raise ShapeError(f"scores have {raw.shape[-1]} layers, statistics have {stats.n_layers}")
    safe_sigma = np.where(stats.degenerate, 1.0, stats.sigma)
    return np.where(stats.degenerate, 0.0, (raw - stats.mu) / safe_sigma)


def aggregate(normalized: np.ndarray, config: RoseConfig) -> np.ndarray:
    """‖ReLU(ŝ + β)‖_p along the last axis."""
    normalized = np.asarray(normalized, dtype=np.float64)
    shifted = np.maximum(normalized + config.beta_vector(normalized.shape[-1]), 0.0)
    return np.linalg.norm(shifted, ord=config.p, axis=-1)


def rose_score(raw: Sequence[float], stats: LayerStats, config: Optional[RoseConfig] = None) -> float:
    """ROSE value of one sample's per-layer raw score vector."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (stats.n_layers,):
        raise ShapeError(f"expected {stats.n_layers} layer scores, got shape {raw.shape}")
    return float(aggregate(normalize(raw, stats), config or RoseConfig()))


def rose_scores(
    raw: np.ndarray, stats: LayerStats, config: Optional[RoseConfig] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """(ŝ, ROSE) for an (N, L) raw score matrix."""
    normalized = normalize(raw, stats)
    return normalized, aggregate(normalized, config or RoseConfig())


def check_artifact(model: VaeModel, artifact: FisherArtifact) -> None:
    """Refuse an artifact fitted on a different architecture or different weights."""
    if artifact.fingerprint != model.fingerprint():
        raise FingerprintMismatchError(
            f"fisher artifact fingerprint {artifact.fingerprint:016x} does not match "
            f"model fingerprint {model.fingerprint():016x}"
        )
    if artifact.weights_checksum != model.weights_checksum():
        raise FingerprintMismatchError(
            f"fisher artifact weights checksum {artifact.weights_checksum:016x} does not match "
            f"model weights {model.weights_checksum():016x}"
        )
    if artifact.layer_names != model.selected_layers:
        raise FingerprintMismatchError(
            f"fisher artifact layers {artifact.layer_names} differ from model selection {model.selected_layers}"
        )


def raw_layer_scores(
    model: VaeModel,
    artifact: FisherArtifact,
    images: np.ndarray,
    sample_ids: Sequence[int],
    k: int,
    rng: Rng,
    batch_size: int = 64,
    threads: int = 1,
) -> np.ndarray:
    """(N, L) per-layer quadratic forms, one batched backward pass per chunk."""

    def work(index: range) -> np.ndarray:
        sets, _ = score_gradients(
            model, images[index.start : index.stop], sample_ids[index.start : index.stop], k=k, rng=rng
        )
        return artifact.raw_scores(sets)

    parts = ordered_map(work, chunk_ranges(len(sample_ids), batch_size), threads)
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, len(artifact.layers)))


def nll_scores(
    model: VaeModel,
    images: np.ndarray,
    sample_ids: Sequence[int],
    k: int,
    rng: Rng,
    batch_size: int = 64,
    threads: int = 1,
) -> np.ndarray:
    """IWAE-k negative log-likelihood per sample (forward passes only)."""

    def work(index: range) -> np.ndarray:
        ids = sample_ids[index.start : index.stop]
        eps = latent_noise(rng, ids, k, model.latent_dim)
        return np.asarray(iwae_nll(model, images[index.start : index.stop], k, eps=eps), dtype=np.float64)

    parts = ordered_map(work, chunk_ranges(len(sample_ids), batch_size), threads)
    return np.concatenate(parts) if parts else np.zeros(0)


def score_pipeline(
    model: VaeModel,
    artifact: FisherArtifact,
    stats: Optional[LayerStats],
    dataset: ImageDataset,
    config: Optional[ScoreConfig] = None,
    seed: int = 0,
    threads: int = 1,
) -> ScoreTable:
    """Score every sample of ``dataset``: per-layer raw and normalized scores, ROSE and NLL.

    Exactly one backward pass is run per sample; the count is checked.
    """
    config = config or ScoreConfig()
    check_artifact(model, artifact)
    stats = stats or artifact.stats
    if stats is None:
        raise DataFormatError("fisher artifact carries no calibration statistics")
    if stats.n_layers != len(artifact.layers):
        raise ShapeError(f"statistics cover {stats.n_layers} layers, artifact has {len(artifact.layers)}")

    images = as_tensor(dataset.images)
    ids = list(range(len(dataset)))
    rng = Rng(seed)

    started = time.perf_counter()
    before = model.samples_backpropagated
    raw = raw_layer_scores(
        model, artifact, images, ids, config.iwae_k, rng.spawn(SCORE_STREAM), config.batch_size, threads
    )
    backprops = model.samples_backpropagated - before
    if backprops != len(ids):
        raise AutodiffError(f"expected one backward pass per sample ({len(ids)}), counted {backprops}")
    elapsed = time.perf_counter() - started

    nll = nll_scores(model, images, ids, config.nll_k, rng.spawn(NLL_STREAM), config.batch_size, threads)
    normalized, rose = rose_scores(raw, stats, RoseConfig.from_score_config(config))
    logger.info(
        "scored %d sample(s) of %s in %.2fs (%.1f images/sec, %d backward pass(es))",
        len(ids),
        dataset.label,
        elapsed,
        len(ids) / elapsed if elapsed > 0 else float("inf"),
        backprops,
    )
    return ScoreTable(
        layer_names=list(artifact.layer_names),
        ids=np.asarray(ids, dtype=np.int64),
        raw=raw,
        normalized=normalized,
        rose=rose,
        nll=nll,
    )


def write_score_table(table: ScoreTable, path: str) -> None:
    """CSV with header ``id,s_raw_1..L,s_hat_1..L,rose,nll``; floats at full precision."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.header())
        for row in range(len(table)):
            values = list(table.raw[row]) + list(table.normalized[row]) + [table.rose[row], table.nll[row]]
            writer.writerow([int(table.ids[row])] + [format(float(v), ".17g") for v in values])


def read_score_table(path: str) -> ScoreTable:
    """Parse a score CSV written by ``write_score_table``.

    Layer names are not stored in the file; they come back as "1".."L".
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataFormatError(f"cannot read score table {path}: {exc}") from exc
    if not rows:
        raise DataFormatError(f"{path}: empty score table")
    header = rows[0]
    n_layers = (len(header) - 3) // 2
    if len(header) < 5 or header != score_table_header(n_layers):
        raise DataFormatError(f"{path}: unexpected score table header {header}")

    body = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{line}: expected {len(header)} columns, found {len(row)}")
        try:
            body.append([float(v) for v in row])
        except ValueError:
            raise DataFormatError(f"{path}:{line}: non-numeric value in {row}") from None
    data = np.asarray(body, dtype=np.float64).reshape(len(body), len(header))
    if not np.all(np.isfinite(data)):
        raise DataFormatError(f"{path}: score table contains non-finite values")
    return ScoreTable(
        layer_names=[str(i) for i in range(1, n_layers + 1)],
        ids=data[:, 0].astype(np.int64),
        raw=data[:, 1 : 1 + n_layers],
        normalized=data[:, 1 + n_layers : 1 + 2 * n_layers],
        rose=data[:, -2],
        nll=data[:, -1],
    )
