"""Core data structures shared across modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np


@dataclass
class LayerGradient:
    """Score gradient of one layer for one sample, with the statistics EKFAC needs.

    ``grad`` is stored as a (q_out x p_in) matrix, ``h`` holds one row per
    spatial position (T x p_in) and ``delta`` the matching pre-activation
    gradients (T x q_out), so that ``grad == delta.T @ h``.
    """

    name: str
    grad: np.ndarray
    h: np.ndarray
    delta: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.grad.shape


@dataclass
class LayerGradientSet:
    """Per-sample score gradients over the selected layers."""

    sample_id: int
    layers: Dict[str, LayerGradient] = field(default_factory=dict)

    @property
    def layer_names(self) -> List[str]:
        return list(self.layers)

    def __getitem__(self, name: str) -> LayerGradient:
        return self.layers[name]


@dataclass
class LayerStats:
    """Per-layer mean and population standard deviation of raw scores."""

    layer_names: List[str]
    mu: np.ndarray
    sigma: np.ndarray
    n_samples: int
    degenerate: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.layer_names)


@dataclass
class ImageDataset:
    """Images in [0, 1] shaped N x C x H x W."""

    images: np.ndarray
    label: str
    source_hash: str = ""
    provenance: Optional[List[str]] = None

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


def score_table_header(n_layers: int) -> List[str]:
    return (
        ["id"]
        + [f"s_raw_{i}" for i in range(1, n_layers + 1)]
        + [f"s_hat_{i}" for i in range(1, n_layers + 1)]
        + ["rose", "nll"]
    )


@dataclass
class ScoreTable:
    """One row per scored sample: raw and normalized layer scores, ROSE, NLL."""

    layer_names: List[str]
    ids: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray
    rose: np.ndarray
    nll: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def header(self) -> List[str]:
        return score_table_header(len(self.layer_names))

    def column(self, name: str) -> np.ndarray:
        if name == "rose":
            return self.rose
        if name == "nll":
            return self.nll
        raise KeyError(name)


@dataclass
class EvalResult:
    """Detection metrics for one score column against one OOD set."""

    score: str
    dataset: str
    auroc: float
    auprc: float
    fpr80: float
    n_in: int
    n_out: int
    per_layer_auroc: Dict[str, float] = field(default_factory=dict)

    def as_rows(self) -> List[tuple]:
        rows = [
            (f"{self.score}_auroc", self.dataset, self.auroc),
            (f"{self.score}_auprc", self.dataset, self.auprc),
            (f"{self.score}_fpr80", self.dataset, self.fpr80),
        ]
        # Layers are numbered like the s_hat_<i> columns they come from.
        for index, value in enumerate(self.per_layer_auroc.values(), start=1):
            rows.append((f"auroc_layer_{index}", self.dataset, value))
        return rows


@dataclass
class SweepResult:
    """AUROCs across a robustness grid, one list per score column."""

    axis: str
    grid: List[float]
    aurocs: Dict[str, List[List[float]]]

    def mean(self, score: str) -> float:
        return float(np.mean([np.mean(point) for point in self.aurocs[score]]))

    def std(self, score: str) -> float:
        return float(np.std([np.mean(point) for point in self.aurocs[score]]))
