"""Per-layer Fisher approximations and their damped inverse quadratic forms.

Gradients of a layer are q_out x p_in matrices ``G = δᵀh``. Two
approximations are supported:

* ``diag``: the mean of element-wise squared gradients.
* ``ekfac``: eigenbases ``U_A`` of ``A = E[hᵀh]`` and ``U_B`` of
  ``B = E[δᵀδ]``, with eigenvalues re-estimated in that basis as
  ``Σ = E[(U_Bᵀ G U_A)²]`` (element-wise).

The quadratic form ``sᵀ(F̂ + εI)⁻¹s`` never materializes the Fisher matrix;
``to_dense`` exists for verification on small layers only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError
from .schemas import LayerGradient, LayerGradientSet, LayerStats
from .tensor import ensure_finite, kron_apply, sym_eig

logger = logging.getLogger(__name__)

METHODS = ("diag", "ekfac")
MAX_DENSE_PARAMS = 10_000
DEFAULT_DAMPING_REL = 1e-8

GradientSource = Union[Sequence[LayerGradientSet], Callable[[], Iterable[LayerGradientSet]]]


def relative_damping(values: np.ndarray, damping_rel: float) -> float:
    """ε = damping_rel · mean(values), floored so that ε > 0."""
    mean = float(np.mean(values)) if np.size(values) else 0.0
    return max(damping_rel * mean, float(np.finfo(np.float64).tiny))


def _as_grad(s: Union[LayerGradient, np.ndarray]) -> np.ndarray:
    return np.asarray(s.grad if isinstance(s, LayerGradient) else s, dtype=np.float64)


def _check_dense_size(name: str, n_params: int) -> None:
    if n_params > MAX_DENSE_PARAMS:
        raise ShapeError(
            f"layer {name}: refusing to materialize a dense {n_params}x{n_params} Fisher "
            f"(limit {MAX_DENSE_PARAMS} parameters)"
        )


@dataclass
class DiagFactor:
    """Diagonal Fisher of one layer, stored in the gradient's q x p layout."""

    layer: str
    diag: np.ndarray
    n_samples: int
    damping: float

    method = "diag"

    @property
    def shape(self) -> tuple:
        return self.diag.shape

    def to_dense(self) -> np.ndarray:
        _check_dense_size(self.layer, self.diag.size)
        return np.diag(self.diag.flatten(order="F"))


@dataclass
class EkfacFactor:
    """Eigenvalue-corrected Kronecker factors of one layer.

    ``sigma`` has the gradient's q x p layout: ``sigma[i, j]`` is the
    eigenvalue paired with ``U_A[:, j] ⊗ U_B[:, i]``.
    """

    layer: str
    u_a: np.ndarray
    u_b: np.ndarray
    sigma: np.ndarray
    n_samples: int
    damping: float

    method = "ekfac"

    @property
    def shape(self) -> tuple:
        return self.sigma.shape

    def to_dense(self) -> np.ndarray:
        """F̂ = (U_A ⊗ U_B) diag(vec Σ) (U_A ⊗ U_B)ᵀ."""
        _check_dense_size(self.layer, self.sigma.size)
        basis = np.kron(self.u_a, self.u_b)
        return basis @ np.diag(self.sigma.flatten(order="F")) @ basis.T


Factor = Union[DiagFactor, EkfacFactor]


@dataclass
class FisherArtifact:
    """Fitted factors for every selected layer plus the calibration statistics."""

    method: str
    layers: Dict[str, Factor]
    fingerprint: int = 0
    weights_checksum: int = 0
    stats: Optional[LayerStats] = None

    @property
    def layer_names(self) -> List[str]:
        return list(self.layers)

    def raw_scores(self, gradient_sets: Sequence[LayerGradientSet]) -> np.ndarray:
        """(N, L) matrix of per-layer quadratic forms."""
        if not gradient_sets:
            return np.zeros((0, len(self.layers)))
        columns = [
            quad_form_batch(factor, np.stack([gs[name].grad for gs in gradient_sets]))
            for name, factor in self.layers.items()
        ]
        return np.stack(columns, axis=1)


@dataclass
class DiagAccumulator:
    """Running sum of squared gradients for one layer."""

    layer: str
    sum_sq: Optional[np.ndarray] = None
    count: int = 0

    def update(self, g: LayerGradient) -> None:
        grad = np.asarray(g.grad, dtype=np.float64)
        if self.sum_sq is None:
            self.sum_sq = np.zeros_like(grad)
        elif grad.shape != self.sum_sq.shape:
            raise ShapeError(f"layer {self.layer}: gradient shape {grad.shape} != {self.sum_sq.shape}")
        self.sum_sq += grad * grad
        self.count += 1

    def merge(self, other: "DiagAccumulator") -> "DiagAccumulator":
        if other.count:
            if self.sum_sq is None:
                self.sum_sq = other.sum_sq.copy()
            else:
                self.sum_sq += other.sum_sq
            self.count += other.count
        return self

    def finalize(self, damping_rel: float = DEFAULT_DAMPING_REL) -> DiagFactor:
        if not self.count:
            raise DataFormatError(f"layer {self.layer}: no gradients to fit")
        diag = self.sum_sq / self.count
        return DiagFactor(self.layer, diag, self.count, relative_damping(diag, damping_rel))


@dataclass
class KroneckerAccumulator:
    """Running sums of the input-side and output-side second moments.

    Spatial positions of a convolution count as extra rows of ``h`` and
    ``delta``; only the eigenvectors of the result are used, so the overall
    scale does not matter.
    """

    layer: str
    a_sum: Optional[np.ndarray] = None
    b_sum: Optional[np.ndarray] = None
    count: int = 0

    def update(self, g: LayerGradient) -> None:
        h = np.asarray(g.h, dtype=np.float64)
        delta = np.asarray(g.delta, dtype=np.float64)
        if self.a_sum is None:
            self.a_sum = np.zeros((h.shape[1], h.shape[1]))
            self.b_sum = np.zeros((delta.shape[1], delta.shape[1]))
        elif h.shape[1] != self.a_sum.shape[0] or delta.shape[1] != self.b_sum.shape[0]:
            raise ShapeError(f"layer {self.layer}: activation widths changed mid-stream")
        self.a_sum += h.T @ h
        self.b_sum += delta.T @ delta
        self.count += 1

    def merge(self, other: "KroneckerAccumulator") -> "KroneckerAccumulator":
        if other.count:
            if self.a_sum is None:
                self.a_sum, self.b_sum = other.a_sum.copy(), other.b_sum.copy()
            else:
                self.a_sum += other.a_sum
                self.b_sum += other.b_sum
            self.count += other.count
        return self

    def eigenbases(self, solver: str = "jacobi") -> tuple:
        if not self.count:
            raise DataFormatError(f"layer {self.layer}: no gradients to fit")
        u_a, _ = sym_eig(self.a_sum / self.count, solver=solver)
        u_b, _ = sym_eig(self.b_sum / self.count, solver=solver)
        return u_a, u_b


@dataclass
class EigenbasisAccumulator:
    """Running sum of squared gradients rotated into the Kronecker eigenbasis."""

    layer: str
    u_a: np.ndarray
    u_b: np.ndarray
    sigma_sum: np.ndarray = field(init=False)
    count: int = 0

    def __post_init__(self) -> None:
        self.sigma_sum = np.zeros((self.u_b.shape[0], self.u_a.shape[0]))

    def update(self, g: LayerGradient) -> None:
        h = np.asarray(g.h, dtype=np.float64)
        delta = np.asarray(g.delta, dtype=np.float64)
        if h.shape[1] != self.u_a.shape[0] or delta.shape[1] != self.u_b.shape[0]:
            raise ShapeError(f"layer {self.layer}: gradient does not match the fitted eigenbasis")
        # U_Bᵀ (δᵀh) U_A without forming G.
        rotated = (delta @ self.u_b).T @ (h @ self.u_a)
        self.sigma_sum += rotated * rotated
        self.count += 1

    def merge(self, other: "EigenbasisAccumulator") -> "EigenbasisAccumulator":
        self.sigma_sum += other.sigma_sum
        self.count += other.count
        return self

    def finalize(self, damping_rel: float = DEFAULT_DAMPING_REL) -> EkfacFactor:
        if not self.count:
            raise DataFormatError(f"layer {self.layer}: no gradients to fit")
        sigma = self.sigma_sum / self.count
        return EkfacFactor(
            self.layer, self.u_a, self.u_b, sigma, self.count, relative_damping(sigma, damping_rel)
        )


def _iterate(source: GradientSource) -> Iterable[LayerGradientSet]:
    if callable(source):
        return source()
    if iter(source) is source:
        raise TypeError("gradient stream must be replayable: pass a sequence or a zero-argument factory")
    return source


def _accumulate(source: GradientSource, make: Callable[[str], object]) -> Dict[str, object]:
    """Run accumulators named by layer over ``source``.

    Sources exposing ``map_chunks(fn)`` are reduced chunk-wise (possibly in
    parallel) and merged in chunk order; anything else is consumed
    sequentially.
    """

    def reduce(sets: Iterable[LayerGradientSet]) -> Dict[str, object]:
        accs: Dict[str, object] = {}
        for gs in sets:
            for name, g in gs.layers.items():
                if name not in accs:
                    accs[name] = make(name)
                accs[name].update(g)
        return accs

    if hasattr(source, "map_chunks"):
        merged: Dict[str, object] = {}
        for partial in source.map_chunks(reduce):
            for name, acc in partial.items():
                if name in merged:
                    merged[name].merge(acc)
                else:
                    merged[name] = acc
    else:
        merged = reduce(_iterate(source))
    if not merged:
        raise DataFormatError("gradient stream is empty")
    return merged


def fit_diag(source: GradientSource, damping_rel: float = DEFAULT_DAMPING_REL) -> Dict[str, DiagFactor]:
    accs = _accumulate(source, DiagAccumulator)
    factors = {name: acc.finalize(damping_rel) for name, acc in accs.items()}
    logger.info("diag fit: %d layer(s), %d sample(s)", len(factors), next(iter(factors.values())).n_samples)
    return factors


def fit_ekfac(
    source: GradientSource, damping_rel: float = DEFAULT_DAMPING_REL, eig_solver: str = "jacobi"
) -> Dict[str, EkfacFactor]:
    """Two passes over a replayable stream: eigenbases first, then Σ."""
    kron = _accumulate(source, KroneckerAccumulator)
    bases = {}
    for name, acc in kron.items():
        bases[name] = acc.eigenbases(eig_solver)
        logger.info("ekfac %s: eigenbases of %dx%d / %dx%d", name, *acc.a_sum.shape, *acc.b_sum.shape)

    def make(name: str) -> EigenbasisAccumulator:
        if name not in bases:
            raise DataFormatError(f"layer {name} appeared only in the second pass")
        return EigenbasisAccumulator(name, *bases[name])

    accs = _accumulate(source, make)
    factors = {name: acc.finalize(damping_rel) for name, acc in accs.items()}
    for name, factor in factors.items():
        if factor.n_samples != kron[name].count:
            raise DataFormatError(
                f"layer {name}: stream replay yielded {factor.n_samples} samples, first pass saw {kron[name].count}"
            )
    return factors


def fit(
    source: GradientSource,
    method: str = "ekfac",
    damping_rel: float = DEFAULT_DAMPING_REL,
    eig_solver: str = "jacobi",
) -> Dict[str, Factor]:
    if method == "diag":
        return fit_diag(source, damping_rel)
    if method == "ekfac":
        return fit_ekfac(source, damping_rel, eig_solver)
    raise ConfigError(f"unknown Fisher method {method!r}; expected one of {METHODS}")


def quad_form(factor: Factor, s: Union[LayerGradient, np.ndarray]) -> float:
    """sᵀ(F̂ + εI)⁻¹s for one layer gradient."""
    grad = _as_grad(s)
    if grad.shape != factor.shape:
        raise ShapeError(f"layer {factor.layer}: gradient shape {grad.shape}, factor expects {factor.shape}")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if isinstance(factor, DiagFactor):
            value = np.sum(grad * grad / (factor.diag + factor.damping))
        else:
            rotated = kron_apply(factor.u_a.T, factor.u_b.T, grad)
            back = kron_apply(factor.u_a, factor.u_b, rotated / (factor.sigma + factor.damping))
            value = np.sum(grad * back)
    return float(ensure_finite(f"quad form of layer {factor.layer}", value))


def quad_form_batch(factor: Factor, grads: np.ndarray) -> np.ndarray:
    """Quadratic forms of a stack of gradients shaped (N, q, p)."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 3 or grads.shape[1:] != factor.shape:
        raise ShapeError(f"layer {factor.layer}: expected (N, {factor.shape}), got {grads.shape}")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if isinstance(factor, DiagFactor):
            values = np.sum(grads * grads / (factor.diag + factor.damping), axis=(1, 2))
        else:
            rotated = factor.u_b.T @ grads @ factor.u_a
            values = np.sum(rotated * rotated / (factor.sigma + factor.damping), axis=(1, 2))
    # A layer fitted on all-zero gradients is damped only by the float64 floor.
    return ensure_finite(f"quad forms of layer {factor.layer}", values)
