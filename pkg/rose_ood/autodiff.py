"""Reverse-mode differentiation over a static chain of layers.

Each parameterized layer is treated as dense over its inputs: a dense layer
sees one input row per sample, a convolution sees one im2col patch row per
output position. Backward can capture the per-sample layer inputs ``h`` and
pre-activation gradients ``delta`` for any subset of layers, from which the
per-sample weight gradients are the contraction ``delta.T @ h``.
"""

from __future__ import annotations

import copy
import logging
import threading
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AutodiffError, ShapeError
from .schemas import LayerGradient, LayerGradientSet
from .tensor import Rng, ensure_finite, get_dtype

logger = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv2d", "activation", "reshape", "upsample")

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer; per-sample shapes exclude the batch axis."""

    name: str
    kind: str
    in_shape: Shape
    out_shape: Shape
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    scale: int = 1
    has_bias: bool = False
    activation: str = ""

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"layer {self.name}: unknown kind {self.kind!r}")

    @property
    def parameterized(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["in_shape"] = list(self.in_shape)
        data["out_shape"] = list(self.out_shape)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        values = dict(data)
        values["in_shape"] = tuple(int(v) for v in values["in_shape"])
        values["out_shape"] = tuple(int(v) for v in values["out_shape"])
        return cls(**values)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"convolution with kernel {kernel}, stride {stride}, padding {padding} "
            f"does not fit an input of size {size}"
        )
    return out


def conv2d_spec(
    name: str,
    in_shape: Shape,
    out_channels: int,
    kernel: int,
    stride: int = 1,
    padding: int = 0,
    has_bias: bool = False,
) -> LayerSpec:
    channels, height, width = in_shape
    out_shape = (
        out_channels,
        conv_output_size(height, kernel, stride, padding),
        conv_output_size(width, kernel, stride, padding),
    )
    return LayerSpec(
        name=name,
        kind="conv2d",
        in_shape=tuple(in_shape),
        out_shape=out_shape,
        kernel=kernel,
        stride=stride,
        padding=padding,
        has_bias=has_bias,
    )


def dense_spec(name: str, in_features: int, out_features: int, has_bias: bool = True) -> LayerSpec:
    return LayerSpec(name, "dense", (in_features,), (out_features,), has_bias=has_bias)


def relu_spec(name: str, shape: Shape) -> LayerSpec:
    return LayerSpec(name, "activation", tuple(shape), tuple(shape), activation="relu")


def reshape_spec(name: str, in_shape: Shape, out_shape: Shape) -> LayerSpec:
    if int(np.prod(in_shape)) != int(np.prod(out_shape)):
        raise ShapeError(f"reshape {name}: {in_shape} and {out_shape} differ in size")
    return LayerSpec(name, "reshape", tuple(in_shape), tuple(out_shape))


def upsample_spec(name: str, in_shape: Shape, scale: int = 2) -> LayerSpec:
    channels, height, width = in_shape
    return LayerSpec(name, "upsample", tuple(in_shape), (channels, height * scale, width * scale), scale=scale)


def im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N, T, C*k*k) patch rows, patch layout (C, kh, kw)."""
    n, c = x.shape[:2]
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, out_h * out_w, c * kernel * kernel)


def col2im(
    cols: np.ndarray,
    x_shape: Shape,
    kernel: int,
    stride: int,
    padding: int,
    out_hw: Tuple[int, int],
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the input grid."""
    n, c, height, width = x_shape
    out_h, out_w = out_hw
    patches = cols.reshape(n, out_h, out_w, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    grid = np.zeros((n, c, height + 2 * padding, width + 2 * padding), dtype=cols.dtype)
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(kernel):
        for j in range(kernel):
            grid[:, :, i : i + row_span : stride, j : j + col_span : stride] += patches[:, :, i, j]
    return grid[:, :, padding : padding + height, padding : padding + width]


@dataclass
class Capture:
    """Batched layer statistics: ``h`` is (N, T, p), ``delta`` is (N, T, q)."""

    h: np.ndarray
    delta: np.ndarray


def _homogeneous(h: np.ndarray) -> np.ndarray:
    ones = np.ones(h.shape[:-1] + (1,), dtype=h.dtype)
    return np.concatenate([h, ones], axis=-1)


class Layer:
    """Base class; subclasses implement forward/backward over a batch."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: Dict[str, np.ndarray] = {}

    @property
    def name(self) -> str:
        return self.spec.name

    def init_params(self, rng: Rng) -> None:
        return None

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, object]:
        raise NotImplementedError

    def backward(
        self, ctx: object, grad_out: np.ndarray, need_input_grad: bool, capture: bool
    ) -> Tuple[Optional[np.ndarray], Dict[str, np.ndarray], Optional[Capture]]:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, spec: LayerSpec):
        super().__init__(spec)
        (p,), (q,) = spec.in_shape, spec.out_shape
        self.params["weight"] = np.zeros((q, p), dtype=get_dtype())
        if spec.has_bias:
            self.params["bias"] = np.zeros((q,), dtype=get_dtype())

    def init_params(self, rng: Rng) -> None:
        q, p = self.params["weight"].shape
        self.params["weight"] = rng.gaussian((q, p)) * np.sqrt(2.0 / p).astype(get_dtype())
        if "bias" in self.params:
            self.params["bias"] = np.zeros_like(self.params["bias"])

    def forward(self, x):
        y = x @ self.params["weight"].T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y, x

    def backward(self, ctx, grad_out, need_input_grad, capture):
        x = ctx
        grads = {"weight": grad_out.T @ x}
        if "bias" in self.params:
            grads["bias"] = grad_out.sum(axis=0)
        grad_in = grad_out @ self.params["weight"] if need_input_grad else None
        stats = None
        if capture:
            h = x[:, None, :]
            stats = Capture(h=_homogeneous(h) if self.spec.has_bias else h, delta=grad_out[:, None, :])
        return grad_in, grads, stats


class Conv2d(Layer):
    def __init__(self, spec: LayerSpec):
        super().__init__(spec)
        in_channels = spec.in_shape[0]
        out_channels = spec.out_shape[0]
        patch = in_channels * spec.kernel * spec.kernel
        self.params["weight"] = np.zeros((out_channels, patch), dtype=get_dtype())
        if spec.has_bias:
            self.params["bias"] = np.zeros((out_channels,), dtype=get_dtype())

    def init_params(self, rng: Rng) -> None:
        q, p = self.params["weight"].shape
        self.params["weight"] = rng.gaussian((q, p)) * np.sqrt(2.0 / p).astype(get_dtype())
        if "bias" in self.params:
            self.params["bias"] = np.zeros_like(self.params["bias"])

    def forward(self, x):
        spec = self.spec
        cols = im2col(x, spec.kernel, spec.stride, spec.padding)
        y = cols @ self.params["weight"].T
        if "bias" in self.params:
            y = y + self.params["bias"]
        n = x.shape[0]
        q, out_h, out_w = spec.out_shape
        return y.transpose(0, 2, 1).reshape(n, q, out_h, out_w), (cols, x.shape)

    def backward(self, ctx, grad_out, need_input_grad, capture):
        cols, x_shape = ctx
        spec = self.spec
        n = grad_out.shape[0]
        q, out_h, out_w = spec.out_shape
        delta = grad_out.reshape(n, q, out_h * out_w).transpose(0, 2, 1)
        grads = {"weight": delta.reshape(-1, q).T @ cols.reshape(-1, cols.shape[-1])}
        if "bias" in self.params:
            grads["bias"] = delta.sum(axis=(0, 1))
        grad_in = None
        if need_input_grad:
            grad_cols = delta @ self.params["weight"]
            grad_in = col2im(grad_cols, x_shape, spec.kernel, spec.stride, spec.padding, (out_h, out_w))
        stats = None
        if capture:
            stats = Capture(h=_homogeneous(cols) if spec.has_bias else cols, delta=delta)
        return grad_in, grads, stats


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, ctx, grad_out, need_input_grad, capture):
        return grad_out * ctx, {}, None


class Reshape(Layer):
    def forward(self, x):
        return x.reshape((x.shape[0],) + self.spec.out_shape), None

    def backward(self, ctx, grad_out, need_input_grad, capture):
        return grad_out.reshape((grad_out.shape[0],) + self.spec.in_shape), {}, None


class Upsample(Layer):
    """Nearest-neighbour upsampling by an integer factor."""

    def forward(self, x):
        s = self.spec.scale
        return x.repeat(s, axis=2).repeat(s, axis=3), None

    def backward(self, ctx, grad_out, need_input_grad, capture):
        s = self.spec.scale
        n, c, height, width = (grad_out.shape[0],) + self.spec.in_shape
        return grad_out.reshape(n, c, height, s, width, s).sum(axis=(3, 5)), {}, None


_LAYER_TYPES = {"dense": Dense, "conv2d": Conv2d, "reshape": Reshape, "upsample": Upsample}


def build_layer(spec: LayerSpec) -> Layer:
    if spec.kind == "activation":
        if spec.activation != "relu":
            raise ShapeError(f"layer {spec.name}: unsupported activation {spec.activation!r}")
        return ReLU(spec)
    return _LAYER_TYPES[spec.kind](spec)


@dataclass
class Tape:
    """Activation cache of one forward call."""

    network: "Network"
    batch_size: int
    contexts: List[object]
    output: np.ndarray


@dataclass
class Gradients:
    """Result of one backward call."""

    input_grad: Optional[np.ndarray]
    params: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    captures: Dict[str, Capture] = field(default_factory=dict)


class Network:
    """A chain of layers whose shapes are checked when the graph is built."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate layer names in {names}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.spec.out_shape != nxt.spec.in_shape:
                raise ShapeError(
                    f"{prev.name} outputs {prev.spec.out_shape} but {nxt.name} expects {nxt.spec.in_shape}"
                )
        self._index = {layer.name: i for i, layer in enumerate(self.layers)}
        self._lock = threading.Lock()
        self.samples_backpropagated = 0

    @classmethod
    def from_specs(cls, specs: Iterable[LayerSpec], rng: Optional[Rng] = None) -> "Network":
        network = cls([build_layer(spec) for spec in specs])
        if rng is not None:
            for i, layer in enumerate(network.layers):
                layer.init_params(rng.spawn(i))
        return network

    @property
    def specs(self) -> List[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def in_shape(self) -> Shape:
        return self.layers[0].spec.in_shape

    @property
    def out_shape(self) -> Shape:
        return self.layers[-1].spec.out_shape

    @property
    def parameterized_layers(self) -> List[str]:
        return [layer.name for layer in self.layers if layer.spec.parameterized]

    def layer(self, name: str) -> Layer:
        return self.layers[self._index[name]]

    def parameters(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for layer in self.layers:
            for key, value in layer.params.items():
                out[f"{layer.name}.{key}"] = value
        return out

    def set_parameters(self, values: Dict[str, np.ndarray]) -> None:
        for full_name, value in values.items():
            layer_name, key = full_name.rsplit(".", 1)
            layer = self.layer(layer_name)
            if layer.params[key].shape != value.shape:
                raise ShapeError(f"{full_name}: expected {layer.params[key].shape}, got {value.shape}")
            layer.params[key] = np.ascontiguousarray(value)

    def astype(self, dtype: object) -> "Network":
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            for key in layer.params:
                layer.params[key] = layer.params[key].astype(dtype)
        return clone

    def __deepcopy__(self, memo: dict) -> "Network":
        layers = []
        for layer in self.layers:
            fresh = build_layer(layer.spec)
            fresh.params = {key: value.copy() for key, value in layer.params.items()}
            layers.append(fresh)
        return Network(layers)

    def forward(self, x: np.ndarray) -> Tape:
        if tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(f"network expects inputs shaped (N, {self.in_shape}), got {x.shape}")
        contexts: List[object] = []
        out = x
        for layer in self.layers:
            out, ctx = layer.forward(out)
            contexts.append(ctx)
        ensure_finite("forward output", out)
        return Tape(network=self, batch_size=int(x.shape[0]), contexts=contexts, output=out)

    def backward(
        self,
        tape: Optional[Tape],
        grad_out: np.ndarray,
        capture: Iterable[str] = (),
        need_input_grad: bool = True,
    ) -> Gradients:
        """Backpropagate ``grad_out`` (d loss / d output) through a recorded forward."""
        if tape is None or tape.network is not self or len(tape.contexts) != len(self.layers):
            raise AutodiffError("backward called before a matching forward pass")
        if grad_out.shape != tape.output.shape:
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match output {tape.output.shape}")
        wanted = set(capture)
        unknown = wanted - set(self.parameterized_layers)
        if unknown:
            raise AutodiffError(f"cannot capture non-parameterized or unknown layers {sorted(unknown)}")

        result = Gradients(input_grad=None)
        grad = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            needs_input = need_input_grad or i > 0
            grad, grads, stats = layer.backward(tape.contexts[i], grad, needs_input, layer.name in wanted)
            if grads:
                result.params[layer.name] = grads
            if stats is not None:
                result.captures[layer.name] = stats
        result.input_grad = grad
        with self._lock:
            self.samples_backpropagated += tape.batch_size
        return result


def forward(network: Network, batch: np.ndarray) -> Tape:
    return network.forward(batch)


def per_sample_gradient_sets(
    captures: Dict[str, Capture], sample_ids: Sequence[int]
) -> List[LayerGradientSet]:
    """Split batched captures into one LayerGradientSet per sample."""
    per_layer = {
        name: np.einsum("ntq,ntp->nqp", cap.delta, cap.h, optimize=True) for name, cap in captures.items()
    }
    out: List[LayerGradientSet] = []
    for row, sample_id in enumerate(sample_ids):
        layers = {
            name: LayerGradient(name=name, grad=per_layer[name][row], h=cap.h[row], delta=cap.delta[row])
            for name, cap in captures.items()
        }
        out.append(LayerGradientSet(sample_id=int(sample_id), layers=layers))
    return out


def backward_per_sample(
    network: Network,
    tape: Tape,
    grad_out: np.ndarray,
    layers: Optional[Sequence[str]] = None,
    sample_ids: Optional[Sequence[int]] = None,
) -> List[LayerGradientSet]:
    """Per-sample gradients of a per-sample scalar loss.

    ``grad_out[n]`` is the derivative of sample ``n``'s loss with respect to
    its own output row; samples do not interact, so one batched backward
    yields every per-sample gradient.
    """
    names = list(layers) if layers is not None else network.parameterized_layers
    result = network.backward(tape, grad_out, capture=names, need_input_grad=False)
    ids = list(sample_ids) if sample_ids is not None else list(range(tape.batch_size))
    return per_sample_gradient_sets({name: result.captures[name] for name in names}, ids)


def sum_of_squares_loss(output: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample 0.5·‖y‖² and its gradient."""
    flat = output.reshape(output.shape[0], -1)
    return 0.5 * np.sum(flat * flat, axis=1), output


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    n_checked: int
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_difference_check(
    objective: Callable[[], float],
    params: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    entries: Optional[Dict[str, np.ndarray]] = None,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``objective``.

    ``params`` are mutated in place and restored. The error of a parameter is
    ``‖a - n‖ / max(‖a‖ + ‖n‖, abs_floor)`` over its checked entries;
    ``entries`` optionally restricts the flat indices checked per parameter.
    """
    errors: Dict[str, float] = {}
    checked = 0
    for name, value in params.items():
        flat = value.reshape(-1)
        indices = entries.get(name) if entries else None
        if indices is None:
            indices = np.arange(flat.size)
        numeric = np.empty(len(indices), dtype=np.float64)
        for k, idx in enumerate(indices):
            original = flat[idx]
            flat[idx] = original + step
            plus = objective()
            flat[idx] = original - step
            minus = objective()
            flat[idx] = original
            numeric[k] = (plus - minus) / (2.0 * step)
        expected = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[indices]
        denom = max(float(np.linalg.norm(expected) + np.linalg.norm(numeric)), abs_floor)
        errors[name] = float(np.linalg.norm(expected - numeric)) / denom
        checked += len(indices)
    worst = max(errors, key=errors.get) if errors else ""
    return GradCheckReport(
        max_rel_error=errors.get(worst, 0.0),
        worst_parameter=worst,
        n_checked=checked,
        tolerance=tolerance,
        errors=errors,
    )


def grad_check(
    network: Network,
    inputs: np.ndarray,
    tolerance: float = 1e-4,
    loss: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]] = sum_of_squares_loss,
    analytic: Optional[Dict[str, np.ndarray]] = None,
    step: float = 1e-5,
) -> GradCheckReport:
    """Finite-difference check of every parameter, run on a float64 copy.

    ``analytic`` (keyed ``layer.param``) replaces the backward-pass gradients
    when given, so externally produced gradients can be verified too.
    """
    net = network.astype(np.float64)
    x = np.asarray(inputs, dtype=np.float64)
    params = net.parameters()

    if analytic is None:
        tape = net.forward(x)
        _, grad_out = loss(tape.output)
        result = net.backward(tape, grad_out)
        analytic = {
            f"{layer}.{key}": value for layer, grads in result.params.items() for key, value in grads.items()
        }

    def objective() -> float:
        per_sample, _ = loss(net.forward(x).output)
        return float(np.sum(per_sample))

    report = finite_difference_check(objective, params, analytic, tolerance=tolerance, step=step)
    logger.debug("grad_check: max relative error %.3e at %s", report.max_rel_error, report.worst_parameter)
    return report
