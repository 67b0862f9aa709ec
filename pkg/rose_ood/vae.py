"""Convolutional VAE with a Bernoulli decoder, its likelihood bounds, and training.

The encoder is four stride-2 convolutions (kernel 4, no bias) with ReLU,
followed by dense mean and log-variance heads. The decoder mirrors it with
nearest-neighbour upsampling followed by 3x3 convolutions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    LayerSpec,
    Network,
    conv2d_spec,
    dense_spec,
    per_sample_gradient_sets,
    relu_spec,
    reshape_spec,
    upsample_spec,
)
from .config import ModelConfig, TrainConfig
from .errors import DataFormatError, NumericError, ShapeError
from .runtime import chunk_ranges, ordered_map
from .schemas import ImageDataset, LayerGradientSet
from .tensor import Rng, as_tensor, ensure_finite, get_dtype, logsumexp, sigmoid, softplus

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DESCRIPTOR_FORMAT = "rose-vae/1"
NETWORK_KEYS = ("encoder", "mean_head", "logvar_head", "decoder")


class VaeModel:
    """Encoder trunk, two latent heads and a decoder, plus the ROSE layer selection."""

    def __init__(
        self,
        encoder: Network,
        mean_head: Network,
        logvar_head: Network,
        decoder: Network,
        selected_layers: Sequence[str],
    ):
        self.encoder = encoder
        self.mean_head = mean_head
        self.logvar_head = logvar_head
        self.decoder = decoder
        self.selected_layers = list(selected_layers)
        self._validate()

    def _validate(self) -> None:
        features = self.encoder.out_shape
        latent = self.mean_head.out_shape
        if len(features) != 1 or len(latent) != 1:
            raise ShapeError("encoder trunk and heads must produce flat vectors")
        for head in (self.mean_head, self.logvar_head):
            if head.in_shape != features or head.out_shape != latent:
                raise ShapeError(f"heads must map {features} -> {latent}")
        if self.decoder.in_shape != latent:
            raise ShapeError(f"decoder expects {self.decoder.in_shape}, latent is {latent}")
        if self.decoder.out_shape != self.encoder.in_shape:
            raise ShapeError(
                f"decoder output {self.decoder.out_shape} does not reproduce input {self.encoder.in_shape}"
            )
        names = [layer.name for net in self.networks.values() for layer in net.layers]
        if len(set(names)) != len(names):
            raise ShapeError("layer names must be unique across the model")
        if not self.selected_layers:
            raise ShapeError("selected_layers must not be empty")
        unknown = set(self.selected_layers) - set(self.encoder_layers)
        if unknown:
            raise ShapeError(f"selected layers {sorted(unknown)} are not parameterized encoder layers")

    @property
    def networks(self) -> Dict[str, Network]:
        return {
            "encoder": self.encoder,
            "mean_head": self.mean_head,
            "logvar_head": self.logvar_head,
            "decoder": self.decoder,
        }

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.encoder.in_shape

    @property
    def latent_dim(self) -> int:
        return int(self.mean_head.out_shape[0])

    @property
    def encoder_layers(self) -> List[str]:
        return (
            self.encoder.parameterized_layers
            + self.mean_head.parameterized_layers
            + self.logvar_head.parameterized_layers
        )

    @property
    def samples_backpropagated(self) -> int:
        return self.encoder.samples_backpropagated

    def parameters(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for net in self.networks.values():
            out.update(net.parameters())
        return out

    def set_parameters(self, values: Dict[str, np.ndarray]) -> None:
        for net in self.networks.values():
            own = set(net.parameters())
            net.set_parameters({k: v for k, v in values.items() if k in own})

    def layer_shape(self, name: str) -> Tuple[int, int]:
        """(q_out, p_in) of a selected layer's gradient matrix, bias column included."""
        for net in (self.encoder, self.mean_head, self.logvar_head):
            if name in net.parameterized_layers:
                layer = net.layer(name)
                q, p = layer.params["weight"].shape
                return q, p + (1 if layer.spec.has_bias else 0)
        raise KeyError(name)

    def descriptor(self) -> dict:
        return {
            "format": DESCRIPTOR_FORMAT,
            "latent_dim": self.latent_dim,
            "selected_layers": list(self.selected_layers),
            **{key: [spec.to_dict() for spec in net.specs] for key, net in self.networks.items()},
        }

    def descriptor_bytes(self) -> bytes:
        return json.dumps(self.descriptor(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    def fingerprint(self) -> int:
        """64-bit hash of the architecture descriptor (weights excluded)."""
        digest = hashlib.blake2b(self.descriptor_bytes(), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def parameter_blob(self) -> bytes:
        return b"".join(np.asarray(v, dtype="<f4").tobytes() for v in self.parameters().values())

    def weights_checksum(self) -> int:
        digest = hashlib.blake2b(self.parameter_blob(), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    @classmethod
    def from_descriptor(cls, descriptor: dict) -> "VaeModel":
        if descriptor.get("format") != DESCRIPTOR_FORMAT:
            raise DataFormatError(f"unsupported architecture descriptor {descriptor.get('format')!r}")
        nets = {
            key: Network.from_specs(LayerSpec.from_dict(spec) for spec in descriptor[key]) for key in NETWORK_KEYS
        }
        return cls(selected_layers=descriptor["selected_layers"], **nets)


def build_vae(config: ModelConfig, seed: int = 0) -> VaeModel:
    """Build and initialize the standard architecture for ``config``."""
    channels, height, width = config.input_shape
    if height % 4 or width % 4:
        raise ShapeError(f"input height and width must be divisible by 4, got {config.input_shape}")
    n = config.channels
    latent = config.latent_dim

    specs: List[LayerSpec] = []
    shape: Tuple[int, ...] = tuple(config.input_shape)
    for i in range(4):
        conv = conv2d_spec(f"enc_conv{i + 1}", shape, n * 2**i, kernel=4, stride=2, padding=1)
        specs += [conv, relu_spec(f"enc_relu{i + 1}", conv.out_shape)]
        shape = conv.out_shape
    features = int(np.prod(shape))
    specs.append(reshape_spec("enc_flatten", shape, (features,)))

    base = (2 * n, height // 4, width // 4)
    up1 = upsample_spec("dec_up1", base)
    conv1 = conv2d_spec("dec_conv1", up1.out_shape, n, kernel=3, padding=1, has_bias=True)
    up2 = upsample_spec("dec_up2", conv1.out_shape)
    conv2 = conv2d_spec("dec_conv2", up2.out_shape, n, kernel=3, padding=1, has_bias=True)
    conv_out = conv2d_spec("dec_out", conv2.out_shape, channels, kernel=3, padding=1, has_bias=True)
    decoder_specs = [
        dense_spec("dec_dense", latent, int(np.prod(base))),
        relu_spec("dec_relu0", (int(np.prod(base)),)),
        reshape_spec("dec_unflatten", (int(np.prod(base)),), base),
        up1,
        conv1,
        relu_spec("dec_relu1", conv1.out_shape),
        up2,
        conv2,
        relu_spec("dec_relu2", conv2.out_shape),
        conv_out,
    ]

    rng = Rng(seed)
    model = VaeModel(
        encoder=Network.from_specs(specs, rng.spawn(0)),
        mean_head=Network.from_specs([dense_spec("enc_mean", features, latent)], rng.spawn(1)),
        logvar_head=Network.from_specs([dense_spec("enc_logvar", features, latent)], rng.spawn(2)),
        decoder=Network.from_specs(decoder_specs, rng.spawn(3)),
        selected_layers=config.selected_layers or [f"enc_conv{i + 1}" for i in range(4)],
    )
    # Start close to the prior: small log-variances.
    head = model.logvar_head.layers[0]
    head.params["weight"] = head.params["weight"] * np.asarray(0.1, dtype=get_dtype())
    return model


def _check_pixels(batch: np.ndarray) -> None:
    if batch.size and (float(batch.min()) < 0.0 or float(batch.max()) > 1.0):
        raise DataFormatError(
            f"pixel values must lie in [0, 1], got range [{float(batch.min()):.4g}, {float(batch.max()):.4g}]"
        )


def latent_noise(rng: Rng, sample_ids: Sequence[int], k: int, latent_dim: int) -> np.ndarray:
    """(N, k, D) standard normal noise; sample ``i`` always gets stream ``rng.spawn(i)``."""
    return np.stack([rng.spawn(int(i)).gaussian((k, latent_dim)) for i in sample_ids])


def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(q(z|x) ‖ N(0, I)) per sample."""
    return -0.5 * np.sum(1.0 + logvar - mu * mu - np.exp(logvar), axis=1)


def bernoulli_log_likelihood(batch: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Σ_pixels x·log σ(l) + (1 − x)·log(1 − σ(l)) per sample."""
    flat_x = batch.reshape(batch.shape[0], -1)
    flat_l = logits.reshape(logits.shape[0], -1)
    return np.sum(flat_x * flat_l - softplus(flat_l), axis=1)


@dataclass
class _BoundPass:
    """Forward state shared by the bounds and their gradients."""

    batch: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    z: np.ndarray
    logits: np.ndarray
    log_px_z: np.ndarray
    log_w: np.ndarray
    tapes: dict


def _bound_pass(model: VaeModel, batch: np.ndarray, eps: np.ndarray) -> _BoundPass:
    _check_pixels(batch)
    n = batch.shape[0]
    k, latent = eps.shape[1], eps.shape[2]
    if eps.shape[0] != n or latent != model.latent_dim:
        raise ShapeError(f"latent noise shaped {eps.shape} does not match batch {n} / latent {model.latent_dim}")

    trunk = model.encoder.forward(batch)
    mean_tape = model.mean_head.forward(trunk.output)
    logvar_tape = model.logvar_head.forward(trunk.output)
    mu, logvar = mean_tape.output, logvar_tape.output
    z = mu[:, None, :] + np.exp(0.5 * logvar)[:, None, :] * eps
    decoder_tape = model.decoder.forward(z.reshape(n * k, latent))
    logits = decoder_tape.output

    log_px_z = bernoulli_log_likelihood(np.repeat(batch, k, axis=0), logits).reshape(n, k)
    log_pz = -0.5 * np.sum(z * z + LOG_2PI, axis=2)
    log_qz = -0.5 * np.sum(eps * eps + logvar[:, None, :] + LOG_2PI, axis=2)
    log_w = log_px_z + log_pz - log_qz
    return _BoundPass(
        batch=batch,
        mu=mu,
        logvar=logvar,
        eps=eps,
        z=z,
        logits=logits,
        log_px_z=log_px_z,
        log_w=ensure_finite("importance weights", log_w),
        tapes={"encoder": trunk, "mean_head": mean_tape, "logvar_head": logvar_tape, "decoder": decoder_tape},
    )


def _noise_for(model: VaeModel, n: int, k: int, rng: Optional[Rng], eps: Optional[np.ndarray]) -> np.ndarray:
    if eps is not None:
        return as_tensor(eps)
    rng = rng or Rng(0)
    return latent_noise(rng, range(n), k, model.latent_dim)


def elbo(
    model: VaeModel,
    batch: np.ndarray,
    rng: Optional[Rng] = None,
    eps: Optional[np.ndarray] = None,
    analytic_kl: bool = True,
) -> np.ndarray:
    """Per-sample ELBO.

    With ``analytic_kl`` the KL term is closed-form and the reconstruction term
    is averaged over the noise samples; otherwise the realized single-sample
    estimate ``log p(x|z) + log p(z) − log q(z|x)`` is averaged instead.
    """
    batch = as_tensor(batch)
    noise = _noise_for(model, batch.shape[0], 1, rng, eps)
    state = _bound_pass(model, batch, noise)
    if analytic_kl:
        return np.mean(state.log_px_z, axis=1) - kl_divergence(state.mu, state.logvar)
    return np.mean(state.log_w, axis=1)


def iwae_bound(state_log_w: np.ndarray) -> np.ndarray:
    k = state_log_w.shape[1]
    return logsumexp(state_log_w, axis=1) - math.log(k)


def iwae_nll(
    model: VaeModel,
    batch: np.ndarray,
    k: int,
    rng: Optional[Rng] = None,
    eps: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Negative importance-weighted bound with ``k`` latent samples, per sample."""
    if k < 1:
        raise ShapeError(f"iwae k must be >= 1, got {k}")
    batch = as_tensor(batch)
    noise = _noise_for(model, batch.shape[0], k, rng, eps)
    return -iwae_bound(_bound_pass(model, batch, noise).log_w)


def decoder_log_likelihood(model: VaeModel, batch: np.ndarray, z: np.ndarray) -> np.ndarray:
    """log p(x|z) for matching rows of ``batch`` and ``z``."""
    return bernoulli_log_likelihood(batch, model.decoder.forward(as_tensor(z)).output)


def reconstruct(model: VaeModel, batch: np.ndarray) -> np.ndarray:
    """Bernoulli means decoded from the posterior mean."""
    trunk = model.encoder.forward(as_tensor(batch))
    mu = model.mean_head.forward(trunk.output).output
    return sigmoid(model.decoder.forward(mu).output)


def _encoder_backward(
    model: VaeModel,
    state: _BoundPass,
    grad_mu: np.ndarray,
    grad_logvar: np.ndarray,
    capture: Sequence[str] = (),
) -> dict:
    wanted = set(capture)
    mean_grads = model.mean_head.backward(
        state.tapes["mean_head"], grad_mu, capture=[n for n in model.mean_head.parameterized_layers if n in wanted]
    )
    logvar_grads = model.logvar_head.backward(
        state.tapes["logvar_head"],
        grad_logvar,
        capture=[n for n in model.logvar_head.parameterized_layers if n in wanted],
    )
    trunk_grads = model.encoder.backward(
        state.tapes["encoder"],
        mean_grads.input_grad + logvar_grads.input_grad,
        capture=[n for n in model.encoder.parameterized_layers if n in wanted],
        need_input_grad=False,
    )
    return {"encoder": trunk_grads, "mean_head": mean_grads, "logvar_head": logvar_grads}


def loss_and_grads(model: VaeModel, batch: np.ndarray, eps: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean negative ELBO (analytic KL) over the batch and its parameter gradients."""
    state = _bound_pass(model, batch, eps)
    n, k = state.log_px_z.shape
    per_sample = -(np.mean(state.log_px_z, axis=1) - kl_divergence(state.mu, state.logvar))

    # d(-log p(x|z)) / d logits, averaged over noise samples and the batch.
    grad_logits = (sigmoid(state.logits) - np.repeat(state.batch, k, axis=0)) / (n * k)
    decoder_grads = model.decoder.backward(state.tapes["decoder"], grad_logits)
    grad_z = decoder_grads.input_grad.reshape(n, k, -1)

    std = np.exp(0.5 * state.logvar)
    grad_mu = grad_z.sum(axis=1) + state.mu / n
    grad_logvar = (grad_z * state.eps).sum(axis=1) * 0.5 * std + 0.5 * (np.exp(state.logvar) - 1.0) / n
    encoder_grads = _encoder_backward(model, state, grad_mu, grad_logvar)

    grads: Dict[str, np.ndarray] = {}
    for result in list(encoder_grads.values()) + [decoder_grads]:
        for layer, values in result.params.items():
            for key, value in values.items():
                grads[f"{layer}.{key}"] = value
    return float(np.mean(per_sample)), grads


def score_gradients(
    model: VaeModel,
    batch: np.ndarray,
    sample_ids: Sequence[int],
    k: int = 1,
    rng: Optional[Rng] = None,
    eps: Optional[np.ndarray] = None,
) -> Tuple[List[LayerGradientSet], np.ndarray]:
    """∇θ of the IWAE-k bound for each sample over the selected encoder layers.

    One batched backward pass covers every sample. Returns the gradient sets and
    the per-sample bound values.
    """
    batch = as_tensor(batch)
    if eps is None:
        eps = latent_noise(rng or Rng(0), sample_ids, k, model.latent_dim)
    state = _bound_pass(model, batch, as_tensor(eps))
    n, k = state.log_w.shape
    weights = np.exp(state.log_w - logsumexp(state.log_w, axis=1)[:, None]).astype(state.log_w.dtype)

    grad_logits = (np.repeat(state.batch, k, axis=0) - sigmoid(state.logits)) * weights.reshape(n * k, 1, 1, 1)
    decoder_grads = model.decoder.backward(state.tapes["decoder"], grad_logits)
    grad_z = decoder_grads.input_grad.reshape(n, k, -1) - weights[:, :, None] * state.z

    std = np.exp(0.5 * state.logvar)
    grad_mu = grad_z.sum(axis=1)
    grad_logvar = (grad_z * state.eps).sum(axis=1) * 0.5 * std + 0.5
    results = _encoder_backward(model, state, grad_mu, grad_logvar, capture=model.selected_layers)

    captures = {}
    for result in results.values():
        captures.update(result.captures)
    ordered = {name: captures[name] for name in model.selected_layers}
    return per_sample_gradient_sets(ordered, sample_ids), iwae_bound(state.log_w)


def score_gradient(
    model: VaeModel, sample: np.ndarray, k: int = 1, rng: Optional[Rng] = None, sample_id: int = 0
) -> LayerGradientSet:
    """Score gradient of a single sample (C x H x W)."""
    sets, _ = score_gradients(model, np.asarray(sample)[None], [sample_id], k=k, rng=rng)
    return sets[0]


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-indexed ``epoch``: halved after every full period."""
    return config.learning_rate * 0.5 ** ((max(epoch, 1) - 1) // config.lr_halving_period)


class Adam:
    """Adam over a dictionary of parameter arrays, updated in place."""

    def __init__(self, params: Dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()}
        self.v = {name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, grad in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            param = self.params[name]
            param -= update.astype(param.dtype)


@dataclass
class EpochLoss:
    """Mean negative ELBO after ``epoch`` (0 = before training)."""

    epoch: int
    learning_rate: float
    loss: float


def mean_negative_elbo(model: VaeModel, images: np.ndarray, rng: Rng, batch_size: int = 256) -> float:
    total = 0.0
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        ids = range(start, start + chunk.shape[0])
        total += float(np.sum(-elbo(model, chunk, eps=latent_noise(rng, ids, 1, model.latent_dim))))
    return total / max(images.shape[0], 1)


def train(
    model: VaeModel, dataset: ImageDataset, config: TrainConfig
) -> Tuple[VaeModel, List[EpochLoss]]:
    """Train in place with Adam; returns the model and the loss curve (epoch 0 first)."""
    images = as_tensor(dataset.images)
    if images.shape[0] == 0:
        raise DataFormatError("training dataset is empty")
    if tuple(images.shape[1:]) != model.input_shape:
        raise ShapeError(f"dataset samples are {images.shape[1:]}, model expects {model.input_shape}")

    rng = Rng(config.seed)
    optimizer = Adam(model.parameters(), config.adam_beta1, config.adam_beta2, config.adam_eps)
    curve = [EpochLoss(0, learning_rate_at(config, 1), mean_negative_elbo(model, images, rng.spawn(0)))]
    logger.info("epoch 0: loss %.4f", curve[0].loss)

    n = images.shape[0]
    for epoch in range(1, config.epochs + 1):
        lr = learning_rate_at(config, epoch)
        order = rng.spawn(1, epoch).permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, config.batch_size)):
            index = order[start : start + config.batch_size]
            eps = rng.spawn(2, epoch, step).gaussian((len(index), config.iwae_k, model.latent_dim))
            loss, grads = loss_and_grads(model, images[index], eps)
            if not math.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}, batch {step}: loss={loss}")
            optimizer.step(grads, lr)
            total += loss * len(index)
        curve.append(EpochLoss(epoch, lr, total / n))
        logger.info("epoch %d: loss %.4f (lr %.2e)", epoch, curve[-1].loss, lr)
    return model, curve


class GradientStream:
    """Replayable stream of score gradients over a fixed set of samples.

    Every replay yields identical gradients: latent noise for a sample comes
    from ``rng.spawn(sample_id)`` and chunk boundaries depend only on
    ``batch_size``.
    """

    def __init__(
        self,
        model: VaeModel,
        images: np.ndarray,
        sample_ids: Sequence[int],
        k: int = 1,
        rng: Optional[Rng] = None,
        batch_size: int = 64,
        threads: int = 1,
    ):
        if len(sample_ids) != images.shape[0]:
            raise ShapeError(f"{len(sample_ids)} sample ids for {images.shape[0]} images")
        self.model = model
        self.images = images
        self.sample_ids = [int(i) for i in sample_ids]
        self.k = k
        self.rng = rng or Rng(0)
        self.batch_size = batch_size
        self.threads = threads

    def __len__(self) -> int:
        return len(self.sample_ids)

    def _chunk(self, index: range) -> List[LayerGradientSet]:
        sets, _ = score_gradients(
            self.model,
            self.images[index.start : index.stop],
            self.sample_ids[index.start : index.stop],
            k=self.k,
            rng=self.rng,
        )
        return sets

    def map_chunks(self, fn):
        """Apply ``fn`` to each chunk's gradient sets; results in chunk order."""
        chunks = chunk_ranges(len(self), self.batch_size)
        return ordered_map(lambda index: fn(self._chunk(index)), chunks, self.threads)

    def __iter__(self):
        for index in chunk_ranges(len(self), self.batch_size):
            yield from self._chunk(index)
