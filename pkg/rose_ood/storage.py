"""Binary artifact files: model checkpoints and fitted Fisher factors.

Both formats open with an 8-byte magic and a u32 version; all integers and
floats after that are little-endian.

Checkpoint ("RVAE0001")::

    magic | version u32 | fingerprint u64 | weights checksum u64
    | descriptor length u32 | descriptor (canonical JSON, UTF-8)
    | parameter count u64 | parameters (f32, model parameter order)

Fisher file ("RFSH0001")::

    magic | version u32 | fingerprint u64 | weights checksum u64
    | method length u8 | method (ASCII) | layer count u32
    | per layer: name length u16 | name | n_samples u64 | damping f64 | q u32 | p u32
    |            diag: diag (q*p f64)  or  ekfac: U_A (p*p f64) | U_B (q*q f64) | Σ (q*p f64)
    | stats flag u8 | [n_samples u64 | per layer: mu f64 | sigma f64 | degenerate u8]
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import DataFormatError, FingerprintMismatchError
from .fisher import DiagFactor, EkfacFactor, FisherArtifact
from .schemas import LayerStats
from .vae import VaeModel

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RVAE0001"
FISHER_MAGIC = b"RFSH0001"
FORMAT_VERSION = 1


class _Reader:
    """Cursor over a byte payload that reports truncation precisely."""

    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.source = source
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.payload):
            raise DataFormatError(
                f"{self.source}: truncated while reading {what}, missing {end - len(self.payload)} byte(s)"
            )
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def array(self, shape: Tuple[int, ...], dtype: str, what: str) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize, what), dtype=dtype).reshape(shape).copy()

    def finish(self) -> None:
        extra = len(self.payload) - self.offset
        if extra:
            raise DataFormatError(f"{self.source}: {extra} unexpected trailing byte(s)")


def _open(path: str, magic: bytes) -> _Reader:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    reader = _Reader(payload, str(path))
    found = payload[: len(magic)]
    if found != magic:
        raise DataFormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    reader.offset = len(magic)
    (version,) = reader.unpack("I", "version")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}")
    return reader


def _write(path: str, payload: bytes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(payload)


def encode_checkpoint(model: VaeModel) -> bytes:
    descriptor = model.descriptor_bytes()
    blob = model.parameter_blob()
    return b"".join(
        [
            CHECKPOINT_MAGIC,
            struct.pack("<IQQ", FORMAT_VERSION, model.fingerprint(), model.weights_checksum()),
            struct.pack("<I", len(descriptor)),
            descriptor,
            struct.pack("<Q", len(blob) // 4),
            blob,
        ]
    )


def save_checkpoint(model: VaeModel, path: str) -> None:
    _write(path, encode_checkpoint(model))
    logger.info("checkpoint written to %s (fingerprint %016x)", path, model.fingerprint())


def load_checkpoint(path: str) -> VaeModel:
    reader = _open(path, CHECKPOINT_MAGIC)
    fingerprint, checksum = reader.unpack("QQ", "fingerprint")
    (length,) = reader.unpack("I", "descriptor length")
    try:
        descriptor = json.loads(reader.take(length, "descriptor").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt architecture descriptor ({exc})") from exc
    model = VaeModel.from_descriptor(descriptor)
    if model.fingerprint() != fingerprint:
        raise FingerprintMismatchError(
            f"{path}: stored fingerprint {fingerprint:016x}, descriptor hashes to {model.fingerprint():016x}"
        )

    (count,) = reader.unpack("Q", "parameter count")
    params = model.parameters()
    expected = sum(value.size for value in params.values())
    if count != expected:
        raise DataFormatError(f"{path}: {count} stored parameters, architecture needs {expected}")
    values = {}
    for name, value in params.items():
        values[name] = reader.array(value.shape, "<f4", f"parameter {name}").astype(value.dtype)
    reader.finish()
    model.set_parameters(values)
    if model.weights_checksum() != checksum:
        raise FingerprintMismatchError(f"{path}: weights checksum mismatch")
    return model


def _pack_name(name: str, width: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<" + width, len(raw)) + raw


def _f64(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


def encode_fisher(artifact: FisherArtifact) -> bytes:
    parts: List[bytes] = [
        FISHER_MAGIC,
        struct.pack("<IQQ", FORMAT_VERSION, artifact.fingerprint, artifact.weights_checksum),
        _pack_name(artifact.method, "B"),
        struct.pack("<I", len(artifact.layers)),
    ]
    for name, factor in artifact.layers.items():
        q, p = factor.shape
        parts += [_pack_name(name, "H"), struct.pack("<QdII", factor.n_samples, factor.damping, q, p)]
        if isinstance(factor, DiagFactor):
            parts.append(_f64(factor.diag))
        else:
            parts += [_f64(factor.u_a), _f64(factor.u_b), _f64(factor.sigma)]
    stats = artifact.stats
    if stats is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BQ", 1, stats.n_samples))
        for i in range(stats.n_layers):
            parts.append(struct.pack("<ddB", stats.mu[i], stats.sigma[i], int(bool(stats.degenerate[i]))))
    return b"".join(parts)


def save_fisher(artifact: FisherArtifact, path: str) -> None:
    _write(path, encode_fisher(artifact))
    logger.info("fisher artifact (%s, %d layer(s)) written to %s", artifact.method, len(artifact.layers), path)


def load_fisher(path: str) -> FisherArtifact:
    reader = _open(path, FISHER_MAGIC)
    fingerprint, checksum = reader.unpack("QQ", "fingerprint")
    (method_len,) = reader.unpack("B", "method length")
    method = reader.take(method_len, "method").decode("ascii", errors="replace")
    if method not in ("diag", "ekfac"):
        raise DataFormatError(f"{path}: unknown method tag {method!r}")
    (n_layers,) = reader.unpack("I", "layer count")

    layers = {}
    for _ in range(n_layers):
        (name_len,) = reader.unpack("H", "layer name length")
        name = reader.take(name_len, "layer name").decode("utf-8", errors="replace")
        n_samples, damping, q, p = reader.unpack("QdII", f"layer {name} header")
        if method == "diag":
            layers[name] = DiagFactor(name, reader.array((q, p), "<f8", f"{name} diag"), n_samples, damping)
        else:
            u_a = reader.array((p, p), "<f8", f"{name} U_A")
            u_b = reader.array((q, q), "<f8", f"{name} U_B")
            sigma = reader.array((q, p), "<f8", f"{name} sigma")
            layers[name] = EkfacFactor(name, u_a, u_b, sigma, n_samples, damping)

    stats: Optional[LayerStats] = None
    (has_stats,) = reader.unpack("B", "stats flag")
    if has_stats:
        (n_samples,) = reader.unpack("Q", "stats sample count")
        rows = [reader.unpack("ddB", f"stats of layer {i + 1}") for i in range(n_layers)]
        stats = LayerStats(
            layer_names=list(layers),
            mu=np.array([row[0] for row in rows]),
            sigma=np.array([row[1] for row in rows]),
            n_samples=int(n_samples),
            degenerate=np.array([bool(row[2]) for row in rows]),
        )
    reader.finish()
    return FisherArtifact(method, layers, fingerprint, checksum, stats)


class ArtifactStore:
    """Named artifact paths under one directory."""

    def __init__(self, root: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> str:
        return str(self.root / name)

    @property
    def checkpoint_path(self) -> str:
        return self.path("model.rvae")

    @property
    def fisher_path(self) -> str:
        return self.path("fisher.rfsh")

    def save_model(self, model: VaeModel, path: Optional[str] = None) -> str:
        target = path or self.checkpoint_path
        save_checkpoint(model, target)
        return target

    def load_model(self, path: Optional[str] = None) -> VaeModel:
        return load_checkpoint(path or self.checkpoint_path)

    def save_fisher(self, artifact: FisherArtifact, path: Optional[str] = None) -> str:
        target = path or self.fisher_path
        save_fisher(artifact, target)
        return target

    def load_fisher(self, path: Optional[str] = None) -> FisherArtifact:
        return load_fisher(path or self.fisher_path)
