"""Dataset ingestion (IDX files and manifests), synthetic OOD sets and perturbations."""

from __future__ import annotations

import hashlib
import logging
import struct
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataFormatError
from .schemas import ImageDataset
from .tensor import Rng, as_tensor

logger = logging.getLogger(__name__)

IDX_MAGIC_3D = 0x00000803
IDX_MAGIC_4D = 0x00000804
IDX_HEADER = ">I"
MANIFEST_SUFFIXES = {".txt", ".manifest"}


def _digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def _with_images(ds: ImageDataset, images: np.ndarray, label: Optional[str] = None) -> ImageDataset:
    return ImageDataset(
        images=images,
        label=label or ds.label,
        source_hash=ds.source_hash,
        provenance=list(ds.provenance) if ds.provenance is not None else None,
    )


def parse_idx(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse an unsigned-byte IDX payload into N x C x H x W uint8."""
    if len(payload) < 4:
        raise DataFormatError(f"{source}: truncated IDX header, missing {4 - len(payload)} byte(s) of magic")
    (magic,) = struct.unpack(IDX_HEADER, payload[:4])
    if magic not in (IDX_MAGIC_3D, IDX_MAGIC_4D):
        raise DataFormatError(
            f"{source}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_MAGIC_3D:08x} or 0x{IDX_MAGIC_4D:08x}"
        )
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(payload) < header_len:
        raise DataFormatError(
            f"{source}: truncated IDX header, missing {header_len - len(payload)} byte(s) of dimensions"
        )
    dims = struct.unpack(">" + "I" * ndim, payload[4:header_len])
    expected = int(np.prod(dims, dtype=np.int64))
    body = len(payload) - header_len
    if body < expected:
        raise DataFormatError(f"{source}: truncated IDX data, missing {expected - body} byte(s)")
    if body > expected:
        raise DataFormatError(f"{source}: IDX dimensions {dims} leave {body - expected} trailing byte(s)")
    if dims[0] == 0:
        raise DataFormatError(f"{source}: IDX file holds no images")
    raw = np.frombuffer(payload, dtype=np.uint8, offset=header_len).reshape(dims)
    return raw[:, None] if ndim == 3 else raw


def load_idx(path: str, label: Optional[str] = None) -> ImageDataset:
    """Load an IDX image file; bytes map to ``value / 255``."""
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    raw = parse_idx(payload, source=str(path))
    logger.debug("loaded %s: %s", path, raw.shape)
    return ImageDataset(
        images=as_tensor(raw / 255.0),
        label=label or Path(path).stem,
        source_hash=_digest(payload),
    )


def quantize(images: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 via round-half-even of ``x * 255``."""
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_idx(images: np.ndarray) -> bytes:
    raw = quantize(images)
    if raw.ndim != 4:
        raise DataFormatError(f"expected N x C x H x W images, got shape {raw.shape}")
    if raw.shape[1] == 1:
        raw = raw[:, 0]
        magic = IDX_MAGIC_3D
    else:
        magic = IDX_MAGIC_4D
    header = struct.pack(">" + "I" * (1 + raw.ndim), magic, *raw.shape)
    return header + raw.tobytes()


def write_idx(ds: ImageDataset, path: str) -> str:
    """Write ``ds`` as IDX; returns the sha256 of the bytes written."""
    payload = encode_idx(ds.images)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(payload)
    return _digest(payload)


def _image_shape(shape: Sequence[int]) -> Tuple[int, int, int]:
    shape = tuple(int(v) for v in shape)
    if len(shape) == 2:
        shape = (1,) + shape
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"image shape must be HxW or CxHxW with positive sizes, got {shape}")
    return shape


def parse_shape(text: str) -> Tuple[int, int, int]:
    """'28x28' or '1x28x28'."""
    try:
        return _image_shape(int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"cannot parse image shape {text!r}; expected HxW") from None


def gen_noise(n: int, shape: Sequence[int], seed: int = 0) -> ImageDataset:
    """Every pixel uniform over {0, ..., 255} / 255."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    shape = _image_shape(shape)
    levels = Rng(seed).integers(0, 256, (n,) + shape)
    return ImageDataset(images=as_tensor(levels / 255.0), label="noise", source_hash=f"noise:{seed}")


def gen_constant(n: int, shape: Sequence[int], seed: int = 0) -> ImageDataset:
    """One uniform level from {0, ..., 255} / 255 per image, replicated over every pixel."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    shape = _image_shape(shape)
    levels = Rng(seed).integers(0, 256, n).reshape(n, 1, 1, 1)
    images = np.broadcast_to(levels / 255.0, (n,) + shape)
    return ImageDataset(images=as_tensor(images), label="constant", source_hash=f"constant:{seed}")


def brightness(ds: ImageDataset, factor: float) -> ImageDataset:
    """pixel <- clamp(pixel * factor, 0, 1)."""
    if not factor > 0:
        raise ConfigError(f"brightness factor must be positive, got {factor}")
    images = np.clip(ds.images * np.asarray(factor, dtype=ds.images.dtype), 0.0, 1.0)
    return _with_images(ds, images, label=f"{ds.label}@brightness{factor:g}")


def replace_random(ds: ImageDataset, ratio: float, seed: int = 0) -> ImageDataset:
    """Replace a ``ratio`` fraction of pixels (Bernoulli per pixel) with uniform noise levels."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"replacement ratio must be in [0, 1], got {ratio}")
    rng = Rng(seed)
    mask = rng.uniform(ds.images.shape) < ratio
    noise = rng.integers(0, 256, ds.images.shape) / 255.0
    images = np.where(mask, noise, ds.images).astype(ds.images.dtype)
    return _with_images(ds, images, label=f"{ds.label}@replace{ratio:g}")


def gaussian_blur(ds: ImageDataset, sigma: float) -> ImageDataset:
    """Blur each channel spatially with a Gaussian kernel of width ``sigma`` pixels."""
    if sigma < 0:
        raise ConfigError(f"blur sigma must be non-negative, got {sigma}")
    images = ndimage.gaussian_filter(ds.images, sigma=(0, 0, sigma, sigma), mode="nearest")
    return _with_images(ds, np.clip(images, 0.0, 1.0), label=f"{ds.label}@blur{sigma:g}")


def subset(ds: ImageDataset, indices: Sequence[int]) -> ImageDataset:
    index = np.asarray(indices, dtype=np.int64)
    provenance = [ds.provenance[i] for i in index] if ds.provenance is not None else None
    return ImageDataset(images=ds.images[index], label=ds.label, source_hash=ds.source_hash, provenance=provenance)


def take_random(ds: ImageDataset, n: int, seed: int = 0) -> ImageDataset:
    """``n`` distinct samples chosen uniformly at random, kept in source order."""
    if n > len(ds):
        raise DataFormatError(f"dataset {ds.label} has {len(ds)} samples, {n} requested")
    return subset(ds, np.sort(Rng(seed).choice(len(ds), n)))


def concat(datasets: Sequence[ImageDataset], label: str = "concat") -> ImageDataset:
    if not datasets:
        raise DataFormatError("nothing to concatenate")
    shapes = {ds.sample_shape for ds in datasets}
    if len(shapes) != 1:
        raise DataFormatError(f"cannot concatenate datasets with sample shapes {sorted(shapes)}")
    provenance: List[str] = []
    for ds in datasets:
        provenance.extend(ds.provenance if ds.provenance is not None else [ds.label] * len(ds))
    combined = hashlib.sha256("".join(ds.source_hash for ds in datasets).encode("utf-8")).hexdigest()
    return ImageDataset(
        images=np.concatenate([ds.images for ds in datasets]),
        label=label,
        source_hash=combined,
        provenance=provenance,
    )


def read_manifest(path: str) -> List[Tuple[str, str]]:
    """``label=path`` lines; blank lines and ``#`` comments are skipped.

    Relative paths resolve against the manifest's directory.
    """
    manifest = Path(path)
    try:
        lines = manifest.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"cannot read manifest {path}: {exc}") from exc
    entries: List[Tuple[str, str]] = []
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        label, sep, target = line.partition("=")
        if not sep or not label.strip() or not target.strip():
            raise DataFormatError(f"{path}:{number}: expected 'label=path', got {line!r}")
        target_path = Path(target.strip()).expanduser()
        if not target_path.is_absolute():
            target_path = manifest.parent / target_path
        entries.append((label.strip(), str(target_path)))
    if not entries:
        raise DataFormatError(f"manifest {path} lists no datasets")
    return entries


def load_manifest(path: str) -> List[ImageDataset]:
    return [load_idx(target, label=label) for label, target in read_manifest(path)]


def _looks_like_idx(path: Path) -> bool:
    try:
        with path.open("rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    return len(head) == 4 and head[:3] == b"\x00\x00\x08"


def load_dataset(path: str) -> ImageDataset:
    """An IDX file, or a manifest whose datasets are concatenated."""
    source = Path(path)
    if source.suffix.lower() in MANIFEST_SUFFIXES or not _looks_like_idx(source):
        return concat(load_manifest(path), label=source.stem)
    return load_idx(path)


def provenance_rows(ds: ImageDataset) -> Iterable[Tuple[int, str]]:
    labels = ds.provenance if ds.provenance is not None else [ds.label] * len(ds)
    return enumerate(labels)
