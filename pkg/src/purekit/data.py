"""Dataset container, file formats, and the synthetic texture generator.

The native on-disk layout ("PGTN") is deliberately trivial: magic, version,
u32 dims (N, C, H, W, class count), then little-endian float32 images in
[0, 1] followed by one label byte per image.  The CIFAR-10 binary batch
layout (3073-byte records, one label byte plus 3072 pixel bytes scaled by
1/255) is also readable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

DATASET_MAGIC = b"PGTN"
DATASET_VERSION = 1
_CIFAR_RECORD = 3073
_CIFAR_SIDE = 32
_CIFAR_CLASSES = 10


@dataclass
class DatasetFile:
    """Labeled image set: (N,C,H,W) float32 in [0,1] plus u8 labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4:
            raise DataError("images must be a (N,C,H,W) array")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError("label count does not match image count")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("image values must lie in [0, 1]")
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise DataError(
                f"label {int(self.labels.max())} >= class count {self.class_count}")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def with_images(self, images):
        return replace(self, images=np.asarray(images, dtype=np.float32))

    def subset(self, indices):
        idx = np.asarray(indices)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def save_dataset(dataset, path):
    """Write the PGTN layout; the same struct always produces the same bytes."""
    n, c, h, w = dataset.images.shape
    try:
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<6I", DATASET_VERSION, n, c, h, w,
                                 dataset.class_count))
            fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
            fh.write(dataset.labels.tobytes())
    except OSError as exc:
        raise DataError(f"cannot write dataset {path}: {exc}") from exc


def _load_pgtn(blob, path):
    header = struct.calcsize("<6I") + 4
    if len(blob) < header:
        raise DataError(f"{path}: truncated payload")
    version, n, c, h, w, classes = struct.unpack_from("<6I", blob, 4)
    if version != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    pixels = 4 * n * c * h * w
    if len(blob) != header + pixels + n:
        raise DataError(f"{path}: truncated payload "
                        f"(expected {header + pixels + n} bytes, got {len(blob)})")
    images = np.frombuffer(blob, dtype="<f4", count=n * c * h * w,
                           offset=header).reshape(n, c, h, w)
    labels = np.frombuffer(blob, dtype=np.uint8, offset=header + pixels)
    if labels.size and int(labels.max()) >= classes:
        raise DataError(f"{path}: label exceeds class count {classes}")
    return DatasetFile(images.copy(), labels.copy(), classes, name=path)


def _load_cifar(blob, path):
    if len(blob) == 0 or len(blob) % _CIFAR_RECORD:
        raise DataError(f"{path}: truncated payload (not whole 3073-byte records)")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].copy()
    if int(labels.max()) >= _CIFAR_CLASSES:
        raise DataError(f"{path}: label exceeds class count {_CIFAR_CLASSES}")
    images = records[:, 1:].reshape(-1, 3, _CIFAR_SIDE, _CIFAR_SIDE)
    images = images.astype(np.float32) / 255.0
    return DatasetFile(images, labels, _CIFAR_CLASSES, name=path)


def load_dataset(path):
    """Load either the native PGTN layout or a CIFAR-10 binary batch."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if len(blob) < 4:
        raise DataError(f"{path}: truncated payload")
    if blob[:4] == DATASET_MAGIC:
        return _load_pgtn(blob, path)
    if len(blob) % _CIFAR_RECORD == 0:
        return _load_cifar(blob, path)
    raise DataError(f"{path}: bad magic {blob[:4]!r}")


def make_textures(count, classes, height=8, width=8, channels=3, seed=0,
                  name="textures"):
    """Synthetic grating textures, one orientation/frequency pair per class.

    Each image is a sinusoidal grating with class-specific direction and
    frequency, random phase, mild per-channel amplitude jitter, and a touch
    of pixel noise; values are clipped to [0, 1].  Classes are balanced.
    """
    if count < classes:
        raise ConfigError("need at least one image per class")
    if classes < 1 or classes > 255:
        raise ConfigError("class count must be in 1..255")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    labels = np.arange(count) % classes
    images = np.empty((count, channels, height, width), dtype=np.float32)
    for i in range(count):
        j = labels[i]
        theta = np.pi * j / classes
        freq = 1.0 + (j % 2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        carrier = np.sin(
            2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
            / max(height, width) + phase)
        mean = rng.uniform(0.45, 0.55)
        amp = rng.uniform(0.30, 0.42)
        jitter = 1.0 + 0.1 * rng.normal(size=(channels, 1, 1))
        img = mean + amp * jitter * carrier[None]
        img += 0.02 * rng.normal(size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(count)
    return DatasetFile(images[order], labels[order].astype(np.uint8), classes,
                       name=name)


def save_ppm(image, path):
    """Dump one (C,H,W) image in [0,1] as a binary PPM (P6)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise DataError("PPM dump expects a (C,H,W) image")
    c, h, w = image.shape
    if c == 1:
        image = np.repeat(image, 3, axis=0)
    elif c != 3:
        raise DataError(f"PPM dump supports 1 or 3 channels, got {c}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())
