"""Raw datasets: the synthetic blobs generator and the MATX container."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._validation import check_fraction, check_images, check_labels
from .fileio import (FORMAT_VERSION, LayoutMismatchError, Reader, atomic_write, dump_meta)

MAGIC = b"MATX"
DTYPE_FLOAT32 = 1


@dataclass
class RawDataset:
    images: torch.Tensor  # (N, H, W, C) in [0, 1]
    labels: torch.Tensor  # int64 in [0, num_classes)
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = check_images(self.images)
        self.labels = check_labels(self.labels, self.num_classes, len(self.images))
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<4I", *self.images.shape))
        h.update(self.images.to(torch.float32).contiguous().numpy().tobytes())
        h.update(self.labels.to(torch.int32).numpy().tobytes())
        return h.hexdigest()

    def class_counts(self) -> list:
        return torch.bincount(self.labels, minlength=self.num_classes).tolist()


def _templates(num_classes, height, width, channels, amplitude, background, bump_width,
               texture=0.0):
    """Per-class (bump, grating) patterns, each of shape (num_classes, H, W, C).

    Bump centres are spread on a ring around the image centre; the zero-mean
    sinusoidal grating of amplitude ``texture`` has a class specific orientation.
    """
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    cy, cx = (height - 1) / 2, (width - 1) / 2
    radius = 0.3 * min(height, width)
    bumps = np.empty((num_classes, height, width, channels))
    gratings = np.empty_like(bumps)
    for c in range(num_classes):
        angle = 2 * math.pi * c / num_classes
        py, px = cy + radius * math.sin(angle), cx + radius * math.cos(angle)
        bump = np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * bump_width ** 2))
        phi = math.pi * c / num_classes
        grating = np.cos(2 * math.pi * 2 * (yy * math.cos(phi) + xx * math.sin(phi)) / max(height, width))
        bumps[c] = (background + amplitude * bump)[..., None]
        gratings[c] = (texture * grating)[..., None]
    return bumps, gratings


def gen_blobs(num_classes=2, per_class=100, height=8, width=8, sigma=0.05, seed=0, *,
              channels=1, test_per_class=None, amplitude=0.6, background=0.2,
              bump_width=None, texture=0.0, bump_flip=0.0):
    """Deterministic Gaussian-bump classification data, returned as (train, test).

    Each class has a fixed smooth template; samples add i.i.d. Gaussian noise
    with standard deviation ``sigma`` and are clipped to [0, 1]. A ``texture``
    amplitude below the attack radius plants a predictive but non-robust cue.
    With probability ``bump_flip`` a sample's bump is taken from a uniformly
    chosen other class while its grating keeps the true class, which makes the
    bump the less reliable of the two cues.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    check_fraction("bump_flip", bump_flip)
    if num_classes < 2 or per_class < 1 or height < 1 or width < 1 or channels < 1:
        raise ValueError("degenerate dataset dimensions")
    test_per_class = per_class if test_per_class is None else test_per_class
    bump_width = bump_width or max(height, width) / 8
    bumps, gratings = _templates(num_classes, height, width, channels, amplitude, background,
                                 bump_width, texture)
    rng = np.random.default_rng(seed)
    params = dict(generator="blobs", num_classes=num_classes, per_class=per_class,
                  test_per_class=test_per_class, height=height, width=width,
                  channels=channels, sigma=sigma, seed=seed, amplitude=amplitude,
                  background=background, bump_width=bump_width, texture=texture,
                  bump_flip=bump_flip)
    splits = []
    for split, n in (("train", per_class), ("test", test_per_class)):
        labels = np.repeat(np.arange(num_classes), n)
        noise = rng.standard_normal((len(labels), height, width, channels)) * sigma
        bump_class = labels
        if bump_flip > 0:
            flip = rng.random(len(labels)) < bump_flip
            shift = rng.integers(1, num_classes, len(labels))
            bump_class = np.where(flip, (labels + shift) % num_classes, labels)
        clean = bumps[bump_class] + gratings[labels]
        images = np.clip(clean + noise, 0.0, 1.0).astype(np.float32)
        splits.append(RawDataset(torch.from_numpy(images), torch.from_numpy(labels),
                                 num_classes, split, dict(params, split=split)))
    return splits[0], splits[1]


def raw_to_bytes(ds: RawDataset) -> bytes:
    n, h, w, c = ds.images.shape
    meta = dict(ds.meta, split=ds.split, digest=ds.digest)
    meta_blob = dump_meta(meta)
    return b"".join([
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<5IB", n, h, w, c, ds.num_classes, DTYPE_FLOAT32),
        ds.images.to(torch.float32).contiguous().numpy().astype("<f4").tobytes(),
        ds.labels.to(torch.int32).numpy().astype("<i4").tobytes(),
        struct.pack("<I", len(meta_blob)),
        meta_blob,
    ])


def save_raw(ds: RawDataset, path):
    atomic_write(path, raw_to_bytes(ds))


def load_raw(path) -> RawDataset:
    r = Reader(Path(path).read_bytes(), str(path))
    r.header(MAGIC, "raw dataset (MATX)")
    n, h, w, c, num_classes, dtype = r.unpack("5IB")
    if dtype != DTYPE_FLOAT32:
        raise LayoutMismatchError(f"{path}: unsupported dtype tag {dtype}")
    images = np.frombuffer(r.take(4 * n * h * w * c), dtype="<f4").reshape(n, h, w, c)
    labels = np.frombuffer(r.take(4 * n), dtype="<i4")
    meta = r.meta()
    split = meta.get("split", "train")
    digest = meta.pop("digest", None)
    ds = RawDataset(torch.from_numpy(images.astype(np.float32)),
                    torch.from_numpy(labels.astype(np.int64)), num_classes, split, meta)
    if digest is not None and digest != ds.digest:
        raise LayoutMismatchError(f"{path}: content digest does not match header metadata")
    return ds


def import_directory(root, split="train") -> RawDataset:
    """Build a dataset from per-class tensors under ``root``.

    Accepted layouts: ``root/<k>/*.npy`` with one image (H, W[, C]) per file,
    or ``root/<k>.npy`` holding a stack (N, H, W[, C]). Integer arrays are
    scaled by 1/255.
    """
    root = Path(root)
    stacks = {}
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        label = entry.name if entry.is_dir() else entry.stem
        if not label.isdigit():
            continue
        if entry.is_dir():
            files = sorted(entry.glob("*.npy"))
            if not files:
                continue
            stack = np.stack([np.load(f) for f in files])
        elif entry.suffix == ".npy":
            stack = np.load(entry)
        else:
            continue
        if np.issubdtype(stack.dtype, np.integer):
            stack = stack.astype(np.float64) / 255.0
        if stack.ndim == 3:
            stack = stack[..., None]
        if stack.ndim != 4:
            raise ValueError(f"{entry}: expected (N, H, W[, C]) images, got shape {stack.shape}")
        stacks[int(label)] = stack
    if not stacks:
        raise ValueError(f"no per-class .npy tensors found under {root}")
    labels = np.concatenate([np.full(len(s), k) for k, s in sorted(stacks.items())])
    images = np.concatenate([s for _, s in sorted(stacks.items())]).astype(np.float32)
    return RawDataset(torch.from_numpy(images), torch.from_numpy(labels),
                      max(max(stacks) + 1, 2), split, {"generator": "import", "source": root.name})
