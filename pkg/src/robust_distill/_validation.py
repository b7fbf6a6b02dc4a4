"""Input validation shared by the functional core and the estimators."""

import numpy as np
import torch


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def check_images(images, *, bounds=(0.0, 1.0), shape=None, dtype=None) -> torch.Tensor:
    """Return a (N, H, W, C) real tensor with finite pixels inside ``bounds``.

    Three-dimensional input (N, H, W) gets a trailing channel axis. ``shape``
    checks everything after the batch axis.
    """
    images = as_tensor(images)
    if not torch.is_floating_point(images):
        images = images.to(torch.float32)
    if dtype is not None:
        images = images.to(dtype)
    if images.dim() == 3 and (shape is None or len(shape) == 3):
        images = images.unsqueeze(-1)
    if images.dim() < 2 or images.shape[0] == 0:
        raise ValueError(f"expected a non-empty batch of images, got shape {tuple(images.shape)}")
    if shape is not None and tuple(images.shape[1:]) != tuple(shape):
        raise ValueError(f"image shape {tuple(images.shape[1:])} does not match {tuple(shape)}")
    if not torch.isfinite(images).all():
        raise ValueError("images contain non-finite values")
    lo, hi = bounds
    if images.min() < lo or images.max() > hi:
        raise ValueError(f"pixel values must lie in [{lo}, {hi}]")
    return images


def check_labels(labels, num_classes: int, n=None) -> torch.Tensor:
    labels = as_tensor(labels)
    if labels.dim() != 1:
        raise ValueError(f"labels must be 1-D, got shape {tuple(labels.shape)}")
    if torch.is_floating_point(labels):
        if not torch.equal(labels, labels.round()):
            raise ValueError("labels must be integers")
    labels = labels.to(torch.int64)
    if n is not None and len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} images")
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def check_fraction(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value
