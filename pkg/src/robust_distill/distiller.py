"""Trajectory matching: learn a small synthetic set whose student updates track an expert.

The student is unrolled on the synthetic images with a differentiable graph,
so the normalized weight-matching loss can be differentiated with respect to
the pixels and the learnable student learning rate.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import check_images, check_labels
from .expert import TrajectoryBuffer
from .fileio import (FORMAT_VERSION, LayoutMismatchError, Reader, atomic_write, dump_meta,
                     sha256_bytes)
from .models import ModelSpec, ParamVector, SpecError, forward

logger = logging.getLogger(__name__)

MAGIC = b"MATS"
LR_FLOOR = 1e-6


class DegenerateSegmentError(ValueError):
    """Expert segment whose start and target weights (nearly) coincide."""


class StudentDivergedError(RuntimeError):
    pass


@dataclass
class SyntheticDataset:
    images: torch.Tensor  # (num_classes * ipc, H, W, C)
    labels: torch.Tensor  # class-block layout: ipc copies of 0, then of 1, ...
    num_classes: int
    ipc: int
    inner_lr: float = 0.01
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ipc < 1:
            raise ValueError("ipc must be >= 1")
        expected = torch.arange(self.num_classes).repeat_interleave(self.ipc)
        self.labels = check_labels(self.labels, self.num_classes)
        if not torch.equal(self.labels, expected):
            raise ValueError("labels must be in class-block layout with ipc images per class")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images for {len(self.labels)} labels")
        if not self.inner_lr > 0:
            raise ValueError("inner_lr must be > 0")

    def __len__(self):
        return len(self.labels)

    @property
    def one_hot(self) -> torch.Tensor:
        return F.one_hot(self.labels, self.num_classes)

    @property
    def digest(self) -> str:
        return sha256_bytes(synthetic_to_bytes(self))

    @property
    def content_digest(self) -> str:
        """Digest of images, labels and inner_lr, independent of metadata."""
        return sha256_bytes(b"".join([
            self.images.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes(),
            self.labels.to(torch.int32).numpy().astype("<i4").tobytes(),
            struct.pack("<d", float(self.inner_lr))]))

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(self.images.detach().clone(), self.labels.clone(),
                                self.num_classes, self.ipc, float(self.inner_lr), dict(self.meta))


@dataclass(frozen=True)
class MatchConfig:
    max_start_epoch: int = 10
    target_offset: int = 2
    max_student_steps: int = 20
    student_batch: int = 256
    syn_lr: float = 100.0
    lr_lr: float = 1e-5
    iterations: int = 500
    degenerate_eps: float = 1e-12
    image_momentum: float = 0.5
    max_retries: int = 10
    start_track: str = "ema"
    target_track: str = "ema"

    def __post_init__(self):
        if self.max_start_epoch < 1 or self.target_offset < 1:
            raise ValueError("max_start_epoch and target_offset must be >= 1")
        if self.max_student_steps < 1:
            raise ValueError("max_student_steps must be >= 1")
        if not self.degenerate_eps > 0:
            raise ValueError("degenerate_eps must be > 0")
        for track in (self.start_track, self.target_track):
            if track not in ("ema", "raw"):
                raise ValueError(f"unknown track {track!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DistillState:
    """Optimizer state carried between distillation steps."""

    image_velocity: Optional[torch.Tensor] = None
    lr_velocity: float = 0.0
    iteration: int = 0


def init_synthetic(images, labels, num_classes: int, ipc: int, strategy: str = "real",
                   seed: int = 0, inner_lr: float = 0.01) -> SyntheticDataset:
    images = check_images(images)
    labels = check_labels(labels, num_classes, len(images))
    gen = torch.Generator().manual_seed(int(seed))
    if strategy == "real":
        picks = []
        for c in range(num_classes):
            pool = torch.nonzero(labels == c).flatten()
            if len(pool) < ipc:
                raise ValueError(f"class {c} has {len(pool)} samples, need ipc={ipc}")
            picks.append(pool[torch.randperm(len(pool), generator=gen)[:ipc]])
        syn = images[torch.cat(picks)].clone()
    elif strategy == "noise":
        syn = torch.rand((num_classes * ipc, *images.shape[1:]), generator=gen,
                         dtype=images.dtype)
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")
    return SyntheticDataset(syn, torch.arange(num_classes).repeat_interleave(ipc), num_classes,
                            ipc, float(inner_lr), {"init": strategy, "init_seed": int(seed)})


def student_unroll(images, labels, inner_lr, theta_start, spec: ModelSpec, n_steps: int,
                   student_batch: int = 256, generator=None,
                   augment: Optional[Callable] = None, create_graph: bool = True) -> list:
    """Plain SGD on the synthetic set, keeping the graph of every step.

    Returns ``[theta_1, ..., theta_n]``; gradients of anything computed from
    them reach ``images`` and ``inner_lr`` when those require grad.
    """
    if isinstance(theta_start, ParamVector):
        theta_start.check(spec)
        theta_start = theta_start.values
    theta = theta_start
    if not theta.requires_grad:
        theta = theta.detach().requires_grad_(True)
    n = len(images)
    out = []
    for k in range(n_steps):
        if n <= student_batch:
            x, y = images, labels
        else:
            idx = torch.randperm(n, generator=generator)[:student_batch]
            x, y = images[idx], labels[idx]
        if augment is not None:
            x = augment(x)
        loss = F.cross_entropy(forward(theta, spec, x), y)
        if not torch.isfinite(loss):
            raise StudentDivergedError(f"non-finite student loss at unroll step {k + 1}")
        (grad,) = torch.autograd.grad(loss, theta, create_graph=create_graph)
        theta = theta - inner_lr * grad
        out.append(theta)
    return out


def match_loss(theta_student, theta_target, theta_start, degenerate_eps: float = 1e-12):
    """``||student - target||^2 / ||target - start||^2``."""
    s, t, o = (p.values if isinstance(p, ParamVector) else p
               for p in (theta_student, theta_target, theta_start))
    if not s.shape == t.shape == o.shape:
        raise ValueError("match_loss needs equal-length vectors")
    denom = ((t - o) ** 2).sum()
    if denom < degenerate_eps:
        raise DegenerateSegmentError(f"||target - start||^2 = {float(denom):.3e} < {degenerate_eps}")
    return ((s - t) ** 2).sum() / denom


def att_select(thetas: Sequence, theta_target):
    """1-based step count whose weights are closest to the target; ties go to the smaller N."""
    if len(thetas) == 0:
        raise ValueError("att_select needs at least one student state")
    target = theta_target.values if isinstance(theta_target, ParamVector) else theta_target
    best_n, best_d = 0, None
    with torch.no_grad():
        for n, theta in enumerate(thetas, start=1):
            v = theta.values if isinstance(theta, ParamVector) else theta
            d = float(((v - target) ** 2).sum())
            if best_d is None or d < best_d:
                best_n, best_d = n, d
    return best_n, best_d


def _check_buffers(buffers: Sequence[TrajectoryBuffer], cfg: MatchConfig) -> ModelSpec:
    if not buffers:
        raise ValueError("no expert buffers given")
    spec = buffers[0].spec
    for i, b in enumerate(buffers):
        if b.spec != spec:
            raise SpecError(f"buffer {i} was trained with {b.spec}, expected {spec}")
        if cfg.max_start_epoch + cfg.target_offset > b.epochs:
            raise ValueError(
                f"buffer {i} has {b.epochs} epochs; need max_start_epoch + target_offset "
                f"= {cfg.max_start_epoch + cfg.target_offset}")
        b.track(cfg.start_track), b.track(cfg.target_track)
    return spec


def sample_segment(buffers, cfg: MatchConfig, generator, dtype=torch.float32):
    """Pick (buffer_id, t, start, target) with a non-degenerate expert step."""
    for _ in range(cfg.max_retries + 1):
        bid = int(torch.randint(len(buffers), (1,), generator=generator))
        t = 1 + int(torch.randint(cfg.max_start_epoch, (1,), generator=generator))
        buf = buffers[bid]
        start = buf.track(cfg.start_track)[t].to(dtype)
        target = buf.track(cfg.target_track)[t + cfg.target_offset].to(dtype)
        if float(((target - start) ** 2).sum()) >= cfg.degenerate_eps:
            return bid, t, start, target
        logger.info("skipping degenerate segment buffer=%d t=%d", bid, t)
    raise DegenerateSegmentError(
        f"no non-degenerate segment found after {cfg.max_retries + 1} draws")


def meta_gradient(images, labels, inner_lr, start, target, spec, cfg: MatchConfig,
                  generator=None, n_star: Optional[int] = None, augment=None):
    """Match loss and its gradient w.r.t. (images, inner_lr).

    ``n_star`` fixes the student step count; otherwise it is chosen by
    :func:`att_select` over ``cfg.max_student_steps`` unrolled steps.
    """
    img = images.detach().clone().requires_grad_(True)
    lr = torch.tensor(float(inner_lr), dtype=images.dtype, requires_grad=True)
    steps = cfg.max_student_steps if n_star is None else n_star
    thetas = student_unroll(img, labels, lr, start, spec, steps, cfg.student_batch,
                            generator, augment)
    if n_star is None:
        n_star, _ = att_select(thetas, target)
    loss = match_loss(thetas[n_star - 1], target, start, cfg.degenerate_eps)
    g_img, g_lr = torch.autograd.grad(loss, [img, lr])
    return float(loss.detach()), g_img, float(g_lr), n_star


def distill_step(S: SyntheticDataset, buffers: Sequence[TrajectoryBuffer], cfg: MatchConfig,
                 generator, state: Optional[DistillState] = None, augment=None):
    """One meta-gradient update of ``S``; returns (new S, stats)."""
    spec = _check_buffers(buffers, cfg)
    state = state if state is not None else DistillState()
    dtype = S.images.dtype
    bid, t, start, target = sample_segment(buffers, cfg, generator, dtype)
    loss, g_img, g_lr, n_star = meta_gradient(S.images, S.labels, S.inner_lr, start, target,
                                              spec, cfg, generator, augment=augment)
    if not np.isfinite(loss) or not torch.isfinite(g_img).all() or not np.isfinite(g_lr):
        raise StudentDivergedError(f"non-finite meta-gradient at iteration {state.iteration}")

    if state.image_velocity is None:
        state.image_velocity = torch.zeros_like(S.images)
    state.image_velocity = cfg.image_momentum * state.image_velocity + g_img
    state.lr_velocity = cfg.image_momentum * state.lr_velocity + g_lr
    images = torch.clamp(S.images - cfg.syn_lr * state.image_velocity, 0.0, 1.0).detach()
    inner_lr = max(S.inner_lr - cfg.lr_lr * state.lr_velocity, LR_FLOOR)
    state.iteration += 1
    new_S = SyntheticDataset(images, S.labels, S.num_classes, S.ipc, inner_lr, S.meta)
    stats = {"iter": state.iteration, "loss": loss, "t": t, "n_star": n_star,
             "buffer_id": bid, "inner_lr": inner_lr}
    return new_S, stats


def distill(S: SyntheticDataset, buffers, cfg: MatchConfig, seed: int = 0, callback=None,
            augment=None):
    """Run ``cfg.iterations`` distillation steps; returns (S, list of stats rows)."""
    _check_buffers(buffers, cfg)
    gen = torch.Generator().manual_seed(int(seed))
    state = DistillState()
    history = []
    for _ in range(cfg.iterations):
        S, stats = distill_step(S, buffers, cfg, gen, state, augment)
        history.append(stats)
        if callback is not None:
            callback(stats)
    S.meta = dict(S.meta, match=cfg.to_dict(), distill_seed=int(seed),
                  buffer_digests=[b.digest for b in buffers], model=buffers[0].spec.to_string())
    return S, history


# -- MATS container ------------------------------------------------------------

def synthetic_to_bytes(S: SyntheticDataset) -> bytes:
    n = len(S.images)
    h, w, c = S.images.shape[1:]
    meta_blob = dump_meta(S.meta)
    return b"".join([
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<6Id", n, h, w, c, S.num_classes, S.ipc, float(S.inner_lr)),
        S.images.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes(),
        S.labels.to(torch.int32).numpy().astype("<i4").tobytes(),
        struct.pack("<I", len(meta_blob)),
        meta_blob,
    ])


def save_synthetic(S: SyntheticDataset, path):
    atomic_write(path, synthetic_to_bytes(S))


def synthetic_from_bytes(blob: bytes, what: str = "synthetic set") -> SyntheticDataset:
    r = Reader(blob, what)
    r.header(MAGIC, "synthetic dataset (MATS)")
    n, h, w, c, num_classes, ipc, inner_lr = r.unpack("6Id")
    if n != num_classes * ipc:
        raise LayoutMismatchError(f"{what}: {n} images != {num_classes} classes x ipc {ipc}")
    images = np.frombuffer(r.take(4 * n * h * w * c), dtype="<f4").reshape(n, h, w, c)
    labels = np.frombuffer(r.take(4 * n), dtype="<i4")
    meta = r.meta()
    try:
        return SyntheticDataset(torch.from_numpy(images.astype(np.float32)),
                                torch.from_numpy(labels.astype(np.int64)), num_classes, ipc,
                                inner_lr, meta)
    except ValueError as exc:
        raise LayoutMismatchError(f"{what}: {exc}") from exc


def load_synthetic(path) -> SyntheticDataset:
    return synthetic_from_bytes(Path(path).read_bytes(), str(path))
