"""Expert trajectories: adversarial teacher training with EMA-smoothed snapshots."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import check_fraction, check_images, check_labels
from .attacks import AttackConfig, attack
from .fileio import (FORMAT_VERSION, LayoutMismatchError, Reader, atomic_write, dump_meta,
                     sha256_bytes)
from .models import ModelSpec, ParamVector, SpecError, forward, init_model

logger = logging.getLogger(__name__)

MAGIC = b"MATB"
FLAG_RAW = 1
LOSS_KINDS = ("natural", "pgd-at", "trades", "mart")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ATLossVariant:
    kind: str = "pgd-at"
    beta: float = 6.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown adversarial loss {self.kind!r}; choose from {LOSS_KINDS}")
        if self.kind in ("trades", "mart") and not self.beta > 0:
            raise ValueError(f"{self.kind} needs beta > 0")

    @property
    def adversarial(self) -> bool:
        return self.kind != "natural"


@dataclass
class TrajectoryBuffer:
    """Per-epoch weight snapshots of one expert run.

    ``ema`` and ``raw`` are (epochs + 1, num_params) float32 tensors; row 0
    is the initialization.
    """

    spec: ModelSpec
    ema: torch.Tensor
    raw: Optional[torch.Tensor] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ema.dim() != 2 or self.ema.shape[0] < 1:
            raise ValueError("ema snapshots must be a non-empty 2-D tensor")
        if self.ema.shape[1] != self.spec.num_params:
            raise LayoutMismatchError(
                f"snapshot length {self.ema.shape[1]} != {self.spec.num_params} params of {self.spec}")
        if self.raw is not None and self.raw.shape != self.ema.shape:
            raise LayoutMismatchError("raw and ema tracks differ in shape")

    @property
    def epochs(self) -> int:
        return self.ema.shape[0] - 1

    def track(self, name: str = "ema") -> torch.Tensor:
        if name == "ema":
            return self.ema
        if name == "raw":
            if self.raw is None:
                raise ValueError("buffer has no raw track")
            return self.raw
        raise ValueError(f"unknown track {name!r}")

    def snapshot(self, epoch: int, track: str = "ema") -> ParamVector:
        return ParamVector(self.track(track)[epoch], self.spec.spec_hash)

    @property
    def snapshots_ema(self) -> list:
        return [self.snapshot(e, "ema") for e in range(self.epochs + 1)]

    @property
    def snapshots_raw(self) -> Optional[list]:
        if self.raw is None:
            return None
        return [self.snapshot(e, "raw") for e in range(self.epochs + 1)]

    @property
    def digest(self) -> str:
        return sha256_bytes(buffer_to_bytes(self))

    @property
    def content_digest(self) -> str:
        """Digest of the snapshot payload alone, independent of metadata."""
        tracks = [self.ema] if self.raw is None else [self.ema, self.raw]
        return sha256_bytes(b"".join(t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
                                     for t in tracks))

    def equals(self, other: "TrajectoryBuffer") -> bool:
        same_raw = (self.raw is None and other.raw is None) or (
            self.raw is not None and other.raw is not None and torch.equal(self.raw, other.raw))
        return (self.spec == other.spec and torch.equal(self.ema, other.ema) and same_raw
                and self.meta == other.meta)


def _values(p):
    return p.values if isinstance(p, ParamVector) else p


def ema_update(ema_prev, theta_t, alpha: float):
    """``alpha * ema_prev + (1 - alpha) * theta_t``; returns the type it was given."""
    alpha = check_fraction("alpha", alpha)
    a, b = _values(ema_prev), _values(theta_t)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = alpha * a + (1.0 - alpha) * b
    if isinstance(ema_prev, ParamVector):
        return ParamVector(out, ema_prev.spec_hash)
    return out


def _kl_nat_adv(logits_nat, logits_adv):
    """Per-sample KL(p_nat || p_adv)."""
    log_nat = F.log_softmax(logits_nat, dim=1)
    return (log_nat.exp() * (log_nat - F.log_softmax(logits_adv, dim=1))).sum(dim=1)


def at_loss(variant: ATLossVariant, params, spec: ModelSpec, x, x_adv, y) -> torch.Tensor:
    """Outer training loss for each adversarial-training flavour.

    * natural: CE(f(x), y)
    * pgd-at: CE(f(x'), y)
    * trades: CE(f(x), y) + beta * KL(p(x) || p(x'))
    * mart: CE(f(x'), y) - log(1 - max_{k != y} p_k(x'))
      + beta * mean[KL(p(x) || p(x')) * (1 - p_y(x))]
    """
    if variant.kind == "natural":
        return F.cross_entropy(forward(params, spec, x), y)
    if variant.kind == "pgd-at":
        return F.cross_entropy(forward(params, spec, x_adv), y)
    logits_nat = forward(params, spec, x)
    logits_adv = forward(params, spec, x_adv)
    if variant.kind == "trades":
        return (F.cross_entropy(logits_nat, y)
                + variant.beta * _kl_nat_adv(logits_nat, logits_adv).mean())
    if variant.kind == "mart":
        probs_adv = F.softmax(logits_adv, dim=1)
        wrong = probs_adv.masked_fill(F.one_hot(y, probs_adv.shape[1]).bool(), -1.0)
        top_wrong = wrong.max(dim=1).values
        bce = F.cross_entropy(logits_adv, y) - torch.log(torch.clamp(1 - top_wrong, min=1e-12)).mean()
        p_true = F.softmax(logits_nat, dim=1).gather(1, y[:, None]).squeeze(1)
        return bce + variant.beta * (_kl_nat_adv(logits_nat, logits_adv) * (1 - p_true)).mean()
    raise ValueError(f"unknown adversarial loss {variant.kind!r}")


def adversarial_batch(variant: ATLossVariant, params, spec, x, y, cfg: AttackConfig, generator):
    """Inner maximization; TRADES ascends its KL term, the others ascend CE."""
    if not variant.adversarial:
        return x
    loss_fn = None
    if variant.kind == "trades":
        with torch.no_grad():
            logits_nat = forward(params, spec, x)
        loss_fn = lambda x_adv: _kl_nat_adv(logits_nat, forward(params, spec, x_adv)).mean()  # noqa: E731
    return attack(params, spec, x, y, cfg, generator=generator, loss_fn=loss_fn)


def train_expert(images, labels, spec: ModelSpec, variant: ATLossVariant = ATLossVariant(),
                 attack_cfg: AttackConfig = AttackConfig(), ema_decay: float = 0.999,
                 outer_lr: float = 0.01, epochs: int = 20, batch_size: int = 256, seed: int = 0,
                 momentum: float = 0.0, keep_raw: bool = True, dataset_digest: str = "",
                 dtype=torch.float32) -> TrajectoryBuffer:
    """Train one teacher and record its trajectory.

    Every minibatch: attack (unless natural), one SGD step on the variant's
    loss, then an EMA update of the weights. Snapshots of both tracks are
    taken at the end of each epoch.
    """
    ema_decay = check_fraction("ema_decay", ema_decay)
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    x_all = check_images(images, shape=spec.input_shape).to(dtype)
    y_all = check_labels(labels, spec.num_classes, len(x_all))
    gen = torch.Generator().manual_seed(int(seed))

    theta = init_model(spec, seed, dtype).values.clone()
    ema = theta.clone()
    velocity = torch.zeros_like(theta)
    ema_track, raw_track = [ema.clone()], [theta.clone()]
    n = len(x_all)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        for it, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            x, y = x_all[idx], y_all[idx]
            x_adv = adversarial_batch(variant, theta, spec, x, y, attack_cfg, gen)
            theta_req = theta.detach().requires_grad_(True)
            loss = at_loss(variant, theta_req, spec, x, x_adv, y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite expert loss at epoch {epoch}, iteration {it} (seed {seed})")
            (grad,) = torch.autograd.grad(loss, theta_req)
            with torch.no_grad():
                if momentum:
                    velocity = momentum * velocity + grad
                    step = velocity
                else:
                    step = grad
                theta = theta - outer_lr * step
                ema = ema_update(ema, theta, ema_decay)
        ema_track.append(ema.clone())
        raw_track.append(theta.clone())
        logger.debug("expert seed=%d epoch=%d loss=%.4f", seed, epoch, float(loss.detach()))

    meta = {
        "loss_variant": variant.kind,
        "beta": variant.beta,
        "attack": attack_cfg.to_dict(),
        "ema_decay": ema_decay,
        "ema_granularity": "iteration",
        "outer_lr": outer_lr,
        "momentum": momentum,
        "epochs": epochs,
        "batch_size": batch_size,
        "seed": int(seed),
        "dataset_digest": dataset_digest,
        "init": "fan-in-uniform",
        "optimizer": "sgd",
    }
    return TrajectoryBuffer(spec, torch.stack(ema_track).to(torch.float32),
                            torch.stack(raw_track).to(torch.float32) if keep_raw else None, meta)


def weight_variance(buffer: TrajectoryBuffer, track: str = "ema") -> np.ndarray:
    """Per-epoch step norms ``||theta_e - theta_{e-1}||_2`` for e = 1..E."""
    snaps = buffer.track(track).to(torch.float64)
    if len(snaps) < 2:
        raise ValueError("need at least two snapshots")
    return torch.linalg.vector_norm(snaps[1:] - snaps[:-1], dim=1).numpy()


def weight_variance_rows(buffer: TrajectoryBuffer, tracks=("ema", "raw")) -> list:
    """Rows ``(epoch, delta_norm, track)`` for every requested track."""
    rows = []
    for name in tracks:
        for e, d in enumerate(weight_variance(buffer, name), start=1):
            rows.append((e, float(d), name))
    return rows


# -- MATB container ------------------------------------------------------------

def buffer_to_bytes(buffer: TrajectoryBuffer) -> bytes:
    spec_text = buffer.spec.to_string().encode()
    count, n_params = buffer.ema.shape
    flags = FLAG_RAW if buffer.raw is not None else 0
    meta = dict(buffer.meta, spec_hash=buffer.spec.spec_hash)
    meta_blob = dump_meta(meta)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<H", len(spec_text)),
             spec_text, struct.pack("<IQB", count, n_params, flags),
             buffer.ema.to(torch.float32).contiguous().numpy().astype("<f4").tobytes()]
    if buffer.raw is not None:
        parts.append(buffer.raw.to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    parts += [struct.pack("<I", len(meta_blob)), meta_blob]
    return b"".join(parts)


def save_buffer(buffer: TrajectoryBuffer, path):
    atomic_write(path, buffer_to_bytes(buffer))


def buffer_from_bytes(blob: bytes, what: str = "buffer") -> TrajectoryBuffer:
    r = Reader(blob, what)
    r.header(MAGIC, "trajectory buffer")
    (spec_len,) = r.unpack("H")
    try:
        spec = ModelSpec.from_string(r.take(spec_len).decode())
    except (SpecError, UnicodeDecodeError) as exc:
        raise LayoutMismatchError(f"{what}: bad model spec ({exc})") from exc
    count, n_params, flags = r.unpack("IQB")
    if n_params != spec.num_params:
        raise LayoutMismatchError(
            f"{what}: header declares {n_params} params, spec {spec} has {spec.num_params}")

    def track():
        data = np.frombuffer(r.take(4 * count * n_params), dtype="<f4")
        return torch.from_numpy(data.astype(np.float32).reshape(count, n_params))

    ema = track()
    raw = track() if flags & FLAG_RAW else None
    meta = r.meta()
    stored_hash = meta.pop("spec_hash", spec.spec_hash)
    if stored_hash != spec.spec_hash:
        raise LayoutMismatchError(f"{what}: metadata spec hash {stored_hash} != {spec.spec_hash}")
    return TrajectoryBuffer(spec, ema, raw, meta)


def load_buffer(path) -> TrajectoryBuffer:
    return buffer_from_bytes(Path(path).read_bytes(), str(path))
