"""Natural training on a synthetic set and standard / adversarial accuracy."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import check_images, check_labels
from .attacks import AttackConfig, attack
from .fileio import atomic_write
from .models import ModelSpec, ParamVector, forward, init_model

logger = logging.getLogger(__name__)


class EvalError(RuntimeError):
    pass


def default_attacks():
    return [("pgd10", AttackConfig(epsilon=4 / 255, steps=10)),
            ("fgsm", AttackConfig.fgsm(4 / 255))]


@dataclass
class EvalConfig:
    spec: ModelSpec
    epochs: int = 500
    lr: float = 0.01
    momentum: float = 0.9
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    attacks: list = field(default_factory=default_attacks)
    batch_size: int = 256
    chunk_size: int = 512

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        names = [name for name, _ in self.attacks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attack names {names}")
        for name, cfg in self.attacks:
            if not isinstance(cfg, AttackConfig):
                raise TypeError(f"attack {name!r} is not an AttackConfig")

    def to_dict(self) -> dict:
        return {"model": self.spec.to_string(), "epochs": self.epochs, "lr": self.lr,
                "momentum": self.momentum, "weight_decay": 0.0, "seeds": list(self.seeds),
                "batch_size": self.batch_size, "chunk_size": self.chunk_size,
                "attacks": {name: cfg.to_dict() for name, cfg in self.attacks}}


def natural_train(images, labels, cfg: EvalConfig, seed: int) -> ParamVector:
    """SGD with momentum on plain cross-entropy; no adversarial examples."""
    spec = cfg.spec
    x_all = check_images(images, shape=spec.input_shape)
    y_all = check_labels(labels, spec.num_classes, len(x_all))
    params = init_model(spec, seed, x_all.dtype)
    theta = params.values.clone()
    velocity = torch.zeros_like(theta)
    gen = torch.Generator().manual_seed(int(seed))
    n = len(x_all)
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen) if n > cfg.batch_size else torch.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            theta_req = theta.requires_grad_(True)
            loss = F.cross_entropy(forward(theta_req, spec, x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise EvalError(f"non-finite training loss at epoch {epoch} (seed {seed})")
            (grad,) = torch.autograd.grad(loss, theta_req)
            with torch.no_grad():
                velocity = cfg.momentum * velocity + grad
                theta = theta.detach() - cfg.lr * velocity
    return ParamVector(theta.detach(), spec.spec_hash)


def predict(params, spec: ModelSpec, images, chunk_size: int = 512) -> torch.Tensor:
    """Argmax labels; ties resolve to the lowest class index."""
    out = []
    with torch.no_grad():
        for start in range(0, len(images), chunk_size):
            out.append(forward(params, spec, images[start:start + chunk_size]).argmax(dim=1))
    return torch.cat(out)


def evaluate(params, spec: ModelSpec, images, labels, attacks=(), chunk_size: int = 512,
             seed: int = 0) -> dict:
    """Standard accuracy plus one adversarial accuracy per named attack.

    Random starts are drawn once for the whole test set, so results do not
    depend on ``chunk_size``.
    """
    x = check_images(images, shape=spec.input_shape)
    y = check_labels(labels, spec.num_classes, len(x))
    if len(x) == 0:
        raise EvalError("empty test set")
    x = x.to(params.values.dtype if isinstance(params, ParamVector) else params.dtype)
    metrics = {"standard_acc": float((predict(params, spec, x, chunk_size) == y).double().mean()),
               "n_test": len(y)}
    gen = torch.Generator().manual_seed(int(seed))
    for name, cfg in attacks:
        noise = 2 * torch.rand(x.shape, generator=gen, dtype=x.dtype) - 1
        correct = 0
        for start in range(0, len(x), chunk_size):
            sl = slice(start, start + chunk_size)
            x_adv = attack(params, spec, x[sl], y[sl], cfg, init_noise=noise[sl])
            correct += int((predict(params, spec, x_adv, chunk_size) == y[sl]).sum())
        metrics[f"adv_acc/{name}"] = correct / len(y)
    return metrics


@dataclass
class EvalReport:
    per_seed: list
    aggregate: dict
    provenance: dict

    def metric_names(self) -> list:
        return [k for k in self.per_seed[0] if k not in ("seed", "n_test")]

    def to_dict(self) -> dict:
        return {"per_seed": self.per_seed, "aggregate": self.aggregate,
                "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["per_seed"], d["aggregate"], d["provenance"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["seed", "metric", "value"])
        for rec in self.per_seed:
            for name in self.metric_names():
                writer.writerow([rec["seed"], name, repr(float(rec[name]))])
        return buf.getvalue()

    def write(self, directory, digest: str) -> tuple:
        directory = Path(directory)
        stem = f"report-{digest[:16]}"
        json_path, csv_path = directory / f"{stem}.json", directory / f"{stem}.csv"
        atomic_write(json_path, self.to_json().encode())
        atomic_write(csv_path, self.to_csv().encode())
        return json_path, csv_path


def aggregate(per_seed: list) -> dict:
    """Mean and population std of every metric; records are reduced in seed order."""
    if not per_seed:
        raise EvalError("no per-seed records to aggregate")
    names = [k for k in per_seed[0] if k not in ("seed", "n_test")]
    out = {}
    for name in names:
        values = np.array([rec[name] for rec in per_seed], dtype=np.float64)
        out[name] = {"mean": float(values.mean()), "std": float(values.std(ddof=0))}
    return out


def eval_one_seed(images, labels, test_images, test_labels, cfg: EvalConfig, seed: int,
                  eval_seed: int = 0) -> dict:
    """Train one fresh model on the synthetic set and evaluate it."""
    try:
        params = natural_train(images, labels, cfg, seed)
        metrics = evaluate(params, cfg.spec, test_images, test_labels, cfg.attacks,
                           cfg.chunk_size, seed=eval_seed)
    except Exception as exc:
        raise EvalError(f"evaluation failed for seed {seed}: {exc}") from exc
    logger.info("seed %s: %s", seed, metrics)
    return {"seed": int(seed), **metrics}


def run_eval(images, labels, test_images, test_labels, cfg: EvalConfig, *,
             synthetic_digest: str = "", extra_provenance: Optional[dict] = None,
             eval_seed: int = 0, mapper=map) -> EvalReport:
    """Train one fresh model per seed on the synthetic set and evaluate each.

    ``mapper`` may be an executor's ``map`` to run seeds in parallel; records
    are always aggregated in seed order.
    """
    n = len(cfg.seeds)
    per_seed = list(mapper(eval_one_seed, [images] * n, [labels] * n, [test_images] * n,
                           [test_labels] * n, [cfg] * n, list(cfg.seeds), [eval_seed] * n))
    provenance = {"synthetic_digest": synthetic_digest, "eval": cfg.to_dict(),
                  "std_kind": "population", "argmax_tie_break": "lowest-index",
                  "training": "natural-sgd-momentum", "eval_seed": int(eval_seed)}
    provenance.update(extra_provenance or {})
    return EvalReport(per_seed, aggregate(per_seed), provenance)
