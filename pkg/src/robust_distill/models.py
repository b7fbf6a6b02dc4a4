"""Model family used by every stage: ConvNetD blocks and a small MLP.

Models are purely functional. Parameters live in one flat vector
(:class:`ParamVector`) and :func:`forward` slices views out of it, so
gradients can flow through whole sequences of parameter updates.

Flat layout (fixed, used by every file format):

* convnet: per block ``conv{i}.weight`` (out, in, 3, 3), ``conv{i}.bias``,
  then ``norm{i}.weight`` (scale) and ``norm{i}.bias`` (shift) when the norm
  is affine; finally ``fc.weight`` (classes, features) and ``fc.bias``.
* mlp: ``fc{i}.weight`` (out, in) then ``fc{i}.bias`` for every layer.

Sums inside conv/linear kernels are left to torch; results are bit-stable
for a fixed thread count and batch.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

NORM_EPS = 1e-5

_NORM_TAGS = {"instance-affine": "ia", "none": "none"}
_NORM_FROM_TAG = {v: k for k, v in _NORM_TAGS.items()}


class SpecError(ValueError):
    """Invalid model specification or parameter/spec mismatch."""


@dataclass(frozen=True)
class ModelSpec:
    family: str = "convnet"
    depth: int = 3
    width: int = 128
    input_shape: tuple = (32, 32, 3)
    num_classes: int = 10
    norm: str = "instance-affine"
    hidden_sizes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        self.validate()

    @classmethod
    def convnet(cls, depth=3, width=128, input_shape=(32, 32, 3), num_classes=10,
                norm="instance-affine"):
        return cls("convnet", depth, width, input_shape, num_classes, norm)

    @classmethod
    def mlp(cls, input_shape, hidden_sizes, num_classes):
        if isinstance(input_shape, int):
            input_shape = (input_shape,)
        return cls("mlp", 0, 0, input_shape, num_classes, "none", tuple(hidden_sizes))

    def validate(self):
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(d <= 0 for d in self.input_shape) or not self.input_shape:
            raise SpecError(f"bad input_shape {self.input_shape}")
        if self.family == "convnet":
            if len(self.input_shape) != 3:
                raise SpecError("convnet input_shape must be (height, width, channels)")
            if self.depth < 1:
                raise SpecError(f"convnet depth must be >= 1, got {self.depth}")
            if self.width <= 0:
                raise SpecError(f"convnet width must be > 0, got {self.width}")
            if self.norm not in _NORM_TAGS:
                raise SpecError(f"unknown norm {self.norm!r}")
            h, w, _ = self.input_shape
            for block in range(1, self.depth + 1):
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise SpecError(
                        f"depth={self.depth} exhausts spatial dims of "
                        f"{self.input_shape[0]}x{self.input_shape[1]} at block {block}"
                    )
        elif self.family == "mlp":
            if any(h <= 0 for h in self.hidden_sizes):
                raise SpecError(f"hidden sizes must be positive: {self.hidden_sizes}")
        else:
            raise SpecError(f"unknown model family {self.family!r}")

    # -- canonical text form -------------------------------------------------

    def to_string(self) -> str:
        shape = "x".join(str(d) for d in self.input_shape)
        if self.family == "convnet":
            return (f"convnet:d={self.depth},w={self.width},in={shape},"
                    f"c={self.num_classes},norm={_NORM_TAGS[self.norm]}")
        hidden = "-".join(str(h) for h in self.hidden_sizes)
        return f"mlp:in={shape},h={hidden},c={self.num_classes}"

    @classmethod
    def from_string(cls, text: str) -> "ModelSpec":
        try:
            family, _, rest = text.strip().partition(":")
            fields = dict(kv.split("=", 1) for kv in rest.split(","))
            shape = tuple(int(d) for d in fields["in"].split("x"))
            classes = int(fields["c"])
            if family == "convnet":
                return cls.convnet(int(fields["d"]), int(fields["w"]), shape, classes,
                                   _NORM_FROM_TAG[fields["norm"]])
            if family == "mlp":
                hidden = [int(h) for h in fields["h"].split("-") if h]
                return cls.mlp(shape, hidden, classes)
        except (KeyError, ValueError) as exc:
            raise SpecError(f"cannot parse model spec {text!r}: {exc}") from exc
        raise SpecError(f"unknown model family in {text!r}")

    def __str__(self):
        return self.to_string()

    @property
    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_string().encode()).hexdigest()[:16]

    # -- layout ---------------------------------------------------------------

    @property
    def in_features(self) -> int:
        return math.prod(self.input_shape)

    def param_shapes(self) -> "OrderedDict[str, tuple]":
        shapes = OrderedDict()
        if self.family == "convnet":
            h, w, c_in = self.input_shape
            for i in range(self.depth):
                shapes[f"conv{i}.weight"] = (self.width, c_in, 3, 3)
                shapes[f"conv{i}.bias"] = (self.width,)
                if self.norm == "instance-affine":
                    shapes[f"norm{i}.weight"] = (self.width,)
                    shapes[f"norm{i}.bias"] = (self.width,)
                c_in = self.width
                h, w = h // 2, w // 2
            shapes["fc.weight"] = (self.num_classes, self.width * h * w)
            shapes["fc.bias"] = (self.num_classes,)
        else:
            sizes = [self.in_features, *self.hidden_sizes, self.num_classes]
            for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                shapes[f"fc{i}.weight"] = (n_out, n_in)
                shapes[f"fc{i}.bias"] = (n_out,)
        return shapes

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())


@dataclass
class ParamVector:
    """Flat parameter vector tagged with the hash of the spec it belongs to."""

    values: torch.Tensor
    spec_hash: str = field(default="")

    def __post_init__(self):
        if self.values.dim() != 1:
            raise SpecError("ParamVector values must be 1-D")

    def __len__(self):
        return self.values.numel()

    def detach(self) -> "ParamVector":
        return ParamVector(self.values.detach().clone(), self.spec_hash)

    def to(self, dtype) -> "ParamVector":
        return ParamVector(self.values.to(dtype), self.spec_hash)

    def check(self, spec: ModelSpec):
        if self.spec_hash != spec.spec_hash:
            raise SpecError(
                f"param vector built for spec {self.spec_hash}, got {spec.spec_hash} ({spec})"
            )
        if len(self) != spec.num_params:
            raise SpecError(f"param vector length {len(self)} != {spec.num_params} for {spec}")


def _fan_in(shape: Sequence[int]) -> int:
    return math.prod(shape[1:])


def init_model(spec: ModelSpec, seed: int, dtype=torch.float32) -> ParamVector:
    """Deterministic fan-in scaled uniform init; norm scale 1, shift 0."""
    spec.validate()
    gen = torch.Generator().manual_seed(int(seed))
    parts = []
    shapes = spec.param_shapes()
    fan = 1
    for name, shape in shapes.items():
        if name.startswith("norm"):
            fill = 1.0 if name.endswith("weight") else 0.0
            parts.append(torch.full(shape, fill, dtype=torch.float64).reshape(-1))
            continue
        if name.endswith("weight"):
            fan = _fan_in(shape)
        bound = 1.0 / math.sqrt(fan)
        u = torch.rand(math.prod(shape), generator=gen, dtype=torch.float64)
        parts.append((2.0 * u - 1.0) * bound)
    return ParamVector(torch.cat(parts).to(dtype), spec.spec_hash)


def flatten(params: "OrderedDict[str, torch.Tensor]", spec: ModelSpec) -> ParamVector:
    shapes = spec.param_shapes()
    if list(params) != list(shapes):
        raise SpecError(f"parameter names {list(params)} do not match layout {list(shapes)}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise SpecError(f"{name}: shape {tuple(params[name].shape)} != {shape}")
    return ParamVector(torch.cat([p.reshape(-1) for p in params.values()]), spec.spec_hash)


def unflatten(vec, spec: ModelSpec) -> "OrderedDict[str, torch.Tensor]":
    """Split a flat vector into named views (no copy, gradients flow)."""
    values = vec.values if isinstance(vec, ParamVector) else vec
    if isinstance(vec, ParamVector):
        vec.check(spec)
    elif values.numel() != spec.num_params:
        raise SpecError(f"vector length {values.numel()} != {spec.num_params} for {spec}")
    out = OrderedDict()
    offset = 0
    for name, shape in spec.param_shapes().items():
        n = math.prod(shape)
        out[name] = values[offset:offset + n].view(shape)
        offset += n
    return out


def instance_norm(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Per-sample, per-channel normalization over spatial dims (biased variance)."""
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(2, 3), keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def forward(params, spec: ModelSpec, batch: torch.Tensor) -> torch.Tensor:
    """Logits for a batch of shape (B, *input_shape); images are channels-last."""
    p = unflatten(params, spec)
    values = params.values if isinstance(params, ParamVector) else params
    if tuple(batch.shape[1:]) != spec.input_shape:
        raise SpecError(f"batch shape {tuple(batch.shape)} does not match input {spec.input_shape}")
    x = batch.to(values.dtype)
    if spec.family == "mlp":
        h = x.reshape(x.shape[0], -1)
        n_layers = len(spec.hidden_sizes) + 1
        for i in range(n_layers):
            h = F.linear(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
            if i < n_layers - 1:
                h = F.relu(h)
        return h
    h = x.permute(0, 3, 1, 2)
    for i in range(spec.depth):
        h = F.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=1)
        if spec.norm == "instance-affine":
            h = instance_norm(h)
            h = h * p[f"norm{i}.weight"].view(1, -1, 1, 1) + p[f"norm{i}.bias"].view(1, -1, 1, 1)
        h = F.relu(h)
        h = F.avg_pool2d(h, 2)
    return F.linear(h.reshape(h.shape[0], -1), p["fc.weight"], p["fc.bias"])
