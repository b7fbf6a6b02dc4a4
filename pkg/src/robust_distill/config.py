"""Run configuration: one sectioned JSON document drives every pipeline stage.

Values may be overridden with ``section.key=value`` strings whose right-hand
side is parsed as JSON (bare words fall back to strings). Numeric fields also
accept fractions written as ``"a/b"`` so attack radii read naturally.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from pathlib import Path

from .attacks import AttackConfig
from .distiller import MatchConfig
from .evaluation import EvalConfig
from .expert import ATLossVariant
from .models import ModelSpec

DEFAULTS = {
    "seed": 0,
    "data": {
        "num_classes": 2, "per_class": 100, "test_per_class": None, "height": 8, "width": 8,
        "channels": 1, "sigma": 0.05, "amplitude": 0.6, "background": 0.2,
        "bump_width": None, "texture": 0.0, "bump_flip": 0.0,
    },
    "model": {"family": "convnet", "depth": 3, "width": 128, "norm": "instance-affine",
              "hidden_sizes": []},
    "attack": {"epsilon": "4/255", "steps": 10, "step_size": None, "random_start": True},
    "buffer": {"variant": "pgd-at", "beta": 6.0, "ema_decay": 0.999, "outer_lr": 0.01,
               "momentum": 0.0, "epochs": 20, "batch_size": 256, "num_experts": 10,
               "keep_raw": True},
    "distill": {"ipc": 10, "init": "real", "inner_lr": 0.01, "max_start_epoch": 10,
                "target_offset": 2, "max_student_steps": 20, "student_batch": 256,
                "syn_lr": 100.0, "lr_lr": 1e-5, "iterations": 500, "degenerate_eps": 1e-12,
                "image_momentum": 0.5, "max_retries": 10, "start_track": "ema",
                "target_track": "ema"},
    "eval": {"epochs": 500, "lr": 0.01, "momentum": 0.9, "num_seeds": 5, "batch_size": 256,
             "chunk_size": 512,
             "attacks": [
                 {"name": "pgd10", "epsilon": "4/255", "steps": 10},
                 {"name": "fgsm", "epsilon": "4/255", "steps": 1, "step_size": "4/255",
                  "random_start": False},
             ]},
    "paths": {"cache_dir": None},
    "sweep": {"ema_decays": [0.99, 0.999, 0.9999],
              "epsilons": ["2/255", "4/255", "6/255", "8/255"],
              "stages": ["buffer"]},
}

# Keys whose default is None but which hold numbers when set.
_OPTIONAL_NUMBERS = {("data", "test_per_class"), ("data", "bump_width"),
                     ("attack", "step_size")}
_FRACTION = re.compile(r"^\s*([0-9.eE+-]+)\s*/\s*([0-9.eE+-]+)\s*$")


class ConfigError(ValueError):
    category = "config"


def parse_number(value, where: str = "value") -> float:
    """Accept ints, floats and ``"a/b"`` strings."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        m = _FRACTION.match(value)
        try:
            return float(m.group(1)) / float(m.group(2)) if m else float(value)
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"{where}: expected a number or fraction, got {value!r}")


def _check_value(section, key, value, default):
    where = f"{section}.{key}"
    if (section, key) in _OPTIONAL_NUMBERS:
        return None if value is None else parse_number(value, where)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or (section, key) == ("attack", "epsilon"):
        parse_number(value, where)
        return value  # kept as written, so fractions echo verbatim
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


def _merge(base: dict, doc: dict, origin: str) -> dict:
    out = copy.deepcopy(base)
    for section, body in doc.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{origin}: unknown section {section!r}")
        if section == "seed":
            out["seed"] = _check_value("seed", "seed", body, 0)
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{origin}: section {section!r} must be an object")
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            out[section][key] = _check_value(section, key, value, DEFAULTS[section][key])
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` (or ``seed=value``) as a one-entry config document."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = path.strip().split(".")
    if parts == ["seed"]:
        return {"seed": value}
    if len(parts) != 2:
        raise ConfigError(f"override key {path!r} must be section.key")
    return {parts[0]: {parts[1]: value}}


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, doc, str(path))
    for text in overrides:
        cfg = _merge(cfg, parse_override(text), f"--set {text}")
    return cfg


def with_overrides(cfg: dict, doc: dict) -> dict:
    return _merge(cfg, doc, "override")


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def stage_seed(root_seed: int, stage: str) -> int:
    """Seed for one stage: first 31 bits of sha256("<root>/<stage>")."""
    digest = hashlib.sha256(f"{int(root_seed)}/{stage}".encode()).hexdigest()
    return int(digest[:8], 16) & 0x7FFFFFFF


# Builders from the document to the typed configs used by the library.

def build_attack(body: dict) -> AttackConfig:
    step = body.get("step_size")
    return AttackConfig(epsilon=parse_number(body["epsilon"], "attack.epsilon"),
                        steps=int(body.get("steps", 10)),
                        step_size=None if step is None else parse_number(step, "attack.step_size"),
                        random_start=bool(body.get("random_start", True)))


def build_spec(cfg: dict, input_shape, num_classes: int) -> ModelSpec:
    m = cfg["model"]
    if m["family"] == "mlp":
        return ModelSpec.mlp(tuple(input_shape), list(m["hidden_sizes"]), num_classes)
    if m["family"] == "convnet":
        return ModelSpec.convnet(m["depth"], m["width"], tuple(input_shape), num_classes, m["norm"])
    raise ConfigError(f"model.family must be convnet or mlp, got {m['family']!r}")


def build_variant(cfg: dict) -> ATLossVariant:
    b = cfg["buffer"]
    return ATLossVariant(b["variant"], parse_number(b["beta"], "buffer.beta"))


def build_match(cfg: dict) -> MatchConfig:
    d = cfg["distill"]
    keys = ("max_start_epoch", "target_offset", "max_student_steps", "student_batch",
            "iterations", "max_retries", "start_track", "target_track")
    reals = ("syn_lr", "lr_lr", "degenerate_eps", "image_momentum")
    kwargs = {k: d[k] for k in keys}
    kwargs.update({k: parse_number(d[k], f"distill.{k}") for k in reals})
    return MatchConfig(**kwargs)


def build_eval(cfg: dict, spec: ModelSpec) -> EvalConfig:
    e = cfg["eval"]
    attacks = []
    for i, body in enumerate(e["attacks"]):
        if not isinstance(body, dict) or "name" not in body or "epsilon" not in body:
            raise ConfigError(f"eval.attacks[{i}] needs at least name and epsilon")
        unknown = set(body) - {"name", "epsilon", "steps", "step_size", "random_start"}
        if unknown:
            raise ConfigError(f"eval.attacks[{i}]: unknown keys {sorted(unknown)}")
        attacks.append((body["name"], build_attack(body)))
    if e["num_seeds"] < 1:
        raise ConfigError("eval.num_seeds must be >= 1")
    seeds = [stage_seed(cfg["seed"], f"eval/{k}") for k in range(e["num_seeds"])]
    return EvalConfig(spec, epochs=e["epochs"], lr=parse_number(e["lr"], "eval.lr"),
                      momentum=parse_number(e["momentum"], "eval.momentum"), seeds=seeds,
                      attacks=attacks, batch_size=e["batch_size"], chunk_size=e["chunk_size"])
