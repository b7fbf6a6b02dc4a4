"""Command-line pipeline: gen-data, import, buffer, distill, eval, diagnose, sweep.

Every subcommand reads one JSON run config (``--config``) plus ``--set
section.key=value`` overrides, writes the effective config next to its
outputs, and on failure prints a single ``error: <category>: <message>`` line.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import torch

from . import config as rc
from .data import gen_blobs, import_directory, load_raw, save_raw
from .distiller import (DegenerateSegmentError, StudentDivergedError, distill, init_synthetic,
                        load_synthetic, save_synthetic)
from .evaluation import EvalError, run_eval
from .expert import (TrainingDivergedError, load_buffer, save_buffer, train_expert,
                     weight_variance_rows)
from .fileio import atomic_write, dump_meta, sha256_bytes
from .models import ModelSpec, SpecError

logger = logging.getLogger("robust_distill")

STATS_COLUMNS = ["iter", "loss", "t", "n_star", "buffer_id", "inner_lr"]


class ProvenanceError(ValueError):
    category = "provenance-mismatch"


def _category(exc: BaseException) -> str:
    if hasattr(exc, "category"):
        return exc.category
    for kind, name in ((TrainingDivergedError, "diverged"), (StudentDivergedError, "diverged"),
                       (DegenerateSegmentError, "degenerate-segment"), (SpecError, "invalid-spec"),
                       (EvalError, "eval-failed"), (FileNotFoundError, "not-found"),
                       (OSError, "io"), (ValueError, "invalid-input")):
        if isinstance(exc, kind):
            return name
    return "internal"


def _write_config(path: Path, cfg: dict):
    atomic_write(path, rc.dump_config(cfg).encode())


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def _executor(jobs: int):
    return ProcessPoolExecutor(max_workers=jobs, mp_context=get_context("spawn"),
                               initializer=torch.set_num_threads, initargs=(1,))


# -- gen-data / import --------------------------------------------------------

def cmd_gen_data(args, cfg):
    d = cfg["data"]
    seed = rc.stage_seed(cfg["seed"], "data")
    train, test = gen_blobs(d["num_classes"], d["per_class"], d["height"], d["width"],
                            rc.parse_number(d["sigma"], "data.sigma"), seed,
                            channels=d["channels"],
                            test_per_class=None if d["test_per_class"] is None else int(d["test_per_class"]),
                            amplitude=rc.parse_number(d["amplitude"], "data.amplitude"),
                            background=rc.parse_number(d["background"], "data.background"),
                            bump_width=d["bump_width"],
                            texture=rc.parse_number(d["texture"], "data.texture"),
                            bump_flip=rc.parse_number(d["bump_flip"], "data.bump_flip"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ds in (train, test):
        ds.meta = dict(ds.meta, run_config=cfg, command="gen-data")
        save_raw(ds, out / f"{ds.split}.matx")
    _write_config(out / "config.json", cfg)
    print(f"{out / 'train.matx'} {train.digest[:16]}")
    print(f"{out / 'test.matx'} {test.digest[:16]}")


def cmd_import(args, cfg):
    ds = import_directory(args.source, args.split)
    ds.meta = dict(ds.meta, run_config=cfg, command="import")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_raw(ds, out)
    _write_config(_sidecar(out, ".config.json"), cfg)
    print(f"{out} {len(ds)} images {ds.digest[:16]}")


# -- buffer --------------------------------------------------------------------

def _expert_job(images, labels, spec_string, cfg, k, data_digest):
    """Train (or fetch from cache) expert ``k``; top level so it can run in a worker."""
    b = cfg["buffer"]
    spec = ModelSpec.from_string(spec_string)
    seed = rc.stage_seed(cfg["seed"], f"buffer/{k}")
    recipe = {"model": spec_string, "data": data_digest, "attack": cfg["attack"],
              "buffer": {key: v for key, v in b.items() if key != "num_experts"}, "seed": seed}
    cache_dir = cfg["paths"]["cache_dir"] or os.environ.get("MAT_CACHE_DIR")
    cache_path = None
    if cache_dir:
        cache_path = Path(cache_dir) / f"{sha256_bytes(dump_meta(recipe))[:24]}.matb"
        if cache_path.exists():
            logger.info("expert %d: cache hit %s", k, cache_path)
            buf = load_buffer(cache_path)
            if buf.content_digest != buf.meta.get("content_digest"):
                raise ProvenanceError(f"{cache_path}: cached buffer fails its content digest")
            return buf
    buf = train_expert(images, labels, spec, rc.build_variant(cfg), rc.build_attack(cfg["attack"]),
                       ema_decay=rc.parse_number(b["ema_decay"], "buffer.ema_decay"),
                       outer_lr=rc.parse_number(b["outer_lr"], "buffer.outer_lr"),
                       epochs=b["epochs"], batch_size=b["batch_size"], seed=seed,
                       momentum=rc.parse_number(b["momentum"], "buffer.momentum"),
                       keep_raw=b["keep_raw"], dataset_digest=data_digest)
    buf.meta.update(stage=f"buffer/{k}", recipe=recipe, content_digest=buf.content_digest)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        save_buffer(buf, cache_path)
    return buf


def run_buffers(data_path, out_dir: Path, cfg, jobs: int = 1) -> list:
    train = load_raw(data_path)
    spec = rc.build_spec(cfg, train.image_shape, train.num_classes)
    n = cfg["buffer"]["num_experts"]
    if n < 1:
        raise rc.ConfigError("buffer.num_experts must be >= 1")
    args = ([train.images] * n, [train.labels] * n, [spec.to_string()] * n, [cfg] * n,
            list(range(n)), [train.digest] * n)
    if jobs > 1:
        with _executor(jobs) as pool:
            buffers = list(pool.map(_expert_job, *args))
    else:
        buffers = list(map(_expert_job, *args))
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, buf in enumerate(buffers):
        buf.meta["run_config"] = cfg
        path = out_dir / f"expert-{k:03d}.matb"
        save_buffer(buf, path)
        paths.append(path)
    _write_config(out_dir / "config.json", cfg)
    return paths


def cmd_buffer(args, cfg):
    for path in run_buffers(args.data, Path(args.out), cfg, args.jobs):
        print(path)


# -- distill -------------------------------------------------------------------

def _buffer_paths(items) -> list:
    paths = []
    for item in items:
        p = Path(item)
        paths.extend(sorted(p.glob("*.matb")) if p.is_dir() else [p])
    if not paths:
        raise FileNotFoundError(f"no .matb buffers found in {list(items)}")
    return paths


def verify_buffers(buffers, paths, data_digest=None):
    for path, buf in zip(paths, buffers):
        recorded = buf.meta.get("content_digest")
        if recorded is None or recorded != buf.content_digest:
            raise ProvenanceError(f"{path}: snapshot payload does not match its recorded digest")
        if data_digest is not None and buf.meta.get("dataset_digest") != data_digest:
            raise ProvenanceError(f"{path}: buffer was trained on a different dataset")


def run_distill(data_path, buffer_items, out: Path, cfg, verify: bool = False):
    train = load_raw(data_path)
    paths = _buffer_paths(buffer_items)
    buffers = [load_buffer(p) for p in paths]
    if verify:
        verify_buffers(buffers, paths, train.digest)
    d = cfg["distill"]
    match = rc.build_match(cfg)
    S = init_synthetic(train.images, train.labels, train.num_classes, d["ipc"], d["init"],
                       seed=rc.stage_seed(cfg["seed"], "distill/init"),
                       inner_lr=rc.parse_number(d["inner_lr"], "distill.inner_lr"))
    out.parent.mkdir(parents=True, exist_ok=True)
    stats_path = _sidecar(out, ".stats.csv")
    with open(stats_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STATS_COLUMNS)

        def log_row(stats):
            writer.writerow([stats["iter"], repr(float(stats["loss"])), stats["t"],
                             stats["n_star"], stats["buffer_id"], repr(float(stats["inner_lr"]))])

        S, _ = distill(S, buffers, match, seed=rc.stage_seed(cfg["seed"], "distill"),
                       callback=log_row)
    S.meta.update(run_config=cfg, command="distill", dataset_digest=train.digest,
                  init=d["init"], buffer_files=[p.name for p in paths],
                  content_digest=S.content_digest)
    save_synthetic(S, out)
    _write_config(_sidecar(out, ".config.json"), cfg)
    return S


def cmd_distill(args, cfg):
    S = run_distill(args.data, args.buffers, Path(args.out), cfg, args.verify_provenance)
    print(f"{args.out} {S.digest[:16]} inner_lr={S.inner_lr!r}")


# -- eval ----------------------------------------------------------------------

def verify_synthetic(S, path, buffer_items=None):
    if S.meta.get("content_digest") != S.content_digest:
        raise ProvenanceError(f"{path}: synthetic payload does not match its recorded digest")
    if buffer_items:
        digests = [load_buffer(p).digest for p in _buffer_paths(buffer_items)]
        if digests != S.meta.get("buffer_digests"):
            raise ProvenanceError(f"{path}: distilled from a different set of buffers")


def run_evaluation(synthetic_path, test_path, out_dir: Path, cfg, jobs: int = 1,
                   verify: bool = False, buffer_items=None):
    S = load_synthetic(synthetic_path)
    if verify:
        verify_synthetic(S, synthetic_path, buffer_items)
    test = load_raw(test_path)
    spec = (ModelSpec.from_string(S.meta["model"]) if "model" in S.meta
            else rc.build_spec(cfg, test.image_shape, test.num_classes))
    ecfg = rc.build_eval(cfg, spec)
    extra = {"run_config": cfg, "command": "eval", "test_digest": test.digest,
             "synthetic_file": Path(synthetic_path).name}
    eval_seed = rc.stage_seed(cfg["seed"], "eval/attack")
    if jobs > 1:
        with _executor(jobs) as pool:
            report = run_eval(S.images, S.labels, test.images, test.labels, ecfg,
                              synthetic_digest=S.digest, extra_provenance=extra,
                              eval_seed=eval_seed, mapper=pool.map)
    else:
        report = run_eval(S.images, S.labels, test.images, test.labels, ecfg,
                          synthetic_digest=S.digest, extra_provenance=extra, eval_seed=eval_seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = report.write(out_dir, S.digest)
    _write_config(json_path.with_suffix(".config.json"), cfg)
    return report, json_path, csv_path


def cmd_eval(args, cfg):
    report, json_path, _ = run_evaluation(args.synthetic, args.test, Path(args.out), cfg,
                                          args.jobs, args.verify_provenance, args.buffers)
    print(json_path)
    for name, stats in report.aggregate.items():
        print(f"{name} mean={stats['mean']:.4f} std={stats['std']:.4f}")


# -- diagnose ------------------------------------------------------------------

def cmd_diagnose(args, cfg):
    buf = load_buffer(args.buffer)
    if args.verify_provenance:
        verify_buffers([buf], [args.buffer])
    tracks = ("ema",) if buf.raw is None else ("ema", "raw")
    rows = weight_variance_rows(buf, tracks)
    lines = ["epoch,delta_norm,track"] + [f"{e},{d!r},{t}" for e, d, t in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        atomic_write(out, text.encode())
        _write_config(_sidecar(out, ".config.json"), cfg)
    else:
        sys.stdout.write(text)


# -- sweep ---------------------------------------------------------------------

def _grid_name(decay, epsilon) -> str:
    eps = str(epsilon).replace("/", "-")
    return f"ema{decay}_eps{eps}"


def cmd_sweep(args, cfg):
    stages = args.stages.split(",") if args.stages else list(cfg["sweep"]["stages"])
    unknown = set(stages) - {"buffer", "distill", "eval"}
    if unknown:
        raise rc.ConfigError(f"unknown sweep stages {sorted(unknown)}")
    if "eval" in stages and not args.test:
        raise rc.ConfigError("sweep stage eval needs --test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for decay in cfg["sweep"]["ema_decays"]:
        for epsilon in cfg["sweep"]["epsilons"]:
            run_cfg = rc.with_overrides(cfg, {"buffer": {"ema_decay": decay},
                                              "attack": {"epsilon": epsilon}})
            run_dir = out / _grid_name(decay, epsilon)
            buffers_dir = run_dir / "buffers"
            if "buffer" in stages:
                run_buffers(args.data, buffers_dir, run_cfg, args.jobs)
            if "distill" in stages:
                run_distill(args.data, [buffers_dir], run_dir / "synthetic.mats", run_cfg)
            if "eval" in stages:
                run_evaluation(run_dir / "synthetic.mats", args.test,
                               run_dir / "reports", run_cfg, args.jobs)
            _write_config(run_dir / "config.json", run_cfg)
            print(run_dir)
    _write_config(out / "config.json", cfg)


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (JSON-parsed; repeatable)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (1 = bit-exact)")
    common.add_argument("--verify-provenance", action="store_true",
                        help="re-derive digests of input artifacts and fail on mismatch")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="robust-distill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write blobs train/test MATX files")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("import", parents=[common], help="convert per-class .npy tensors to MATX")
    p.add_argument("source", help="directory with <class>/*.npy or <class>.npy")
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--out", required=True, help="output .matx file")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("buffer", parents=[common], help="train expert trajectories")
    p.add_argument("--data", required=True, help="training MATX file")
    p.add_argument("--out", required=True, help="output directory for MATB buffers")
    p.set_defaults(func=cmd_buffer)

    p = sub.add_parser("distill", parents=[common], help="distill a synthetic set")
    p.add_argument("--data", required=True, help="training MATX file")
    p.add_argument("--buffers", nargs="+", required=True, help="MATB files or directories")
    p.add_argument("--out", required=True, help="output .mats file")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="natural-train on a synthetic set and attack")
    p.add_argument("--synthetic", required=True, help="MATS file")
    p.add_argument("--test", required=True, help="test MATX file")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--buffers", nargs="*", help="buffers to check against (--verify-provenance)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", parents=[common], help="per-epoch weight step norms as CSV")
    p.add_argument("buffer", help="MATB file")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", parents=[common], help="grid over ema_decay and epsilon")
    p.add_argument("--data", required=True, help="training MATX file")
    p.add_argument("--test", help="test MATX file (for the eval stage)")
    p.add_argument("--out", required=True, help="sweep root directory")
    p.add_argument("--stages", help="comma list from buffer,distill,eval (default: config)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    if args.jobs == 1:
        torch.set_num_threads(1)
    try:
        cfg = rc.load_config(args.config, args.set)
        args.func(args, cfg)
    except Exception as exc:  # report every failure as one parsable line
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {_category(exc)}: {message}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return 2 if isinstance(exc, rc.ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
