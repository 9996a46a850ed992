"""Command-line entry point: ``egomtl synth|train|eval|predict --config PATH``.

``MTL_THREADS`` caps the BLAS thread pool (default 1, fully deterministic).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from egomtl import __version__, kernels
from egomtl.config import RunConfig, load_config
from egomtl.dsnt import dsnt, normalize_heatmap
from egomtl.errors import ConfigurationError, EgoMTLError, FormatError, NonFiniteLossError
from egomtl.model import TaskSet, build_model, class_activation_map
from egomtl.serialization import load_checkpoint, read_clip, save_checkpoint, write_pgm
from egomtl.synthdata import generate_dataset, load_dataset, save_dataset
from egomtl.trainer import (EvalOptions, augment, evaluate, fit, sample_eval_clip, train_class_counts)

logger = logging.getLogger("egomtl")

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_NONFINITE = 3


def _write_manifest(out: Path, command: str, cfg: RunConfig, extra: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "seed": cfg.seed,
        "config_sha256": cfg.digest,
        "config": cfg.text,
    }
    manifest.update(extra or {})
    (out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                   encoding="utf-8")


def _out_dir(cfg: RunConfig, override: Optional[str]) -> Path:
    out = Path(override) if override else cfg.out_dir
    if out is None:
        raise ConfigurationError("no output directory: pass --out or set [run] out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigurationError(f"output directory {out} is not writable")
    return out


def _dataset_dir(cfg: RunConfig) -> Path:
    if cfg.dataset_dir is None or not (cfg.dataset_dir / "index.jsonl").is_file():
        raise ConfigurationError(f"dataset {cfg.dataset_dir} does not exist (run `egomtl synth` first)")
    return cfg.dataset_dir


def _checkpoint_tasks(state: dict) -> list[str]:
    seen = []
    for k in state:
        if k.startswith("head/"):
            name = k.split("/")[1]
            if name not in seen:
                seen.append(name)
    return seen


def _model_from_checkpoint(cfg: RunConfig, path: Path, num_classes: tuple[int, int, int]):
    if not Path(path).is_file():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    state, _ = load_checkpoint(path)
    task_set = cfg.task_set(*num_classes)
    stored = _checkpoint_tasks(state)
    if sorted(stored) != sorted(task_set.names):
        raise ConfigurationError(f"checkpoint has tasks {stored}, config requests {task_set.names}")
    model = build_model(cfg.arch, task_set, cfg.train.seed)
    model.load_state_dict(state)
    return model, state


def cmd_synth(cfg: RunConfig, out: Optional[str]) -> Path:
    root = Path(out) if out else cfg.dataset_dir
    if root is None:
        raise ConfigurationError("no dataset directory: pass --out or set [run] dataset")
    root = _out_dir(cfg, str(root))
    ds = generate_dataset(cfg.synth)
    save_dataset(ds, root)
    _write_manifest(root, "synth", cfg, {"synth_config_hash": cfg.synth.digest(),
                                         "splits": {k: len(v) for k, v in ds.splits.items()}})
    logger.info("wrote %d clips to %s", len(ds.samples), root)
    return root


def cmd_train(cfg: RunConfig, out: Optional[str]) -> Path:
    ds = load_dataset(_dataset_dir(cfg))
    run_dir = _out_dir(cfg, out)
    task_set = cfg.task_set(ds.config.num_actions, ds.config.num_verbs, ds.config.num_nouns)
    model = build_model(cfg.arch, task_set, cfg.train.seed)
    opts = EvalOptions(cfg.fov_deg, cfg.many_hot_threshold, train_class_counts(ds.split("train")), ds.pair_table)
    log_path = run_dir / "train_log.jsonl"
    _write_manifest(run_dir, "train", cfg, {"tasks": task_set.names})
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        result = fit(model, ds, cfg.train, cfg.coord, opts, on_record)
    meta = {"meta/epoch": np.float32(result.best_epoch), "meta/val_top1": np.float32(result.best_metric)}
    save_checkpoint(run_dir / "best.mtlw", {**result.best_state, **meta}, result.best_velocity)
    (run_dir / "best.json").write_text(json.dumps({"epoch": result.best_epoch, "val_top1": result.best_metric},
                                                  sort_keys=True) + "\n", encoding="utf-8")
    return run_dir


def cmd_eval(cfg: RunConfig, out: Optional[str], checkpoint: str, split: str):
    ds = load_dataset(_dataset_dir(cfg))
    run_dir = _out_dir(cfg, out)
    model, _ = _model_from_checkpoint(cfg, Path(checkpoint),
                                      (ds.config.num_actions, ds.config.num_verbs, ds.config.num_nouns))
    opts = EvalOptions(cfg.fov_deg, cfg.many_hot_threshold, train_class_counts(ds.split("train")), ds.pair_table)
    report = evaluate(model, ds.split(split), cfg.train, opts, split=split)
    (run_dir / f"metrics_{split}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    header, row = report.csv_row(run=str(Path(checkpoint)))
    csv_path = run_dir / "metrics.csv"
    new = not csv_path.exists()
    with open(csv_path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(header + "\n")
        fh.write(row + "\n")
    _write_manifest(run_dir, "eval", cfg, {"checkpoint": str(checkpoint), "split": split})
    return report


def cmd_predict(cfg: RunConfig, out: Optional[str], checkpoint: str, clip_path: Path,
                emit_heatmaps: bool = False, emit_cam: Optional[int] = None) -> list:
    frames = read_clip(clip_path)
    run_dir = _out_dir(cfg, out)
    n = cfg.synth
    model, _ = _model_from_checkpoint(cfg, Path(checkpoint), (n.num_actions, n.num_verbs, n.num_nouns))
    idx = sample_eval_clip(frames.shape[0], cfg.train.clip_len, cfg.train.window_len)
    x, _ = augment(frames[idx], [], cfg.train, mode="eval")
    clips = np.ascontiguousarray(x.transpose(3, 0, 1, 2)[None])
    feats, outputs = model.predict(clips)
    clip_id = Path(clip_path).stem
    records = []
    for name, head in model.heads.items():
        if head.kind != "coordinate":
            continue
        hm = normalize_heatmap(outputs[name])
        coords = dsnt(hm).data[0]  # [P, l, 2]
        maps = hm.values.data[0]
        for p in range(coords.shape[0]):
            for t in range(coords.shape[1]):
                rec = {"task": name, "point": p, "frame": t,
                       "x": float(coords[p, t, 0]), "y": float(coords[p, t, 1])}
                if emit_heatmaps:
                    rec["heatmap"] = maps[p, t].astype(np.float64).tolist()
                    img = maps[p, t] / maps[p, t].max()
                    write_pgm(run_dir / f"{clip_id}_{name}_p{p}_f{t}.pgm", img)
                records.append(rec)
    if emit_cam is not None:
        heads = [h for h in model.heads.values() if h.kind == "classification"]
        if not heads:
            raise ConfigurationError("CAM export needs a classification head")
        head = model.heads.get(cfg.train.main_task, heads[0])
        cam = class_activation_map(feats, head, emit_cam)[0]
        for t in range(cam.shape[0]):
            write_pgm(run_dir / f"{clip_id}_f{t}_c{emit_cam}.pgm", cam[t])
    (run_dir / "predictions.json").write_text(json.dumps(records) + "\n", encoding="utf-8")
    _write_manifest(run_dir, "predict", cfg, {"checkpoint": str(checkpoint), "clip": str(clip_path)})
    return records


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egomtl", description="Multitask 3D-CNN training on synthetic egocentric clips.")
    p.add_argument("command", choices=("synth", "train", "eval", "predict"))
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--out", help="output directory (overrides [run] out / dataset)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--checkpoint", help="MTLW checkpoint for eval/predict")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--clip", help="MTLC clip for predict (overrides [predict] clip)")
    p.add_argument("--emit-heatmaps", action="store_true", help="write heatmaps into the JSON and as PGM files")
    p.add_argument("--emit-cam", type=int, metavar="CLASS", help="write class activation maps for CLASS")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _thread_limit():
    raw = os.environ.get("MTL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"MTL_THREADS must be an integer, got {raw!r}") from exc
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, n))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        with _thread_limit():
            if args.command == "synth":
                print(cmd_synth(cfg, args.out))
            elif args.command == "train":
                print(cmd_train(cfg, args.out))
            elif args.command in ("eval", "predict"):
                if not args.checkpoint:
                    raise ConfigurationError(f"{args.command} needs --checkpoint")
                if args.command == "eval":
                    print(cmd_eval(cfg, args.out, args.checkpoint, args.split).to_json())
                else:
                    clip = Path(args.clip) if args.clip else cfg.clip_path
                    if clip is None or not clip.is_file():
                        raise ConfigurationError(f"clip {clip} does not exist")
                    cmd_predict(cfg, args.out, args.checkpoint, clip, args.emit_heatmaps, args.emit_cam)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (EgoMTLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
