"""Command-line front end: ``phasemem <command> [options]``.

Commands::

    gen-data   write a synthetic dataset
    train      fit a model and save the best checkpoint and an epoch log
    eval       score a checkpoint on a dataset split, or score ribbon files
    infer      stream one video through a checkpoint and write its ribbon
    intervene  replay one video with history edits; before/after ribbons

Settings come from an optional JSON config with the sections ``generator``,
``model``, ``train``, ``eval``, ``paths`` and ``seed``; ``--set
section.key=value`` and the dedicated flags override it.  Each command
writes the effective configuration and the package version to its output
directory.  Exit codes: 0 success, 1 runtime failure, 2 usage or config
error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, InputError, PhaseMemError, UsageError
from .inference import HistoryEdit, read_ribbon, replay_videos, session_ribbon
from .metrics import PROTOCOLS, evaluate
from .model import MEM_MODES, ModelConfig, file_sha256, load_checkpoint
from .synthdata import GeneratorConfig, ProcedureRecord, generate_dataset, read_dataset, \
    read_frames, read_labels, write_dataset
from .training import TrainConfig, fit

logger = logging.getLogger(__name__)

EVAL_KEYS = {"protocol": "concat", "split": "test"}
PATH_KEYS = {"data_dir": None, "out_dir": None}
CONFIG_NAME = "effective_config.json"


# ------------------------------------------------------------------- config

def default_run_config():
    return {"generator": GeneratorConfig().to_dict(), "model": ModelConfig().to_dict(),
            "train": TrainConfig().to_dict(), "eval": dict(EVAL_KEYS), "paths": dict(PATH_KEYS),
            "seed": None}


def merge_config(base, update, where="config"):
    """Recursive merge that rejects keys ``base`` does not know."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = merge_config(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def parse_override(text):
    """``section.key=value`` -> nested dict; the value is parsed as JSON if possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = value
    for part in reversed(path.split(".")):
        out = {part: out}
    return out


def load_run_config(path=None, overrides=()):
    cfg = default_run_config()
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = merge_config(cfg, user)
    for o in overrides:
        cfg = merge_config(cfg, parse_override(o))
    if cfg["seed"] is not None:
        cfg["generator"]["seed"] = cfg["seed"]
        cfg["train"]["seed"] = cfg["seed"]
    if cfg["eval"]["protocol"] not in PROTOCOLS:
        raise ConfigError(f"eval.protocol must be one of {PROTOCOLS}")
    return cfg


def write_effective_config(out_dir, cfg, command):
    os.makedirs(out_dir, exist_ok=True)
    payload = {"tool": "phasemem", "version": __version__, "command": command, "config": cfg}
    with open(os.path.join(out_dir, CONFIG_NAME), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required (flag or paths section of the config)")
    return value


# ----------------------------------------------------------------- commands

def cmd_gen_data(cfg, out_dir):
    gen = GeneratorConfig.from_dict(cfg["generator"]).validate()
    data = generate_dataset(gen)
    write_dataset(data, out_dir, gen)
    write_effective_config(out_dir, cfg, "gen-data")
    counts = {s: sum(1 for _, x in data if x == s) for s in ("train", "val", "test")}
    print(f"wrote {len(data)} videos to {out_dir} ({counts})")
    return 0


def cmd_train(cfg, data_dir, out_dir):
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_cfg = TrainConfig.from_dict(cfg["train"])
    train_cfg.checkpoint_path = os.path.join(out_dir, "model.ckpt")
    train_cfg.log_path = os.path.join(out_dir, "train_log.csv")
    train = [r for r, s in read_dataset(data_dir) if s == "train"]
    val = [r for r, s in read_dataset(data_dir) if s == "val"]
    os.makedirs(out_dir, exist_ok=True)
    write_effective_config(out_dir, cfg, "train")
    _, log = fit(train, model_cfg, train_cfg, val)
    print(f"trained {len(log)} epochs; checkpoint {train_cfg.checkpoint_path}")
    return 0


def _report(videos, n_phases, protocol, out_dir, extra):
    report = evaluate(videos, n_phases, protocol)
    path = os.path.join(out_dir, f"report_{protocol}.json")
    with open(path, "w") as fh:
        fh.write(report.to_json(**extra))
        fh.write("\n")
    print(report.table())
    print(f"report written to {path}")
    return report


def cmd_eval(cfg, checkpoint, data_dir, out_dir, ribbons=()):
    protocol = cfg["eval"]["protocol"]
    os.makedirs(out_dir, exist_ok=True)
    extra = {}
    if checkpoint:
        params, model_cfg = load_checkpoint(checkpoint)
        extra = {"checkpoint": os.path.abspath(checkpoint),
                 "checkpoint_sha256": file_sha256(checkpoint), "model": model_cfg.to_dict()}
        n_phases = model_cfg.n_phases
    else:
        n_phases = cfg["model"]["n_phases"]
    if ribbons:
        videos = []
        for path in ribbons:
            preds, gt, _ = read_ribbon(path)
            if gt is None:
                raise InputError(f"ribbon {path} has no ground_truth_phase column values")
            videos.append((gt, preds))
        extra["ribbons"] = [os.path.abspath(p) for p in ribbons]
    else:
        if not checkpoint:
            raise UsageError("eval needs --checkpoint with --data, or --ribbons")
        split = cfg["eval"]["split"]
        records = [r for r, _ in read_dataset(_require(data_dir, "--data"), split)]
        if not records:
            raise InputError(f"split {split!r} of {data_dir} has no videos")
        sessions = replay_videos(params, model_cfg, records)
        videos = [(r.labels, np.asarray(s.predictions)) for r, s in zip(records, sessions)]
        extra.update(split=split, data_dir=os.path.abspath(data_dir))
    write_effective_config(out_dir, cfg, "eval")
    _report(videos, n_phases, protocol, out_dir, extra)
    return 0


def load_video(video, labels=None):
    frames = read_frames(video)
    gt = read_labels(labels) if labels else None
    if gt is not None and len(gt) != len(frames):
        raise InputError(f"{labels} has {len(gt)} labels for {len(frames)} frames")
    vid = os.path.basename(str(video)).split(".")[0]
    return ProcedureRecord(vid, frames, gt if gt is not None else np.zeros(0, np.int64))


def cmd_infer(cfg, checkpoint, video, ribbon, labels=None):
    params, model_cfg = load_checkpoint(checkpoint)
    rec = load_video(video, labels)
    session = replay_videos(params, model_cfg, [_frames_only(rec)])[0]
    out_dir = os.path.dirname(os.path.abspath(ribbon))
    os.makedirs(out_dir, exist_ok=True)
    session_ribbon(ribbon, session, rec.labels if labels else None)
    write_effective_config(out_dir, cfg, "infer")
    print(f"{len(session.predictions)} predictions written to {ribbon}")
    return 0


def _frames_only(rec):
    return ProcedureRecord(rec.video_id, rec.frames, np.zeros(len(rec.frames), np.int64))


EDIT_HEADER = ["frame_index", "action", "phase_id", "frame_count", "mask"]


def read_edits(path):
    """Parse an edits CSV into ``[(frame_index, HistoryEdit), ...]``.

    Several rows for one frame are combined into a single list of edits.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read edits file {path}: {exc}") from exc
    if not rows:
        return []
    if [c.strip() for c in rows[0]] != EDIT_HEADER:
        raise InputError(f"{path}:1: header must be {','.join(EDIT_HEADER)}")
    grouped = {}
    for line, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        try:
            if len(row) != 5:
                raise ValueError(f"expected 5 fields, got {len(row)}")
            frame, action, phase = int(row[0]), row[1].strip(), int(row[2])
            if frame < 0 or phase < 0:
                raise ValueError("negative frame_index or phase_id")
            if action == "erase":
                edit = HistoryEdit.erase(phase)
            elif action == "set":
                edit = HistoryEdit.set(phase, int(row[3]), int(row[4]))
                if edit.mask not in (0, 1) or edit.frame_count < 0:
                    raise ValueError("set needs frame_count >= 0 and mask in {0, 1}")
            else:
                raise ValueError(f"unknown action {action!r}")
        except ValueError as exc:
            raise InputError(f"{path}:{line}: malformed edit ({exc})") from exc
        grouped.setdefault(frame, []).append(edit)
    return sorted(grouped.items())


def cmd_intervene(cfg, checkpoint, video, edits_path, out_dir, labels=None):
    params, model_cfg = load_checkpoint(checkpoint)
    rec = load_video(video, labels)
    edits = read_edits(edits_path)
    for frame, group in edits:
        for e in group:
            if e.phases[0] >= model_cfg.n_phases:
                raise InputError(f"{edits_path}: phase {e.phases[0]} out of range for "
                                 f"{model_cfg.n_phases} phases")
    frames = _frames_only(rec)
    before, after = replay_videos(params, model_cfg, [frames, frames], edits=[[], edits])
    os.makedirs(out_dir, exist_ok=True)
    gt = rec.labels if labels else None
    session_ribbon(os.path.join(out_dir, "before.csv"), before, gt)
    session_ribbon(os.path.join(out_dir, "after.csv"), after, gt)
    b, a = np.asarray(before.predictions), np.asarray(after.predictions)
    changed = np.flatnonzero(a != b)
    summary = {"video": os.path.abspath(video), "n_frames": int(len(b)),
               "n_edits": sum(len(g) for _, g in edits), "n_changed": int(changed.size),
               "first_changed": int(changed[0]) if changed.size else None,
               "changed_frames": changed.tolist(),
               "before_counts": np.bincount(b, minlength=model_cfg.n_phases).tolist(),
               "after_counts": np.bincount(a, minlength=model_cfg.n_phases).tolist(),
               "checkpoint_sha256": file_sha256(checkpoint)}
    if gt is not None:
        summary["accuracy_before"] = float((b == gt).mean())
        summary["accuracy_after"] = float((a == gt).mean())
    with open(os.path.join(out_dir, "diff.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    write_effective_config(out_dir, cfg, "intervene")
    print(f"{summary['n_changed']} of {summary['n_frames']} predictions changed "
          f"(first at frame {summary['first_changed']})")
    return 0


# ------------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="phasemem", description="Online phase recognition with history and impression memory.")
    parser.add_argument("--version", action="version", version=f"phasemem {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", help="dataset directory")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="run directory")
    p.add_argument("--mem-mode", choices=MEM_MODES)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="score predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--ribbons", nargs="+", default=(), help="score these ribbon CSVs instead")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--out", help="report directory")

    p = sub.add_parser("infer", parents=[common], help="stream one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True, help="frames blob")
    p.add_argument("--labels", help="optional labels CSV for the ground-truth column")
    p.add_argument("--ribbon", required=True, help="output ribbon CSV")

    p = sub.add_parser("intervene", parents=[common], help="counterfactual history replay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True, help="frames blob")
    p.add_argument("--labels", help="optional labels CSV")
    p.add_argument("--edits", required=True, help="CSV: " + ",".join(EDIT_HEADER))
    p.add_argument("--out", required=True, help="output directory")
    return parser


def run(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "mem_mode", None):
        overrides.append(f"train.mem_mode={args.mem_mode}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if getattr(args, "protocol", None):
        overrides.append(f"eval.protocol={args.protocol}")
    if getattr(args, "split", None):
        overrides.append(f"eval.split={args.split}")
    cfg = load_run_config(args.config, overrides)
    paths = cfg["paths"]
    out = getattr(args, "out", None) or paths["out_dir"]
    data = getattr(args, "data", None) or paths["data_dir"]

    if args.command == "gen-data":
        return cmd_gen_data(cfg, _require(out or data, "--out"))
    if args.command == "train":
        return cmd_train(cfg, _require(data, "--data"), _require(out, "--out"))
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, data, _require(out, "--out"), args.ribbons)
    if args.command == "infer":
        return cmd_infer(cfg, args.checkpoint, args.video, args.ribbon, args.labels)
    return cmd_intervene(cfg, args.checkpoint, args.video, args.edits, out, args.labels)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, UsageError) as exc:
        print(f"phasemem {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PhaseMemError, OSError) as exc:
        print(f"phasemem {args.command}: error: {exc}", file=sys.stderr)
        return 1
