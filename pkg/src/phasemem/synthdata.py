"""Synthetic procedures: phase label sequences plus rendered frames.

Labels walk the chain ``P0 -> P1 -> ... -> P(C-1)``; phase ``i`` is skipped
with probability ``skip_probs[i]`` and otherwise lasts a uniform number of
frames drawn from ``durations[i]``.  Frame ``t`` is the phase's base pattern
plus i.i.d. Gaussian noise.  Members of an ambiguous pair share one base
pattern, so a classifier that only sees frames inside such a segment cannot
tell them apart.

On-disk layout of a dataset directory::

    manifest.json            format version, generator config, video list with splits
    <video_id>.labels.csv    header ``frame_index,phase_id`` then one row per frame
    <video_id>.frames        frame blob (see :func:`write_frames`)

Frame blob: magic ``b"PHMFRM"``, version byte, ndim byte, ``ndim`` little-endian
uint32 dims, then the values as little-endian float32 in C order.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, UnsupportedVersionError

FRAME_MAGIC = b"PHMFRM"
FRAME_VERSION = 1
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class GeneratorConfig:
    n_phases: int = 7
    durations: list = field(default_factory=lambda: [[40, 120]] * 7)
    skip_probs: list = field(default_factory=lambda: [0.0] * 7)
    image_size: int = 32
    channels: int = 1
    noise_sigma: float = 0.5
    ambiguous_pairs: list = field(default_factory=lambda: [[1, 3]])
    seed: int = 0
    n_train: int = 20
    n_val: int = 4
    n_test: int = 6

    def validate(self):
        c = self.n_phases
        if not isinstance(c, int) or c < 1:
            raise ConfigError(f"n_phases must be a positive integer, got {c!r}")
        if len(self.durations) != c or len(self.skip_probs) != c:
            raise ConfigError(f"durations and skip_probs need {c} entries each")
        for lo, hi in self.durations:
            if lo < 1 or hi < lo:
                raise ConfigError(f"invalid duration range [{lo}, {hi}]")
        if any(not 0.0 <= p < 1.0 for p in self.skip_probs):
            raise ConfigError("skip probabilities must lie in [0, 1)")
        if self.image_size < 2 or self.channels < 1 or self.noise_sigma < 0:
            raise ConfigError("image_size >= 2, channels >= 1 and noise_sigma >= 0 required")
        seen = set()
        for pair in self.ambiguous_pairs:
            a, b = pair
            if a == b or not (0 <= a < c and 0 <= b < c) or a in seen or b in seen:
                raise ConfigError(f"ambiguous pairs must be disjoint pairs of distinct phases, "
                                  f"got {self.ambiguous_pairs}")
            seen.update((a, b))
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")
        if self.n_phases - len(self.ambiguous_pairs) > len(_basis_pairs(self.image_size)):
            raise ConfigError("image too small for the requested number of distinct patterns")
        return self

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ProcedureRecord:
    video_id: str
    frames: np.ndarray   # (N, channels, H, W) float32
    labels: np.ndarray   # (N,) int64
    fps: int = 1

    def __len__(self):
        return len(self.labels)


def _basis_pairs(size):
    # low-frequency 2-D cosine indices, ordered by frequency, skipping the constant one
    pairs = [(u, v) for u in range(4) for v in range(4) if (u, v) != (0, 0) and u < size
             and v < size]
    return sorted(pairs, key=lambda uv: (uv[0] + uv[1], uv[0]))


def base_patterns(config):
    """(C, channels, H, W) templates; ambiguous-pair members share one template.

    Templates are distinct separable cosines, hence mutually orthogonal, and
    scaled to unit RMS.
    """
    config.validate()
    n = config.image_size
    partner = {}
    for a, b in config.ambiguous_pairs:
        partner[max(a, b)] = min(a, b)
    grid = (np.arange(n) + 0.5) / n
    basis = _basis_pairs(n)
    out = np.zeros((config.n_phases, config.channels, n, n), dtype=np.float64)
    slot = {}
    for p in range(config.n_phases):
        if p in partner:
            out[p] = out[partner[p]]
            continue
        u, v = basis[len(slot)]
        slot[p] = (u, v)
        img = np.outer(np.cos(np.pi * u * grid), np.cos(np.pi * v * grid))
        img /= np.sqrt((img ** 2).mean())
        out[p] = img[None]
    return out


def sample_labels(config, rng):
    labels = []
    for p in range(config.n_phases):
        if config.skip_probs[p] > 0 and rng.random() < config.skip_probs[p]:
            continue
        lo, hi = config.durations[p]
        labels.extend([p] * int(rng.integers(lo, hi + 1)))
    if not labels:
        lo, hi = config.durations[0]
        labels = [0] * int(rng.integers(lo, hi + 1))
    return np.asarray(labels, dtype=np.int64)


def sample_procedure(config, video_seed, video_id=None):
    """One synthetic video, fully determined by ``(config, video_seed)``."""
    config.validate()
    rng = np.random.default_rng([config.seed, video_seed])
    labels = sample_labels(config, rng)
    patterns = base_patterns(config)
    noise = rng.normal(0.0, config.noise_sigma, size=(len(labels),) + patterns.shape[1:])
    frames = (patterns[labels] + noise).astype(np.float32)
    return ProcedureRecord(video_id or f"vid{video_seed:03d}", frames, labels)


def generate_dataset(config):
    """All videos of a config, with their split names, in manifest order."""
    config.validate()
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    out = []
    k = 0
    for split in SPLITS:
        for _ in range(counts[split]):
            out.append((sample_procedure(config, k), split))
            k += 1
    return out


def run_lengths(labels):
    """[(phase, length), ...] for consecutive runs in ``labels``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [labels.size]])
    return [(int(labels[s]), int(e - s)) for s, e in zip(starts, ends)]


# ------------------------------------------------------------------------ I/O

def write_frames(path, frames):
    arr = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + bytes([FRAME_VERSION, arr.ndim]))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_frames(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read frame blob {path}: {exc}", field=str(path)) from exc
    n = len(FRAME_MAGIC)
    if raw[:n] != FRAME_MAGIC or len(raw) < n + 2:
        raise FormatError(f"{path}: not a frame blob (bad magic)", field=str(path))
    if raw[n] != FRAME_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported frame blob version {raw[n]}",
                                      field=str(path))
    ndim = raw[n + 1]
    start = n + 2 + 4 * ndim
    if len(raw) < start:
        raise FormatError(f"{path}: truncated frame header", field=str(path))
    shape = struct.unpack(f"<{ndim}I", raw[n + 2:start])
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != start + 4 * count:
        raise FormatError(f"{path}: payload holds {(len(raw) - start) // 4} values, header "
                          f"shape {shape} needs {count}", field=str(path))
    return np.frombuffer(raw, dtype="<f4", offset=start).reshape(shape).astype(np.float32)


def write_labels(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "phase_id"])
        for i, p in enumerate(labels):
            w.writerow([i, int(p)])


def read_labels(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read labels {path}: {exc}", field=str(path)) from exc
    if not rows or rows[0] != ["frame_index", "phase_id"]:
        raise FormatError(f"{path}: missing 'frame_index,phase_id' header", field=str(path))
    labels = []
    for line, row in enumerate(rows[1:], start=2):
        try:
            idx, phase = int(row[0]), int(row[1])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{line}: malformed row {row}", field=str(path)) from exc
        if idx != len(labels):
            raise FormatError(f"{path}:{line}: expected frame_index {len(labels)}, got {idx}",
                              field=str(path))
        labels.append(phase)
    return np.asarray(labels, dtype=np.int64)


def write_dataset(records, directory, config=None):
    """Write ``[(record, split), ...]`` (or bare records, all 'train')."""
    os.makedirs(directory, exist_ok=True)
    videos = []
    for item in records:
        record, split = item if isinstance(item, tuple) else (item, "train")
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        frames_file = f"{record.video_id}.frames"
        labels_file = f"{record.video_id}.labels.csv"
        write_frames(os.path.join(directory, frames_file), record.frames)
        write_labels(os.path.join(directory, labels_file), record.labels)
        videos.append({"video_id": record.video_id, "split": split, "n_frames": len(record),
                       "fps": record.fps, "frames_file": frames_file,
                       "labels_file": labels_file})
    manifest = {"format_version": MANIFEST_VERSION,
                "generator": config.to_dict() if config is not None else None,
                "videos": videos}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}", field=path) from exc
    except ValueError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})", field=path) from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported manifest version "
                                      f"{manifest.get('format_version')}", field=path)
    return manifest


def read_dataset(directory, split=None):
    """Returns ``[(record, split), ...]``, optionally filtered to one split."""
    manifest = read_manifest(directory)
    out = []
    for v in manifest["videos"]:
        if split is not None and v["split"] != split:
            continue
        frames = read_frames(os.path.join(directory, v["frames_file"]))
        labels_path = os.path.join(directory, v["labels_file"])
        labels = read_labels(labels_path)
        if len(frames) != len(labels) or len(labels) != v["n_frames"]:
            raise FormatError(f"{labels_path}: {len(labels)} labels / {len(frames)} frames, "
                              f"manifest says {v['n_frames']}", field=labels_path)
        out.append((ProcedureRecord(v["video_id"], frames, labels, v.get("fps", 1)),
                    v["split"]))
    return out


def split_records(dataset, split):
    return [r for r, s in dataset if s == split]
