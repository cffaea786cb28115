"""Memory-caching training loop.

Frames from all training videos are visited in a fresh random order every
epoch (a pure function of ``(seed, epoch)``), never video by video.  Each
example reads:

* history built from the *ground-truth* labels of frames ``0..t-1``;
* impressions from the cache written during the previous epoch.

After each optimisation step the batch's final cls vectors are written to a
new cache for the current epoch; it becomes the read cache of the next
epoch.  Every training frame is therefore written exactly once per epoch,
epoch-1 reads are all zeros, and an epoch-``k`` read always returns the
value written for that frame in epoch ``k-1``.  Stored vectors are
constants: no gradient flows into the cache.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, NumericError
from .inference import predict_dataset
from .memory import HistoryState, ImpressionCache, impressions_retrieve, impressions_store
from .metrics import video_accuracy
from .model import copy_params, forward_batch, init_params, save_checkpoint
from .optim import AdamState, adam_step, zero_grad

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimisation settings.

    ``mem_mode``, ``step_size`` and ``intervals`` override the model config
    when not ``None`` (see :func:`resolve_model_config`).
    """

    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    mem_mode: str = None
    step_size: int = None
    intervals: tuple = None
    checkpoint_path: str = None
    log_path: str = None

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        return self

    def to_dict(self):
        out = dataclasses.asdict(self)
        if out["intervals"] is not None:
            out["intervals"] = list(out["intervals"])
        return out

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def resolve_model_config(model_config, train_config):
    changes = {k: getattr(train_config, k) for k in ("mem_mode", "step_size", "intervals")
               if getattr(train_config, k) is not None}
    return dataclasses.replace(model_config, **changes).validate()


@dataclass
class TrainState:
    params: dict
    adam: AdamState
    caches: dict = field(default_factory=dict)
    epoch: int = 0
    log: list = field(default_factory=list)


class CacheAudit:
    """Records every cache read/write and the history fed to each example."""

    def __init__(self, keep_history=False):
        self.reads = []       # (epoch, video_id, frame, slot or None, vector)
        self.writes = []      # (epoch, video_id, frame, vector)
        self.batches = []     # (epoch, [(video_idx, frame), ...])
        self.histories = []   # (epoch, video_id, frame, entry matrix)
        self.keep_history = keep_history

    def on_batch(self, epoch, pairs):
        self.batches.append((epoch, [tuple(map(int, p)) for p in pairs]))

    def on_read(self, epoch, video_id, frame, slots, vectors):
        for s, v in zip(slots, vectors):
            self.reads.append((epoch, video_id, frame, s if s >= 0 else None, v.copy()))

    def on_write(self, epoch, video_id, frame, vector):
        self.writes.append((epoch, video_id, frame, vector.copy()))

    def on_history(self, epoch, video_id, frame, entries):
        if self.keep_history:
            self.histories.append((epoch, video_id, frame, entries.copy()))


def build_gt_history(labels, t, step_size, n_phases=None):
    """History after observing the ground-truth labels of frames ``0..t-1``."""
    labels = np.asarray(labels)
    if not 0 <= t <= len(labels):
        raise InputError(f"t={t} outside [0, {len(labels)}]")
    c = n_phases if n_phases is not None else int(labels.max()) + 1 if len(labels) else 1
    state = HistoryState.empty(c, step_size)
    for p in labels[:t]:
        state.observe(int(p))
    return state


def cumulative_counts(labels, n_phases):
    """(N+1, C) array; row ``t`` counts each phase among frames ``0..t-1``."""
    onehot = np.zeros((len(labels) + 1, n_phases), dtype=np.int64)
    onehot[np.arange(1, len(labels) + 1), np.asarray(labels)] = 1
    return np.cumsum(onehot, axis=0)


def gt_entries(cum, t, step_size):
    """Entry matrix of ``build_gt_history`` computed from cumulative counts."""
    counts = cum[t]
    c = counts.shape[0]
    steps = counts // step_size
    m = np.zeros((c, c + 2), dtype=np.float64)
    m[:, :c] = np.eye(c)
    m[:, c] = steps
    m[:, c + 1] = steps >= 1
    return m


def window_indices(t, length):
    """Frame indices of the window ending at ``t``, left-padded with frame 0."""
    return np.maximum(np.arange(t - length + 1, t + 1), 0)


def make_example(record, t, caches, config):
    """``(window, history, impressions, label)`` for frame ``t`` of ``record``."""
    if not 0 <= t < len(record.labels):
        raise InputError(f"t={t} outside video {record.video_id} of {len(record.labels)} frames")
    window = record.frames[window_indices(t, config.window)]
    history = build_gt_history(record.labels, t, config.step_size, config.n_phases)
    cache = caches.get(record.video_id) or ImpressionCache(config.d)
    impressions = impressions_retrieve(cache, t, config.intervals)
    return window, history, impressions, int(record.labels[t])


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(state, records, config, train_config, audit=None):
    """One pass over every (video, frame) pair; returns a statistics dict."""
    if not records:
        raise InputError("training set is empty")
    t0 = time.perf_counter()
    epoch = state.epoch + 1
    index = np.array([(v, t) for v, r in enumerate(records) for t in range(len(r.labels))])
    order = index[epoch_order(train_config.seed, epoch, len(index))]
    cums = [cumulative_counts(r.labels, config.n_phases) for r in records]
    read = state.caches
    write = {r.video_id: ImpressionCache(config.d) for r in records}
    empty = ImpressionCache(config.d)
    offsets = np.asarray(config.intervals)

    losses, correct, writes = [], 0, 0
    for start in range(0, len(order), train_config.batch_size):
        pairs = order[start:start + train_config.batch_size]
        if audit is not None:
            audit.on_batch(epoch, pairs)
        windows, entries, imps, labels = [], [], [], []
        for v, t in pairs:
            r = records[v]
            windows.append(r.frames[window_indices(t, config.window)])
            e = gt_entries(cums[v], t, config.step_size)
            entries.append(e)
            imp = impressions_retrieve(read.get(r.video_id, empty), t, config.intervals)
            imps.append(imp)
            labels.append(r.labels[t])
            if audit is not None:
                audit.on_history(epoch, r.video_id, int(t), e)
                audit.on_read(epoch, r.video_id, int(t), t - offsets, imp)
        logits, cls = forward_batch(state.params, config, np.stack(windows), np.stack(entries),
                                    np.stack(imps))
        loss = T.cross_entropy(logits, labels)
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite loss {loss.item()} in epoch {epoch} at batch "
                               f"{start // train_config.batch_size}")
        zero_grad(state.params)
        loss.backward()
        adam_step(state.params, state.adam)

        losses.append(loss.item() * len(pairs))
        correct += int((logits.data.argmax(axis=1) == np.asarray(labels)).sum())
        for j, (v, t) in enumerate(pairs):
            vid = records[v].video_id
            impressions_store(write[vid], int(t), cls.data[j], epoch=epoch)
            writes += 1
            if audit is not None:
                audit.on_write(epoch, vid, int(t), cls.data[j])

    state.caches = write
    state.epoch = epoch
    return {"epoch": epoch, "loss": float(np.sum(losses) / len(order)),
            "train_accuracy": correct / len(order), "cache_writes": writes,
            "seconds": time.perf_counter() - t0}


def new_train_state(model_config, train_config):
    params = init_params(model_config, train_config.seed)
    adam = AdamState(train_config.learning_rate, train_config.beta1, train_config.beta2,
                     train_config.epsilon)
    return TrainState(params, adam)


LOG_FIELDS = ["epoch", "loss", "val_accuracy", "seconds"]


def fit(train_records, model_config, train_config, val_records=(), audit=None):
    """Train for ``epochs`` epochs; returns ``(params, log)``.

    After every epoch the model is replayed online over ``val_records``; the
    parameters with the best validation video-level accuracy are returned
    (ties keep the earlier epoch).  Without validation videos the final
    parameters are returned.
    """
    train_config.validate()
    config = resolve_model_config(model_config, train_config)
    state = new_train_state(config, train_config)
    best, best_acc = None, -1.0
    log_fh = None
    if train_config.log_path:
        log_fh = open(train_config.log_path, "w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    try:
        for _ in range(train_config.epochs):
            stats = train_epoch(state, train_records, config, train_config, audit)
            t0 = time.perf_counter()
            if val_records:
                val_acc, _ = video_accuracy(predict_dataset(state.params, config, val_records))
            else:
                val_acc = float("nan")
            stats["val_accuracy"] = val_acc
            stats["seconds"] += time.perf_counter() - t0
            if not val_records or val_acc > best_acc:
                best, best_acc = copy_params(state.params), val_acc
            state.log.append(stats)
            logger.info("epoch %d loss %.4f train_acc %.3f val_acc %.3f (%.1fs)",
                        stats["epoch"], stats["loss"], stats["train_accuracy"], val_acc,
                        stats["seconds"])
            if log_fh is not None:
                writer.writerow({k: stats[k] for k in LOG_FIELDS})
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    if train_config.checkpoint_path:
        save_checkpoint(best, config, train_config.checkpoint_path)
    return best, state.log
