"""Causal streaming inference with prediction-driven memory.

An :class:`OnlineSession` consumes one frame at a time.  For frame ``t`` it
builds the window of the last ``T`` frames (left-padded with copies of the
first frame), reads the history accumulated from its own predictions for
frames ``0..t-1`` and the impressions cached at ``t - offset``, predicts,
then stores the new cls vector at slot ``t`` and folds the predicted phase
into the history.

:func:`replay_videos` advances many sessions in lockstep so that one
batched forward pass serves every video still running; it is otherwise the
same procedure as calling :meth:`OnlineSession.push_frame` repeatedly.
"""

from __future__ import annotations

import copy
import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .memory import HistoryState, ImpressionCache, entry_matrix, impressions_retrieve, \
    impressions_store, intervene_erase, intervene_set
from .model import forward_batch, init_params


@dataclass(frozen=True)
class HistoryEdit:
    """One counterfactual edit: ``erase`` masks of ``phases`` or ``set`` one entry."""

    action: str
    phases: tuple = ()
    frame_count: int = 0
    mask: int = 0

    @classmethod
    def erase(cls, *phases):
        return cls("erase", tuple(int(p) for p in phases))

    @classmethod
    def set(cls, phase, frame_count, mask):
        return cls("set", (int(phase),), int(frame_count), int(mask))

    def apply(self, history):
        if self.action == "erase":
            return intervene_erase(history, self.phases)
        if self.action == "set":
            return intervene_set(history, self.phases[0], self.frame_count, self.mask)
        raise InputError(f"unknown edit action {self.action!r}")


def apply_edits(history, edits):
    if isinstance(edits, HistoryEdit):
        edits = [edits]
    for e in edits:
        history = e.apply(history)
    return history


def check_params(params, config):
    config.validate()
    template = init_params(config, 0)
    if set(template) != set(params):
        missing = sorted(set(template) - set(params))
        extra = sorted(set(params) - set(template))
        raise ConfigError(f"parameters do not match config (missing {missing[:3]}, "
                          f"extra {extra[:3]})")
    for name, t in template.items():
        if params[name].shape != t.shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, config "
                              f"implies {t.shape}")


class OnlineSession:
    def __init__(self, params, config, validate=True):
        if validate:
            check_params(params, config)
        self.params = params
        self.config = config
        self.buffer = deque(maxlen=config.window)
        self.first_frame = None
        self.frame_counter = 0
        self.history = HistoryState.empty(config.n_phases, config.step_size)
        self.cache = ImpressionCache(config.d)
        self.predictions = []
        self.max_logits = []

    @property
    def frame_shape(self):
        c = self.config
        return (c.channels, c.image_size, c.image_size)

    def copy(self):
        """Independent snapshot sharing only the (read-only) parameters."""
        out = copy.copy(self)
        out.buffer = deque(self.buffer, maxlen=self.config.window)
        out.history = self.history.copy()
        out.cache = ImpressionCache(self.config.d, dict(self.cache.slots),
                                    dict(self.cache.epochs))
        out.predictions = list(self.predictions)
        out.max_logits = list(self.max_logits)
        return out

    def apply_edit(self, edits):
        self.history = apply_edits(self.history, edits)

    def _prepare(self, frame):
        frame = np.asarray(frame, dtype=np.float32)
        if frame.shape != self.frame_shape:
            raise InputError(f"frame has shape {frame.shape}, expected {self.frame_shape}")
        if self.first_frame is None:
            self.first_frame = frame
        self.buffer.append(frame)
        pad = [self.first_frame] * (self.config.window - len(self.buffer))
        window = np.stack(pad + list(self.buffer))
        entries = entry_matrix(self.history)
        imps = impressions_retrieve(self.cache, self.frame_counter, self.config.intervals)
        return window, entries, imps

    def _commit(self, logits, cls_vec):
        pred = int(np.argmax(logits))
        impressions_store(self.cache, self.frame_counter, cls_vec)
        self.history.observe(pred)
        self.predictions.append(pred)
        self.max_logits.append(float(np.max(logits)))
        self.frame_counter += 1
        return pred

    def push_frame(self, frame):
        """Predict the phase of ``frame``; returns ``(prediction, logits)``."""
        window, entries, imps = self._prepare(frame)
        logits, cls = forward_batch(self.params, self.config, window[None], entries[None],
                                    imps[None])
        logits = logits.data[0]
        return self._commit(logits, cls.data[0]), logits

    def peek(self, frame, edits=()):
        """Prediction for ``frame`` under edited history; this session is untouched."""
        fork = self.copy()
        if edits:
            fork.apply_edit(edits)
        return fork.push_frame(frame)


def new_session(params, config):
    return OnlineSession(params, config)


def _check_edits(edits):
    frames = [f for f, _ in edits]
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise InputError(f"edit frame indices must be strictly increasing, got {frames}")
    return dict(edits)


def replay_videos(params, config, records, edits=None, sessions=None):
    """Stream every record through its own fresh session, batching across videos.

    ``edits`` optionally gives, per record, a list of ``(frame_index, edit)``
    applied to that session's live history just before the frame is
    processed.  Returns the list of sessions (predictions in ``.predictions``).
    """
    check_params(params, config)
    if sessions is None:
        sessions = [OnlineSession(params, config, validate=False) for _ in records]
    edit_maps = [_check_edits(e) for e in (edits or [[] for _ in records])]
    lengths = [len(r.labels) if hasattr(r, "labels") else len(r.frames) for r in records]
    for t in range(max(lengths, default=0)):
        active = [i for i, n in enumerate(lengths) if t < n]
        batch = []
        for i in active:
            if t in edit_maps[i]:
                sessions[i].apply_edit(edit_maps[i][t])
            batch.append(sessions[i]._prepare(records[i].frames[t]))
        windows, entries, imps = (np.stack(x) for x in zip(*batch))
        logits, cls = forward_batch(params, config, windows, entries, imps)
        for j, i in enumerate(active):
            sessions[i]._commit(logits.data[j], cls.data[j])
    return sessions


def replay_video(params, config, record):
    """Predictions of a fresh session fed every frame of ``record`` in order."""
    if len(record.frames) == 0:
        raise InputError(f"video {record.video_id} has no frames")
    return np.asarray(replay_videos(params, config, [record])[0].predictions, dtype=np.int64)


def counterfactual_replay(params, config, record, edits):
    """Replay with history edits applied right before the listed frames."""
    if len(record.frames) == 0:
        raise InputError(f"video {record.video_id} has no frames")
    session = replay_videos(params, config, [record], edits=[list(edits)])[0]
    return np.asarray(session.predictions, dtype=np.int64)


def predict_dataset(params, config, records):
    """``[(gt, pred), ...]`` for labelled records via batched replay."""
    sessions = replay_videos(params, config, records)
    return [(np.asarray(r.labels), np.asarray(s.predictions)) for r, s in zip(records, sessions)]


# -------------------------------------------------------------------- ribbon

RIBBON_HEADER = ["frame_index", "predicted_phase", "ground_truth_phase", "max_logit"]


def write_ribbon(path, predictions, max_logits, ground_truth=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RIBBON_HEADER)
        for i, (p, m) in enumerate(zip(predictions, max_logits)):
            gt = "" if ground_truth is None else int(ground_truth[i])
            w.writerow([i, int(p), gt, repr(float(m))])


def read_ribbon(path):
    """Returns ``(predictions, ground_truth_or_None, max_logits)``."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read ribbon {path}: {exc}", field=str(path)) from exc
    if not rows or rows[0] != RIBBON_HEADER:
        raise FormatError(f"{path}: bad ribbon header", field=str(path))
    preds, gts, logits = [], [], []
    for line, row in enumerate(rows[1:], start=2):
        try:
            preds.append(int(row[1]))
            gts.append(int(row[2]) if row[2] != "" else None)
            logits.append(float(row[3]))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{line}: malformed ribbon row", field=str(path)) from exc
    gt = None if any(g is None for g in gts) else np.asarray(gts, dtype=np.int64)
    return np.asarray(preds, dtype=np.int64), gt, np.asarray(logits)


def session_ribbon(path, session, ground_truth=None):
    write_ribbon(path, session.predictions, session.max_logits, ground_truth)
