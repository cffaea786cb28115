"""The two memory stores: step-filtered phase history and the impression cache.

History keeps one entry per phase class.  Each entry accumulates the number
of frames attributed to that phase in the current video; the duration the
model sees is the step count ``frame_count // step_size``, and the phase is
flagged present once at least one full step has accumulated, so segments
shorter than ``step_size`` frames never register.

Serialised row layout (:func:`entry_matrix`), a stable contract::

    [ one-hot(phase_id) (C values) | step_count | mask ]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

DEFAULT_STEP_SIZE = 30
DEFAULT_INTERVALS = (64, 128, 192, 256, 320, 384, 448, 512)


def step_filter(frame_count, step_size):
    if step_size < 1:
        raise ConfigError(f"step_size must be >= 1, got {step_size}")
    if frame_count < 0:
        raise InputError(f"frame_count must be >= 0, got {frame_count}")
    return frame_count // step_size


@dataclass
class HistoryEntry:
    phase_id: int
    frame_count: int = 0
    step_count: int = 0
    mask: int = 0


@dataclass
class HistoryState:
    """Per-phase accumulated history for one video."""

    entries: list
    step_size: int = DEFAULT_STEP_SIZE

    @classmethod
    def empty(cls, n_phases, step_size=DEFAULT_STEP_SIZE):
        if n_phases < 1:
            raise ConfigError(f"need at least one phase, got {n_phases}")
        step_filter(0, step_size)
        return cls([HistoryEntry(i) for i in range(n_phases)], step_size)

    @classmethod
    def from_counts(cls, counts, step_size=DEFAULT_STEP_SIZE):
        """History reached by observing ``counts[i]`` frames of each phase ``i``."""
        state = cls.empty(len(counts), step_size)
        for entry, n in zip(state.entries, counts):
            entry.frame_count = int(n)
            entry.step_count = step_filter(int(n), step_size)
            entry.mask = int(entry.step_count >= 1)
        return state

    @property
    def n_phases(self):
        return len(self.entries)

    def copy(self):
        return HistoryState([HistoryEntry(e.phase_id, e.frame_count, e.step_count, e.mask)
                             for e in self.entries], self.step_size)

    def _check_phase(self, phase):
        if not 0 <= phase < self.n_phases:
            raise InputError(f"phase {phase} outside [0, {self.n_phases})")

    def observe(self, phase):
        """In-place version of :func:`observe_phase`."""
        self._check_phase(phase)
        e = self.entries[phase]
        e.frame_count += 1
        e.step_count = step_filter(e.frame_count, self.step_size)
        if e.step_count >= 1:
            e.mask = 1

    def counts(self):
        return np.array([e.frame_count for e in self.entries], dtype=np.int64)

    def masks(self):
        return np.array([e.mask for e in self.entries], dtype=np.int64)

    def steps(self):
        return np.array([e.step_count for e in self.entries], dtype=np.int64)


def observe_phase(state, phase):
    """Return a copy of ``state`` with one more frame attributed to ``phase``."""
    out = state.copy()
    out.observe(phase)
    return out


def entry_matrix(state):
    c = state.n_phases
    m = np.zeros((c, c + 2), dtype=np.float64)
    m[:, :c] = np.eye(c)
    m[:, c] = state.steps()
    m[:, c + 1] = state.masks()
    return m


def intervene_erase(state, phases):
    """Copy of ``state`` with the listed phases' masks cleared; counts untouched."""
    out = state.copy()
    for p in phases:
        out._check_phase(p)
        out.entries[p].mask = 0
    return out


def intervene_set(state, phase, frame_count, mask):
    """Copy of ``state`` with one entry overwritten (step count recomputed)."""
    out = state.copy()
    out._check_phase(phase)
    if mask not in (0, 1):
        raise InputError(f"mask must be 0 or 1, got {mask}")
    e = out.entries[phase]
    e.frame_count = int(frame_count)
    e.step_count = step_filter(int(frame_count), out.step_size)
    e.mask = int(mask)
    return out


@dataclass
class ImpressionCache:
    """Frame index -> stored final cls vector, last write wins.

    ``epochs`` records which training epoch (or inference pass) wrote each
    slot, so every stored value can be attributed to a (epoch, frame) pair.
    """

    d: int
    slots: dict = field(default_factory=dict)
    epochs: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.slots)

    def __contains__(self, frame_index):
        return frame_index in self.slots

    def get(self, frame_index):
        return self.slots.get(frame_index)


def impressions_store(cache, frame_index, cls_vec, epoch=None):
    vec = np.asarray(cls_vec)
    if vec.shape != (cache.d,):
        raise InputError(f"impression has shape {vec.shape}, cache expects ({cache.d},)")
    cache.slots[int(frame_index)] = vec.copy()
    cache.epochs[int(frame_index)] = epoch


def impressions_retrieve(cache, current_frame, intervals=DEFAULT_INTERVALS, dtype=np.float32):
    """Stack the slots at ``current_frame - o`` for each offset ``o``.

    Missing slots and negative indices yield zero vectors.  Returns an
    array of shape (len(intervals), d).
    """
    out = np.zeros((len(intervals), cache.d), dtype=dtype)
    for i, off in enumerate(intervals):
        vec = cache.slots.get(current_frame - off)
        if vec is not None:
            out[i] = vec
    return out


def check_intervals(intervals):
    if not intervals:
        raise ConfigError("impression intervals must be non-empty")
    if any(o < 1 for o in intervals) or any(b <= a for a, b in zip(intervals, intervals[1:])):
        raise ConfigError(f"impression intervals must be positive and strictly increasing: "
                          f"{list(intervals)}")
    return tuple(int(o) for o in intervals)
