"""Sliding-window phase classifier with history and impression memory.

Data flow for one window (``mem_mode="full"``)::

    frames -> patch tokens (+ space/time position tables)
    history entries -> 2 attention blocks -> history token (masked rows hidden)
    cls' = cls + history token                       (early fusion)
    [cls' | patch tokens] -> decoder blocks -> final norm -> cls_out
    cached impressions -> 2 attention blocks -> impression token
    cls'' = cls_out + impression token               (late fusion)
    logits = head(cls'')

``mem_mode`` switches the fusions: ``none`` (neither), ``short``
(impressions only), ``long`` (history only), ``full`` (both).  Parameters
of an unused memory stream are not created at all.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, FormatError, InputError, UnsupportedVersionError
from .memory import DEFAULT_INTERVALS, DEFAULT_STEP_SIZE, HistoryState, check_intervals, \
    entry_matrix

MEM_MODES = ("none", "short", "long", "full")
MEMORY_DEPTH = 2


@dataclass
class ModelConfig:
    n_phases: int = 7
    window: int = 16
    image_size: int = 32
    patch_size: int = 16
    channels: int = 1
    d: int = 32
    heads: int = 4
    depth: int = 1
    mem_mode: str = "full"
    intervals: tuple = DEFAULT_INTERVALS
    step_size: int = DEFAULT_STEP_SIZE

    def __post_init__(self):
        self.intervals = tuple(self.intervals)

    def validate(self):
        for name in ("n_phases", "window", "image_size", "patch_size", "channels", "d", "heads",
                     "depth", "step_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by "
                              f"patch_size {self.patch_size}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % 2:
            raise ConfigError(f"d must be even for the sinusoidal step code, got {self.d}")
        if self.mem_mode not in MEM_MODES:
            raise ConfigError(f"mem_mode must be one of {MEM_MODES}, got {self.mem_mode!r}")
        check_intervals(self.intervals)
        return self

    @property
    def patches_per_frame(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def uses_history(self):
        return self.mem_mode in ("long", "full")

    @property
    def uses_impressions(self):
        return self.mem_mode in ("short", "full")

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["intervals"] = list(self.intervals)
        return out

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def init_params(config, seed, dtype=np.float32):
    """Deterministic parameter initialisation, returned as an ordered dict."""
    config.validate()
    rng = np.random.default_rng(seed)
    d, c = config.d, config.n_phases
    p = {}
    patch_dim = config.channels * config.patch_size ** 2
    L.init_linear(p, "patch", rng, patch_dim, d, dtype=dtype)
    p["cls"] = T.Tensor(L.trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)
    p["pos.space"] = T.Tensor(L.trunc_normal(rng, (config.patches_per_frame, d), dtype=dtype),
                              requires_grad=True)
    p["pos.time"] = T.Tensor(L.trunc_normal(rng, (config.window, d), dtype=dtype),
                             requires_grad=True)
    for i in range(config.depth):
        L.init_block(p, f"dec.{i}", rng, d, config.heads, dtype)
    L.init_layer_norm(p, "dec.norm", d, dtype)
    L.init_linear(p, "head", rng, d, c, dtype=dtype)
    if config.uses_history:
        L.init_linear(p, "hist.phase", rng, c, d, bias=False, dtype=dtype)
        p["hist.mask"] = T.Tensor(L.trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)
        p["hist.query"] = T.Tensor(L.trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)
        for i in range(MEMORY_DEPTH):
            L.init_block(p, f"hist.{i}", rng, d, config.heads, dtype)
    if config.uses_impressions:
        p["imp.token"] = T.Tensor(L.trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)
        for i in range(MEMORY_DEPTH):
            L.init_block(p, f"imp.{i}", rng, d, config.heads, dtype)
    return p


def cast_params(params, dtype):
    return {k: T.Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
            for k, v in params.items()}


def copy_params(params):
    return {k: T.Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}


def _const(array, like):
    return T.Tensor(np.asarray(array, dtype=like.dtype))


def _learned_row(param, batch, rows=1):
    d = param.shape[0]
    return T.expand(T.reshape(param, (1, 1, d)), (batch, rows, d))


# ------------------------------------------------------------------- patches

def patchify(windows, config):
    """(B, T, ch, H, W) frames -> (B, T * P, ch * p * p) flattened patches."""
    b, t, ch, h, w = windows.shape
    p = config.patch_size
    g = h // p
    x = windows.reshape(b, t, ch, g, p, g, p).transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, t * g * g, ch * p * p)


def _check_windows(windows, config):
    want = (config.window, config.channels, config.image_size, config.image_size)
    if windows.ndim != 5 or windows.shape[1:] != want:
        raise InputError(f"window batch has shape {windows.shape}, expected (batch,) + {want}")


def patch_embed(params, config, windows):
    """Patch tokens plus spatial and temporal position embeddings, (B, T*P, d)."""
    windows = np.asarray(windows)
    _check_windows(windows, config)
    like = params["cls"]
    b = windows.shape[0]
    n_t, n_p, d = config.window, config.patches_per_frame, config.d
    tokens = T.linear(_const(patchify(windows, config), like), params["patch.w"],
                      params["patch.b"])
    space = T.expand(T.reshape(params["pos.space"], (1, n_p, d)), (n_t, n_p, d))
    time = T.expand(T.reshape(params["pos.time"], (n_t, 1, d)), (n_t, n_p, d))
    pos = T.reshape(T.add(space, time), (1, n_t * n_p, d))
    return T.add(tokens, T.expand(pos, (b, n_t * n_p, d)))


# -------------------------------------------------------------------- memory

def history_tokens(params, config, entries):
    """Encode a batch of history entry matrices (B, C, C+2) into (B, d) tokens."""
    entries = np.asarray(entries)
    c, d = config.n_phases, config.d
    if entries.ndim != 3 or entries.shape[1:] != (c, c + 2):
        raise ConfigError(f"history entries have shape {entries.shape}, model expects "
                          f"(batch, {c}, {c + 2})")
    like = params["cls"]
    b = entries.shape[0]
    phase = T.linear(_const(entries[:, :, :c], like), params["hist.phase.w"])
    steps = _const(L.sinusoidal_encoding(entries[:, :, c], d), like)
    mask = T.linear(_const(entries[:, :, c + 1:], like), T.reshape(params["hist.mask"], (1, d)))
    rows = T.add(T.add(phase, steps), mask)
    x = T.concat([rows, _learned_row(params["hist.query"], b)], axis=1)
    # rows with mask 0 are invisible to every token, so an erased phase is gone
    visible = np.concatenate([entries[:, :, c + 1], np.ones((b, 1))], axis=1)
    for i in range(MEMORY_DEPTH):
        x = L.mhsa_block(x, params, f"hist.{i}", config.heads, key_mask=visible)
    return T.take(x, c, axis=1)


def impression_tokens(params, config, impressions):
    """Encode cached cls vectors (B, K, d) into (B, d) impression tokens."""
    impressions = np.asarray(impressions)
    if impressions.ndim != 3 or impressions.shape[2] != config.d:
        raise InputError(f"impressions have shape {impressions.shape}, expected "
                         f"(batch, k, {config.d})")
    like = params["cls"]
    b, k, _ = impressions.shape
    x = T.concat([_const(impressions, like), _learned_row(params["imp.token"], b)], axis=1)
    for i in range(MEMORY_DEPTH):
        x = L.mhsa_block(x, params, f"imp.{i}", config.heads)
    return T.take(x, k, axis=1)


def history_token(params, config, history):
    if history.n_phases != config.n_phases:
        raise ConfigError(f"history has {history.n_phases} phases, model expects "
                          f"{config.n_phases}")
    return history_tokens(params, config, entry_matrix(history)[None])


def impression_token(params, config, impressions):
    return impression_tokens(params, config, np.asarray(impressions)[None])


# ------------------------------------------------------------------- forward

def forward_batch(params, config, windows, entries=None, impressions=None, hooks=None):
    """Batched forward pass.

    Returns ``(logits, cls_final)`` as tensors of shape (B, C) and (B, d).
    ``entries``/``impressions`` are ignored when the memory mode does not use
    them.  ``hooks`` (a dict) receives intermediate arrays for inspection.
    """
    tokens = patch_embed(params, config, windows)
    b, d = tokens.shape[0], config.d
    cls = T.reshape(_learned_row(params["cls"], b), (b, d))
    if config.uses_history:
        if entries is None:
            raise InputError("mem_mode uses history but no history entries were given")
        h = history_tokens(params, config, entries)
        cls = T.add(cls, h)
        if hooks is not None:
            hooks["history_token"] = h.data
    if hooks is not None:
        hooks["cls_fused"] = cls.data
    x = T.concat([T.reshape(cls, (b, 1, d)), tokens], axis=1)
    for i in range(config.depth):
        x = L.mhsa_block(x, params, f"dec.{i}", config.heads)
    x = L.apply_layer_norm(x, params, "dec.norm")
    cls_out = T.take(x, 0, axis=1)
    if hooks is not None:
        hooks["cls_decoded"] = cls_out.data
    if config.uses_impressions:
        if impressions is None:
            raise InputError("mem_mode uses impressions but none were given")
        cls_out = T.add(cls_out, impression_tokens(params, config, impressions))
    logits = T.linear(cls_out, params["head.w"], params["head.b"])
    return logits, cls_out


def forward(params, config, window, history=None, impressions=None, hooks=None):
    """Single-window forward; returns ``(logits (C,), cls_final (d,))`` tensors."""
    entries = None
    if config.uses_history:
        if history is None:
            history = HistoryState.empty(config.n_phases, config.step_size)
        if history.n_phases != config.n_phases:
            raise ConfigError(f"history has {history.n_phases} phases, model expects "
                              f"{config.n_phases}")
        entries = entry_matrix(history)[None]
    imps = None
    if config.uses_impressions:
        if impressions is None:
            impressions = np.zeros((len(config.intervals), config.d))
        imps = np.asarray(impressions)[None]
    logits, cls = forward_batch(params, config, np.asarray(window)[None], entries, imps, hooks)
    return T.reshape(logits, (config.n_phases,)), T.reshape(cls, (config.d,))


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"PHMCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(params, config, path):
    """Write ``[magic][version byte][u64 header length][JSON header][payload]``.

    The payload is each parameter, in header order, as little-endian float32.
    """
    entries, blobs = [], []
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": config.to_dict(),
                         "params": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_config=None):
    """Read a checkpoint; returns ``(params, config)`` with bit-exact values."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}", field=str(path)) from exc
    n = len(CHECKPOINT_MAGIC)
    if raw[:n] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", field="magic")
    if len(raw) < n + 9:
        raise FormatError(f"{path}: truncated before header", field="header")
    version = raw[n]
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}",
                                      field="version")
    (hlen,) = struct.unpack("<Q", raw[n + 1:n + 9])
    start = n + 9
    if len(raw) < start + hlen:
        raise FormatError(f"{path}: truncated header", field="header")
    try:
        header = json.loads(raw[start:start + hlen].decode())
        config = ModelConfig.from_dict(header["config"]).validate()
        declared = header["params"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})", field="header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: header version {header.get('version')}",
                                      field="version")
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = [k for k, v in config.to_dict().items() if expected_config.to_dict()[k] != v]
        raise FormatError(f"{path}: checkpoint config differs in {diff}", field="config")

    template = init_params(config, 0)
    names = [e["name"] for e in declared]
    if names != list(template):
        extra = sorted(set(names) ^ set(template))
        raise FormatError(f"{path}: parameter set does not match config ({extra[:3]})",
                          field=extra[0] if extra else "params")
    params = {}
    offset = start + hlen
    for entry in declared:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != template[name].shape:
            raise FormatError(f"{path}: parameter {name} has shape {shape}, config implies "
                              f"{template[name].shape}", field=name)
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload in parameter {name}", field=name)
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset)
        params[name] = T.Tensor(arr.reshape(shape).astype(np.float32), requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} unexpected trailing bytes",
                          field="payload")
    return params, config


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def param_count(params):
    return int(sum(p.data.size for p in params.values()))

