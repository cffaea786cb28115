"""Frame-level phase recognition metrics.

Two phase-level protocols are provided:

``concat``
    Predictions and labels of all videos are concatenated into one
    sequence; precision, recall and Jaccard are computed per phase from a
    single confusion matrix and averaged (unweighted) over phases.

``per_video``
    Precision, recall and F1 are computed per phase inside each video,
    averaged over phases to a video score, then averaged over videos.

Undefined ratios: a phase that occurs in neither the ground truth nor the
prediction of the evaluated sequence is skipped.  A phase that occurs in
either one contributes 0 for any ratio whose denominator is zero.

Video-level accuracy is reported as mean and *population* standard
deviation of per-video frame accuracy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError

logger = logging.getLogger(__name__)

PROTOCOLS = ("concat", "per_video")


def confusion_matrix(gt, pred, n_phases):
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gt.shape != pred.shape:
        raise InputError(f"ground truth has {gt.size} frames, prediction {pred.size}")
    if gt.size and (min(gt.min(), pred.min()) < 0 or max(gt.max(), pred.max()) >= n_phases):
        raise InputError(f"labels must lie in [0, {n_phases})")
    flat = np.bincount(gt * n_phases + pred, minlength=n_phases * n_phases)
    return flat.reshape(n_phases, n_phases)


def _ratio(num, den):
    return num / den if den > 0 else 0.0


def per_phase_scores(cm):
    """Per-phase dict of precision/recall/jaccard/f1 for phases present in ``cm``."""
    tp = np.diag(cm)
    n_pred = cm.sum(axis=0)
    n_gt = cm.sum(axis=1)
    out = {}
    for p in range(cm.shape[0]):
        if n_gt[p] == 0 and n_pred[p] == 0:
            continue
        fp, fn = n_pred[p] - tp[p], n_gt[p] - tp[p]
        prec = _ratio(tp[p], tp[p] + fp)
        rec = _ratio(tp[p], tp[p] + fn)
        out[p] = {"precision": float(prec), "recall": float(rec),
                  "jaccard": float(_ratio(tp[p], tp[p] + fp + fn)),
                  "f1": float(_ratio(2 * prec * rec, prec + rec))}
    return out


def video_accuracy(videos):
    """Mean and population std of per-video accuracy over ``[(gt, pred), ...]``."""
    accs = []
    for i, (gt, pred) in enumerate(videos):
        gt, pred = np.asarray(gt), np.asarray(pred)
        if gt.shape != pred.shape:
            raise InputError(f"video {i}: {gt.size} labels vs {pred.size} predictions")
        if gt.size == 0:
            logger.warning("video %d has no frames; skipped", i)
            continue
        accs.append(float(np.mean(gt == pred)))
    if not accs:
        raise InputError("video_accuracy needs at least one non-empty video")
    return float(np.mean(accs)), float(np.std(accs))


@dataclass
class EvalReport:
    protocol: str
    video_accuracy_mean: float
    video_accuracy_std: float
    precision: float
    recall: float
    jaccard_or_f1: float
    per_phase: dict = field(default_factory=dict)
    n_videos: int = 0
    n_frames: int = 0

    def to_dict(self):
        out = asdict(self)
        out["per_phase"] = {str(k): v for k, v in self.per_phase.items()}
        return out

    def to_json(self, **extra):
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True)

    def table(self):
        score = "jaccard" if self.protocol == "concat" else "f1"
        lines = [f"protocol {self.protocol}: {self.n_videos} videos, {self.n_frames} frames",
                 f"video accuracy  {100 * self.video_accuracy_mean:6.2f} "
                 f"+/- {100 * self.video_accuracy_std:.2f}",
                 f"{'phase':>6} {'prec':>7} {'rec':>7} {score:>7}"]
        for p in sorted(self.per_phase):
            s = self.per_phase[p]
            lines.append(f"{p:>6} {100 * s['precision']:7.2f} {100 * s['recall']:7.2f} "
                         f"{100 * s[score]:7.2f}")
        lines.append(f"{'mean':>6} {100 * self.precision:7.2f} {100 * self.recall:7.2f} "
                     f"{100 * self.jaccard_or_f1:7.2f}")
        return "\n".join(lines)


def _prepare(videos):
    videos = [(np.asarray(g, dtype=np.int64), np.asarray(p, dtype=np.int64)) for g, p in videos]
    if not videos:
        raise InputError("no videos to evaluate")
    return videos


def phase_metrics_concat(videos, n_phases):
    videos = _prepare(videos)
    gt = np.concatenate([g for g, _ in videos])
    pred = np.concatenate([p for _, p in videos])
    scores = per_phase_scores(confusion_matrix(gt, pred, n_phases))
    mean, std = video_accuracy(videos)
    keys = ("precision", "recall", "jaccard")
    avg = {k: float(np.mean([s[k] for s in scores.values()])) if scores else 0.0 for k in keys}
    return EvalReport("concat", mean, std, avg["precision"], avg["recall"], avg["jaccard"],
                      scores, len(videos), int(gt.size))


def phase_metrics_per_video(videos, n_phases):
    videos = _prepare(videos)
    keys = ("precision", "recall", "f1")
    per_video = []
    phase_sums = {}
    for gt, pred in videos:
        if gt.size == 0:
            continue
        scores = per_phase_scores(confusion_matrix(gt, pred, n_phases))
        per_video.append({k: np.mean([s[k] for s in scores.values()]) for k in keys})
        for p, s in scores.items():
            phase_sums.setdefault(p, []).append(s)
    mean, std = video_accuracy(videos)
    avg = {k: float(np.mean([v[k] for v in per_video])) for k in keys}
    per_phase = {p: {k: float(np.mean([s[k] for s in lst]))
                     for k in ("precision", "recall", "jaccard", "f1")}
                 for p, lst in sorted(phase_sums.items())}
    return EvalReport("per_video", mean, std, avg["precision"], avg["recall"], avg["f1"],
                      per_phase, len(videos), int(sum(g.size for g, _ in videos)))


def evaluate(videos, n_phases, protocol="concat"):
    if protocol == "concat":
        return phase_metrics_concat(videos, n_phases)
    if protocol == "per_video":
        return phase_metrics_per_video(videos, n_phases)
    raise InputError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
