"""Pixel-wise cross-entropy, the multi-term training objective, and metrics."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .autodiff import Node, Tape
from .tensor import ShapeError, Tensor

IGNORE_LABEL = 255


def downsample_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resampling of an (N, H, W) label grid.

    Each output cell takes the label of the input pixel containing its centre.
    """
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    if (h, w) == (out_h, out_w):
        return labels
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return labels[..., ys[:, None], xs[None, :]]


def upsample_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return downsample_labels(labels, out_h, out_w)


def cross_entropy(tape: Tape, scores: Node, labels: np.ndarray) -> Node:
    """Mean of -log softmax(scores)[label] over pixels whose label is not 255."""
    n, c, h, w = scores.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match scores {(n, h, w)}")
    valid = labels != IGNORE_LABEL
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: every pixel is ignored")
    if np.any(labels[valid] >= c) or np.any(labels[valid] < 0):
        raise ValueError(f"labels must lie in [0, {c - 1}] or equal {IGNORE_LABEL}")
    safe = np.where(valid, labels, 0).astype(np.int64)
    logp = T.log_softmax_channels(scores.value).data
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum(dtype=np.float64) / count
    dtype = scores.value.dtype
    out = Tensor(np.array([loss]), dtype=dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
        grad *= valid[:, None]
        return ((grad * (g.reshape(()) / count)).astype(dtype, copy=False),)

    return tape.record("cross_entropy", (scores,), out, backward)


def total_loss(tape: Tape, stream_scores: Sequence[Node], final_scores: Node,
               labels: np.ndarray) -> tuple[Node, list[Node]]:
    """Unweighted sum of one cross-entropy per stream plus one for the fused map.

    Returns the total and the individual terms ordered (final, stream 1, ...).
    """
    h, w = final_scores.shape[2:]
    target = downsample_labels(labels, h, w)
    terms = [cross_entropy(tape, final_scores, target)]
    terms += [cross_entropy(tape, p, target) for p in stream_scores]
    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return total, terms


def predict_labels(scores: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over classes; ties go to the lowest class index."""
    return np.argmax(scores, axis=1)


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, n_class: int,
                         cm: np.ndarray | None = None) -> np.ndarray:
    """Add counts to ``cm[g, p]``; ground-truth 255 pixels are skipped."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    keep = gt != IGNORE_LABEL
    g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
    if g.size and (g.max() >= n_class or p.max() >= n_class or min(g.min(), p.min()) < 0):
        raise ValueError(f"labels out of range for {n_class} classes")
    counts = np.bincount(g * n_class + p, minlength=n_class * n_class).reshape(n_class, n_class)
    if cm is None:
        return counts
    return cm + counts


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both GT and prediction."""
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), np.nan)


def miou(cm: np.ndarray) -> float:
    if np.sum(cm) == 0:
        raise ValueError("empty confusion matrix")
    return float(np.nanmean(per_class_iou(cm)))


def pixel_accuracy(cm: np.ndarray) -> float:
    total = np.sum(cm)
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def metrics_report(cm: np.ndarray) -> dict:
    ious = per_class_iou(cm)
    out = {"miou": miou(cm), "pixel_accuracy": pixel_accuracy(cm), "pixels": int(np.sum(cm))}
    for c, v in enumerate(ious):
        out[f"iou_class{c}"] = float(v)
    return out


def format_table(report: dict) -> str:
    lines = [f"{'metric':<16}{'value':>10}", "-" * 26]
    for key, value in report.items():
        if isinstance(value, float):
            shown = "n/a" if np.isnan(value) else f"{value:.4f}"
        else:
            shown = str(value)
        lines.append(f"{key:<16}{shown:>10}")
    return "\n".join(lines) + "\n"


def format_keyvalue(report: dict) -> str:
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in report.items())
