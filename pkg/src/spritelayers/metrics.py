"""Segmentation and clustering metrics.

All metrics operate on integer label maps (numpy arrays). Instance maps
use 0 for background and arbitrary positive ids per object; semantic maps
use 0 for background and class ids otherwise. ARI is computed per image
and averaged over the evaluation set; semantic scores aggregate one
global confusion matrix over the whole set before the cluster-to-class
assignment.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.optimize import linear_sum_assignment


def contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Joint count matrix of two flat integer label arrays."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError("label arrays must have the same size")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na, nb = ai.max() + 1, bi.max() + 1
    return np.bincount(ai * nb + bi, minlength=na * nb).reshape(na, nb)


def ari(pred: np.ndarray, gt: np.ndarray, pixel_filter: np.ndarray | None = None
        ) -> float | None:
    """Adjusted Rand index between two labelings, optionally on a pixel subset.

    Returns None when the filter selects fewer than two pixels (undefined).
    Both-trivial partitions (a single cluster on each side, or all
    singletons) have no adjusted scale and score 1.0 by convention.
    """
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pixel_filter is not None:
        keep = np.asarray(pixel_filter).ravel().astype(bool)
        pred, gt = pred[keep], gt[keep]
    n = pred.size
    if n < 2:
        return None
    c = contingency(pred, gt).astype(np.float64)
    sum_cells = (c * (c - 1)).sum() / 2
    a = c.sum(axis=1)
    b = c.sum(axis=0)
    sum_a = (a * (a - 1)).sum() / 2
    sum_b = (b * (b - 1)).sum() / 2
    total_pairs = n * (n - 1) / 2
    expected = sum_a * sum_b / total_pairs
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def reassign_background(pred_instance: np.ndarray, gt_foreground: np.ndarray
                        ) -> np.ndarray:
    """Relabel predicted-background pixels inside the GT foreground.

    Each such pixel takes the label of the nearest predicted object pixel
    (Euclidean distance; ties prefer the lower instance id). When nothing
    is predicted as object, those pixels form one fallback cluster (-1).
    """
    pred = np.asarray(pred_instance)
    fg = np.asarray(gt_foreground).astype(bool)
    out = pred.copy()
    holes = (pred == 0) & fg
    if not holes.any():
        return out
    labels = np.unique(pred)
    labels = labels[labels > 0]
    if labels.size == 0:
        out[holes] = -1
        return out
    dists = np.stack([distance_transform_edt(pred != lab) for lab in labels])
    nearest = labels[np.argmin(dists, axis=0)]  # argmin ties -> lower id
    out[holes] = nearest[holes]
    return out


def ari_fg(pred_instance: np.ndarray, gt_instance: np.ndarray,
           reassign: bool = True) -> float | None:
    """ARI restricted to GT-foreground pixels, with background reassignment."""
    gt = np.asarray(gt_instance)
    fg = gt > 0
    pred = np.asarray(pred_instance)
    if reassign:
        pred = reassign_background(pred, fg)
    return ari(pred, gt, pixel_filter=fg)


def hungarian_mapping(confusion: np.ndarray) -> dict[int, int]:
    """Cluster-to-class assignment maximizing the matched mass."""
    conf = np.asarray(confusion)
    rows, cols = linear_sum_assignment(-conf)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def semantic_confusion(pred: np.ndarray, gt: np.ndarray, n_pred: int,
                       n_classes: int) -> np.ndarray:
    """Pixel confusion counts [n_pred, n_classes] for one or more maps."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth must have the same size")
    return np.bincount(pred * n_classes + gt,
                       minlength=n_pred * n_classes).reshape(n_pred, n_classes)


def semantic_scores(confusion: np.ndarray) -> tuple[float, float]:
    """(mACC, mIoU) from a global confusion matrix, background included.

    The confusion matrix is reordered by the optimal cluster-to-class
    assignment first; classes absent from both sides are dropped from the
    means.
    """
    conf = np.asarray(confusion, dtype=np.float64)
    mapping = hungarian_mapping(conf)
    class_to_cluster = {c: r for r, c in mapping.items()}
    n_classes = conf.shape[1]
    accs, ious = [], []
    for c in range(n_classes):
        gt_total = conf[:, c].sum()
        r = class_to_cluster.get(c)
        pred_total = conf[r].sum() if r is not None else 0.0
        if gt_total == 0 and pred_total == 0:
            continue
        hit = conf[r, c] if r is not None else 0.0
        accs.append(hit / gt_total if gt_total > 0 else 0.0)
        union = gt_total + pred_total - hit
        ious.append(hit / union if union > 0 else 0.0)
    if not accs:
        raise ValueError("empty confusion matrix")
    return float(np.mean(accs)), float(np.mean(ious))


def clustering_accuracy(assignments: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy under the optimal cluster-to-class mapping."""
    assignments = np.asarray(assignments).ravel()
    labels = np.asarray(labels).ravel()
    if assignments.shape != labels.shape:
        raise ValueError("assignments and labels must have the same length")
    conf = contingency(assignments, labels)
    rows, cols = linear_sum_assignment(-conf)
    return float(conf[rows, cols].sum() / conf.sum())
