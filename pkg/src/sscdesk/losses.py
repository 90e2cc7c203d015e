"""Training objective: weighted cross-entropy, scene-class affinity losses and
the depth loss, combined with a small weight on the depth term."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import AllIgnored, NonFinitePart, ShapeMismatch
from .geometry import CameraModel
from .tensor import Tensor

IGNORE = 255
LAMBDA_DEPTH = 0.001
# keeps soft ratios away from exactly zero; ratios of equal sums stay exactly 1
RATIO_EPS = 1e-12
PROB_EPS = 1e-12


@dataclass
class ClassWeighting:
    weights: np.ndarray
    ignore_label: int = IGNORE

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise ValueError("class weights must be finite and positive")

    @classmethod
    def uniform(cls, num_classes):
        return cls(np.ones(num_classes))

    @classmethod
    def from_grids(cls, grids, num_classes, ignore_label=IGNORE):
        """``1 / log(1.02 + frequency)`` over the non-ignored voxels of ``grids``."""
        counts = np.zeros(num_classes)
        for labels in grids:
            labels = np.asarray(labels).reshape(-1)
            labels = labels[labels != ignore_label]
            counts += np.bincount(labels, minlength=num_classes)[:num_classes]
        freq = counts / max(counts.sum(), 1.0)
        return cls(1.0 / np.log(1.02 + freq), ignore_label)


@dataclass
class LossBreakdown:
    ce: float
    scal_geo: float
    scal_sem: float
    depth: float
    total: float
    lambda_depth: float = LAMBDA_DEPTH
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def row(self):
        return (self.total, self.ce, self.scal_geo, self.scal_sem, self.depth)


def _flatten(logits, target, ignore):
    target = np.asarray(target)
    if tuple(logits.shape[:-1]) != target.shape:
        raise ShapeMismatch(f"logits {logits.shape} do not match target {target.shape}")
    K = logits.shape[-1]
    flat_t = target.reshape(-1).astype(np.int64)
    valid = flat_t != ignore
    if not valid.any():
        raise AllIgnored("every voxel carries the ignore label")
    return logits.reshape(-1, K), flat_t, valid


def weighted_cross_entropy(logits, target, weighting: ClassWeighting | None = None):
    """Weighted mean of per-voxel negative log-likelihoods.

    The mean divides by the summed weights of the contributing voxels, so
    uniform weights of any scale give the plain mean.
    """
    logits = T.as_tensor(logits)
    K = logits.shape[-1]
    weighting = weighting or ClassWeighting.uniform(K)
    flat, t, valid = _flatten(logits, target, weighting.ignore_label)
    w = np.where(valid, weighting.weights[np.where(valid, t, 0)], 0.0)
    pick = np.zeros((t.size, K))
    pick[np.flatnonzero(valid), t[valid]] = w[valid]
    pick = pick.astype(logits.dtype)
    return -(T.log_softmax(flat, axis=-1) * pick).sum() * (1.0 / w.sum())


def _neg_log_ratio(num, den):
    return -((num + RATIO_EPS) / (den + RATIO_EPS)).log()


def _prf_terms(p, t):
    """-log soft precision, recall and specificity of probabilities ``p`` for binary target ``t``."""
    n_pos = t.sum()
    n_neg = t.size - n_pos
    tt = t.astype(p.dtype)
    inter = (p * tt).sum()
    loss = None
    terms = []
    if n_pos > 0:
        terms.append(_neg_log_ratio(inter, p.sum()))
        terms.append(_neg_log_ratio(inter, float(n_pos)))
    if n_neg > 0:
        terms.append(_neg_log_ratio(((1.0 - p) * (1.0 - tt)).sum(), float(n_neg)))
    for term in terms:
        loss = term if loss is None else loss + term
    return loss


def scal_loss(logits, target, mode="sem", ignore_label=IGNORE):
    """Scene-class affinity loss on soft precision / recall / specificity.

    ``sem`` averages the three terms over the classes present in the target.
    ``geo`` scores the occupied-vs-free split (any non-zero class is
    occupied) from the free-class probability.
    """
    logits = T.as_tensor(logits)
    flat, t, valid = _flatten(logits, target, ignore_label)
    rows = np.flatnonzero(valid)
    probs = T.take(T.softmax(flat, axis=-1), rows)
    t = t[rows]
    K = logits.shape[-1]
    if mode == "geo":
        occupied = 1.0 - T.take(probs, np.array(0), axis=1)
        loss = _prf_terms(occupied, t != 0)
        return loss if loss is not None else Tensor(np.zeros((), dtype=logits.dtype))
    if mode != "sem":
        raise ValueError(f"unknown scal mode {mode!r}")
    total, count = None, 0
    for k in range(K):
        tk = t == k
        if not tk.any():
            continue
        term = _prf_terms(T.take(probs, np.array(k), axis=1), tk)
        total = term if total is None else total + term
        count += 1
    return total * (1.0 / count)


def depth_bin_targets(gt_depth, cam: CameraModel):
    """Nearest depth bin per pixel (midpoint ties go to the lower bin) and a validity mask."""
    gt = np.asarray(gt_depth, dtype=np.float64)
    valid = (gt > 0) & (gt >= cam.d_min) & (gt <= cam.d_max)
    b = cam.depth_to_bin(np.where(valid, gt, cam.d_min))
    bins = np.clip(np.ceil(b - 0.5), 0, cam.depth_bins - 1).astype(np.int64)
    return bins, valid


def depth_loss(prob, gt_depth, cam: CameraModel):
    """Mean cross-entropy between the depth distribution and the one-hot ground-truth bin."""
    prob = T.as_tensor(prob)
    H, W, D = prob.shape
    if (H, W) != np.shape(gt_depth) or D != cam.depth_bins:
        raise ShapeMismatch(f"depth probability {prob.shape} vs ground truth {np.shape(gt_depth)}")
    bins, valid = depth_bin_targets(gt_depth, cam)
    if not valid.any():
        raise AllIgnored("no pixel has a valid in-range depth")
    rows = np.flatnonzero(valid.reshape(-1))
    picked = T.take(prob.reshape(H * W * D), rows * D + bins.reshape(-1)[rows])
    picked = picked * (1.0 - PROB_EPS) + PROB_EPS
    return -picked.log().mean()


def total_loss(ce, scal_geo, scal_sem, depth, lambda_depth=LAMBDA_DEPTH) -> LossBreakdown:
    parts = {"ce": ce, "scal_geo": scal_geo, "scal_sem": scal_sem, "depth": depth}
    values = {}
    for name, part in parts.items():
        v = part.item() if isinstance(part, Tensor) else float(part)
        if not np.isfinite(v):
            raise NonFinitePart(f"loss part {name} is not finite")
        values[name] = v
    total = depth * lambda_depth + ce + scal_geo + scal_sem
    total_t = total if isinstance(total, Tensor) else None
    total_v = total.item() if isinstance(total, Tensor) else float(total)
    return LossBreakdown(values["ce"], values["scal_geo"], values["scal_sem"], values["depth"], total_v,
                         lambda_depth, total_t)
