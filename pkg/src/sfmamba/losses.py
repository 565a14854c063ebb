"""Loss stack: smoothed source CE, information maximization (entropy +
diversity), pseudo-label CE and KL consistency on the selected subset, and
their unweighted sum for the target phase. All log terms go through
log-sum-exp. Inputs are logits on the active tape; labels and masks are
plain integer/bool arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    add,
    as_tensor,
    gather,
    log,
    log_softmax,
    mul,
    reshape,
    softmax,
    sub,
    tensor_mean,
    tensor_sum,
)


def label_smoothed_ce(logits, labels, alpha):
    """-mean_B sum_c y~_c log p_c with y~_c = (1-alpha) 1[c=y] + alpha/C."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    nb, nc = logits.shape
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"label smoothing alpha must be in [0, 1), got {alpha}")
    if labels.shape != (nb,) or labels.min() < 0 or labels.max() >= nc:
        raise ValueError(f"labels out of range for {nc} classes")
    smooth = np.full((nb, nc), alpha / nc)
    smooth[np.arange(nb), labels] += 1.0 - alpha
    lp = log_softmax(logits)
    return mul(tensor_mean(tensor_sum(mul(lp, Tensor(smooth)), axis=-1)), -1.0)


def entropy_loss(logits):
    """Mean per-sample prediction entropy, in [0, log C]."""
    logits = as_tensor(logits)
    p = softmax(logits)
    lp = log_softmax(logits)
    return mul(tensor_mean(tensor_sum(mul(p, lp), axis=-1)), -1.0)


def diversity_loss(logits):
    """sum_c phat_c log phat_c for the batch-mean prediction phat; in [-log C, 0]."""
    logits = as_tensor(logits)
    phat = tensor_mean(softmax(logits), axis=0)  # (C,), strictly positive
    return tensor_sum(mul(phat, log(phat)))


def pseudo_ce(logits, pseudo_labels, selected):
    """-mean over selected samples of log p_{y^}; (loss, n_selected)."""
    logits = as_tensor(logits)
    labels = np.asarray(pseudo_labels)
    mask = np.asarray(selected, dtype=bool)
    nb, nc = logits.shape
    n_sel = int(mask.sum())
    if n_sel == 0:
        return Tensor(0.0), 0
    if labels.min() < 0 or labels.max() >= nc:
        raise ValueError(f"pseudo labels out of range for {nc} classes")
    lp = log_softmax(logits)
    picked = reshape(gather(lp, labels.reshape(nb, 1), axis=1), (nb,))
    masked = mul(picked, Tensor(mask.astype(np.float64)))
    return mul(tensor_sum(masked), -1.0 / n_sel), n_sel


def kl_consistency(logits_orig, logits_pert, selected):
    """Mean over selected of KL(p || q), p/q = softmax of original/perturbed.

    Gradients flow through both branches (no stop-gradient, no temperature).
    """
    logits_orig, logits_pert = as_tensor(logits_orig), as_tensor(logits_pert)
    if logits_orig.shape != logits_pert.shape:
        raise ValueError(
            f"kl_consistency: shapes {logits_orig.shape} and {logits_pert.shape} differ"
        )
    mask = np.asarray(selected, dtype=bool)
    n_sel = int(mask.sum())
    if n_sel == 0:
        return Tensor(0.0)
    p = softmax(logits_orig)
    diff = sub(log_softmax(logits_orig), log_softmax(logits_pert))
    per_sample = tensor_sum(mul(p, diff), axis=-1)
    masked = mul(per_sample, Tensor(mask.astype(np.float64)))
    return mul(tensor_sum(masked), 1.0 / n_sel)


def total_target_loss(kl, ent, div, ce):
    """L = kl + ent + div + ce, exactly the unweighted sum."""
    return add(add(kl, ent), add(div, ce))


@dataclass
class LossBreakdown:
    lce: float = 0.0
    ent: float = 0.0
    div: float = 0.0
    ce: float = 0.0
    kl: float = 0.0
    total: float = 0.0
    batch_size: int = 0
    n_selected: int = 0

    def json_line(self, step, **extra):
        rec = {
            "step": step,
            "lce": self.lce,
            "ent": self.ent,
            "div": self.div,
            "ce": self.ce,
            "kl": self.kl,
            "total": self.total,
            "n_selected": self.n_selected,
        }
        rec.update(extra)
        return json.dumps(rec)
