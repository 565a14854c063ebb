"""Semantic-consistent shuffle: class-activation scoring of patches,
bottom-percentile background selection, and in-place permutation of the
background token embeddings to build the perturbed sequence.

Activation scoring runs on a throwaway tape so attribution gradients never
reach parameter updates. Plans are per sample and deterministic under their
recorded seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import as_tensor, backward, gather, slice_axis, tape_scope, tensor_sum


@dataclass
class ActivationMap:
    scores: np.ndarray  # (H, W), post-ReLU, all >= 0
    target_class: int


@dataclass
class ShufflePlan:
    background_indices: np.ndarray  # sorted patch ids, len = floor(gamma/100 * T)
    permutation: np.ndarray         # bijection over positions of background_indices
    seed: int


def grad_cam(tape, feature_map, logits, target_class):
    """Channel weights = spatial mean of d logit[target]/d map; score =
    ReLU(sum_d w_d A_d). `feature_map` (D, H, W) and `logits` (C,), possibly
    with a leading batch-1 axis, must come from a forward recorded on `tape`."""
    logits = as_tensor(logits)
    fmap = as_tensor(feature_map)
    if fmap.data.ndim == 4 and fmap.shape[0] != 1:
        raise ValueError("grad_cam takes one sample; use grad_cam_batch for batches")
    n_classes = logits.shape[-1]
    if not 0 <= target_class < n_classes:
        raise ValueError(f"target class {target_class} out of range for {n_classes} classes")
    with tape_scope(tape):  # score extraction joins the forward's tape
        score = tensor_sum(slice_axis(logits, -1, target_class, target_class + 1))
    grad = backward(score, tape, wrt=[fmap])[fmap.tid].data
    grad = grad[0] if grad.ndim == 4 else grad
    amap = fmap.data[0] if fmap.data.ndim == 4 else fmap.data
    weights = grad.mean(axis=(-2, -1))  # (D,)
    cam = np.maximum(np.einsum("d,dhw->hw", weights, amap), 0.0)
    return ActivationMap(scores=cam, target_class=int(target_class))


def grad_cam_batch(tape, feature_map, logits, target_classes):
    """Per-sample activation maps from one batched backward pass.

    Sums the per-sample target logits into one scalar; valid when samples do
    not interact in the forward (eval-mode batch statistics)."""
    fmap = as_tensor(feature_map)  # (B, D, H, W)
    logits = as_tensor(logits)     # (B, C)
    labels = np.asarray(target_classes)
    nb, nc = logits.shape
    if labels.shape != (nb,) or labels.min() < 0 or labels.max() >= nc:
        raise ValueError(f"target classes out of range for {nc} classes")
    with tape_scope(tape):
        score = tensor_sum(gather(logits, labels.reshape(nb, 1), axis=1))
    grad = backward(score, tape, wrt=[fmap])[fmap.tid].data
    weights = grad.mean(axis=(-2, -1))  # (B, D)
    cams = np.maximum(np.einsum("bd,bdhw->bhw", weights, fmap.data), 0.0)
    return [ActivationMap(scores=cams[i], target_class=int(labels[i])) for i in range(nb)]


def select_background(amap, gamma):
    """Sorted ids of the floor(gamma/100 * T) lowest-scored patches; score
    ties resolve to the lowest patch index."""
    if not 0 <= gamma <= 100:
        raise ValueError(f"gamma must be in [0, 100], got {gamma}")
    flat = amap.scores.ravel()
    count = int(np.floor(gamma / 100.0 * flat.size))
    order = np.argsort(flat, kind="stable")
    return np.sort(order[:count])


def make_plan(amap, gamma, seed):
    """Background selection plus a Fisher-Yates permutation over it."""
    background = select_background(amap, gamma)
    rng = np.random.default_rng(seed)
    perm = np.arange(len(background))
    for i in range(len(background) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return ShufflePlan(background_indices=background, permutation=perm, seed=int(seed))


def plan_index_map(plan, n_tokens):
    """Token gather order realizing the plan: identity except the background
    positions, which take each other's tokens."""
    bg = plan.background_indices
    if len(bg) and (bg.min() < 0 or bg.max() >= n_tokens):
        raise ValueError(f"plan indices out of range for {n_tokens} tokens")
    idx = np.arange(n_tokens)
    idx[bg] = bg[plan.permutation]
    return idx


def shuffle_background(tokens, plan):
    """Fresh sequence with background tokens permuted per the plan; the
    input sequence is untouched and foreground entries are bit-identical."""
    tokens = as_tensor(tokens)
    idx = plan_index_map(plan, tokens.shape[-2])
    return gather(tokens, idx, axis=tokens.data.ndim - 2)


def batch_shuffle(tokens, plans):
    """Apply one plan per sample to a (B, T, D) token batch in a single
    gradient-tracked gather."""
    tokens = as_tensor(tokens)
    nb, nt, _ = tokens.shape
    if len(plans) != nb:
        raise ValueError(f"{len(plans)} plans for batch of {nb}")
    idx = np.stack([plan_index_map(p, nt) for p in plans])
    return gather(tokens, idx[:, :, None], axis=1)


def save_heatmap_pgm(path, scores):
    """ASCII PGM (P2) dump of an activation map scaled to 0..255."""
    arr = np.asarray(scores, dtype=np.float64)
    peak = arr.max()
    pix = np.zeros_like(arr, dtype=np.int64) if peak <= 0 else np.round(arr / peak * 255).astype(np.int64)
    with open(path, "w") as fh:
        fh.write(f"P2\n{arr.shape[1]} {arr.shape[0]}\n255\n")
        for row in pix:
            fh.write(" ".join(str(v) for v in row) + "\n")
