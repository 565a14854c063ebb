"""Pseudo-label generation for the unlabeled target set.

Two-pass deep clustering (soft prediction-weighted centroids, cosine
assignment, hard recomputation, reassignment) followed by neighbor-vote
refinement and consensus-confidence ranking that keeps the top beta
fraction per class as the trusted subset. Pure numpy over an immutable
feature snapshot; exhaustive O(n^2) neighbor search is fine at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FeatureBank:
    """Per-sample pooled features and softmax predictions, one snapshot."""

    features: np.ndarray  # (n, D)
    probs: np.ndarray     # (n, C), rows sum to 1

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.features.ndim != 2 or self.probs.ndim != 2:
            raise ValueError("feature bank arrays must be 2-D")
        if self.features.shape[0] != self.probs.shape[0]:
            raise ValueError("feature/prediction counts differ")
        if np.abs(self.probs.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("predictions must sum to 1")

    def __len__(self):
        return self.features.shape[0]


@dataclass
class PseudoLabelTable:
    cluster_label: np.ndarray   # (n,) int, two-pass clustering output
    refined_label: np.ndarray   # (n,) int, neighbor-vote refinement
    confidence: np.ndarray      # (n,) float in [-1, 1]
    selected: np.ndarray        # (n,) bool

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("index,label,refined,confidence,selected\n")
            for i in range(len(self.cluster_label)):
                fh.write(
                    f"{i},{self.cluster_label[i]},{self.refined_label[i]},"
                    f"{self.confidence[i]!r},{int(self.selected[i])}\n"
                )


def _norms(x, what):
    n = np.linalg.norm(x, axis=-1)
    if np.any(n == 0):
        raise ValueError(f"{what}: zero-norm vector")
    return n


def cosine_matrix(a, b):
    """(n, m) cosine similarities; rejects zero-norm rows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return (a @ b.T) / np.outer(_norms(a, "cosine"), _norms(b, "cosine"))


def soft_centroids(bank):
    """mu_c = sum_x p_c(x) f(x) / sum_x p_c(x)."""
    if len(bank) == 0:
        raise ValueError("soft_centroids: empty bank")
    weights = bank.probs.T  # (C, n)
    return (weights @ bank.features) / weights.sum(axis=1, keepdims=True)


def assign_by_cosine(features, centroids):
    """argmax_c cos(f, mu_c); ties resolve to the lowest class index."""
    return np.argmax(cosine_matrix(features, centroids), axis=1)


def hard_centroids_and_labels(features, labels, fallback_centroids):
    """Class-mean centroids from hard labels, then cosine reassignment.

    Classes with zero members keep their previous (soft-pass) centroid.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    mu = np.array(fallback_centroids, dtype=np.float64, copy=True)
    for c in range(mu.shape[0]):
        members = features[labels == c]
        if len(members):
            mu[c] = members.mean(axis=0)
    return mu, assign_by_cosine(features, mu)


def _neighbor_sets(bank, k):
    """Indices of the k nearest neighbors by cosine, self excluded; cosine
    ties resolve to the lowest sample index."""
    n = len(bank)
    if k >= n:
        raise ValueError(f"neighbor count {k} must be < dataset size {n}")
    sim = cosine_matrix(bank.features, bank.features)
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")
    return order[:, :k], sim


def upa_posterior(bank, labels, k, iters):
    """Distance-weighted neighbor voting, fed back for `iters` rounds.

    p_t = mean over neighbors of cos(f_t, f_k) * onehot(label_k); the argmax
    becomes the next round's labels. Returns (refined labels, posteriors).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    labels = np.asarray(labels)
    nbrs, sim = _neighbor_sets(bank, k)
    n = len(bank)
    n_classes = bank.probs.shape[1]
    current = labels
    post = None
    for _ in range(iters):
        post = np.zeros((n, n_classes))
        for i in range(n):
            for j in nbrs[i]:
                post[i, current[j]] += sim[i, j]
        post /= k
        current = np.argmax(post, axis=1)
    return current, post


def upa_confidence_and_select(bank, cluster_labels, refined_labels, k, beta):
    """Consensus confidence plus per-class top-beta selection.

    q_t averages cosine similarity over neighbors sharing the refined label
    (-1 when no neighbor agrees). Within each class, the ceil(beta * count)
    highest-q samples are selected; ties resolve to the lowest index.
    """
    refined = np.asarray(refined_labels)
    nbrs, sim = _neighbor_sets(bank, k)
    n = len(bank)
    conf = np.empty(n)
    for i in range(n):
        cons = [j for j in nbrs[i] if refined[j] == refined[i]]
        conf[i] = np.mean([sim[i, j] for j in cons]) if cons else -1.0
    selected = np.zeros(n, dtype=bool)
    for c in np.unique(refined):
        members = np.flatnonzero(refined == c)
        quota = int(np.ceil(beta * len(members))) if beta > 0 else 0
        ranked = members[np.argsort(-conf[members], kind="stable")]
        selected[ranked[:quota]] = True
    return PseudoLabelTable(
        cluster_label=np.asarray(cluster_labels),
        refined_label=refined,
        confidence=conf,
        selected=selected,
    )


def generate_pseudo_labels(bank, k=4, iters=2, beta=0.6, use_refinement=True):
    """Full labeling pass: clustering, optional neighbor refinement, selection.

    With use_refinement=False the cluster labels stand and every sample is
    selected (the no-filter ablation arm).
    """
    mu1 = soft_centroids(bank)
    y1 = assign_by_cosine(bank.features, mu1)
    _, y2 = hard_centroids_and_labels(bank.features, y1, mu1)
    if not use_refinement:
        return PseudoLabelTable(
            cluster_label=y2,
            refined_label=y2.copy(),
            confidence=np.ones(len(bank)),
            selected=np.ones(len(bank), dtype=bool),
        )
    refined, _ = upa_posterior(bank, y2, k, iters)
    return upa_confidence_and_select(bank, y2, refined, k, beta)
