"""Synthetic domain-shift benchmark.

Each sample is a patch grid holding a connected foreground blob drawn from a
class prototype, with background patches drawn from background prototypes.
In the source domain the background prototype matches the class with high
probability (the spurious channel); the target domain breaks the correlation
and applies an affine feature shift with more noise. Generation is a pure
function of (spec, n, seed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, load_tensor, save_tensor

MIN_PROTO_COS_DIST = 0.2


@dataclass
class DomainSpec:
    n_classes: int = 4
    grid: tuple = (8, 8)
    patch_dim: int = 16
    class_protos: np.ndarray = None       # (C, P)
    background_protos: np.ndarray = None  # (C, P)
    spurious_strength: float = 0.9        # P(background prototype matches the class)
    noise_std: float = 0.3
    shift_scale: np.ndarray = None        # (P,), applied as x * scale + offset
    shift_offset: np.ndarray = None
    blob_size: tuple = (8, 12)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.spurious_strength <= 1.0:
            raise ValueError("spurious_strength must be in [0, 1]")
        if self.shift_scale is None:
            self.shift_scale = np.ones(self.patch_dim)
        if self.shift_offset is None:
            self.shift_offset = np.zeros(self.patch_dim)


@dataclass
class Dataset:
    patches: np.ndarray  # (n, H, W, P)
    labels: np.ndarray   # (n,)
    masks: np.ndarray    # (n, H, W) bool, foreground blob (diagnostics only)
    spec: DomainSpec

    def __len__(self):
        return self.patches.shape[0]


def sample_prototypes(count, dim, rng, min_cos_dist=MIN_PROTO_COS_DIST, max_tries=10000):
    """Unit-scale gaussian prototypes, rejection-sampled so every pair keeps
    cosine distance >= min_cos_dist (no near-collinear pair)."""
    protos = []
    for _ in range(max_tries):
        cand = rng.normal(size=dim)
        cand /= np.linalg.norm(cand)
        if all(1.0 - float(cand @ p) >= min_cos_dist for p in protos):
            protos.append(cand)
        if len(protos) == count:
            return np.stack(protos)
    raise RuntimeError("prototype rejection sampling did not converge")


def _grow_blob(h, w, size, rng):
    """Random 4-connected blob of `size` cells, grown from a random seed cell."""
    if size < 1 or size > h * w:
        raise ValueError(f"infeasible blob size {size} for {h}x{w} grid")
    blob = {(int(rng.integers(h)), int(rng.integers(w)))}
    while len(blob) < size:
        frontier = sorted(
            {
                (r + dr, c + dc)
                for r, c in blob
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if 0 <= r + dr < h and 0 <= c + dc < w
            }
            - blob
        )
        blob.add(frontier[int(rng.integers(len(frontier)))])
    mask = np.zeros((h, w), dtype=bool)
    for r, c in blob:
        mask[r, c] = True
    return mask


def generate_domain(spec, n):
    """Balanced dataset of n samples from the domain spec."""
    c = spec.n_classes
    if n < c:
        raise ValueError(f"need at least {c} samples for {c} classes")
    h, w = spec.grid
    lo, hi = spec.blob_size
    if hi > h * w or lo < 1 or lo > hi:
        raise ValueError(f"infeasible blob size range {spec.blob_size} for {h}x{w} grid")
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(c), n // c)
    labels = np.concatenate([labels, rng.permutation(c)[: n % c]])
    rng.shuffle(labels)
    patches = np.empty((n, h, w, spec.patch_dim))
    masks = np.empty((n, h, w), dtype=bool)
    for i, label in enumerate(labels):
        size = int(rng.integers(lo, hi + 1))
        mask = _grow_blob(h, w, size, rng)
        if rng.random() < spec.spurious_strength:
            bg_class = int(label)
        else:
            others = [k for k in range(c) if k != label]
            bg_class = others[int(rng.integers(c - 1))]
        fg = np.flatnonzero(mask.ravel())
        bg = np.flatnonzero(~mask.ravel())
        grid = np.empty((h * w, spec.patch_dim))
        grid[fg] = spec.class_protos[label] + rng.normal(0.0, spec.noise_std, (len(fg), spec.patch_dim))
        grid[bg] = spec.background_protos[bg_class] + rng.normal(0.0, spec.noise_std, (len(bg), spec.patch_dim))
        patches[i] = (grid * spec.shift_scale + spec.shift_offset).reshape(h, w, spec.patch_dim)
        masks[i] = mask
    return Dataset(patches=patches, labels=labels.astype(np.int64), masks=masks, spec=spec)


def make_benchmark_pair(
    seed,
    n_source=128,
    n_target=128,
    n_classes=4,
    grid=(8, 8),
    patch_dim=16,
    rho_source=0.9,
    sigma_source=0.3,
    sigma_target=0.5,
    rho_target=None,
    blob_size=(8, 12),
):
    """Source/target datasets sharing class prototypes: the source carries the
    spurious background channel, the target decorrelates it (rho = 1/C) and
    adds an affine feature shift plus extra noise."""
    rng = np.random.default_rng(seed)
    protos = sample_prototypes(2 * n_classes, patch_dim, rng)
    class_protos, background_protos = protos[:n_classes], protos[n_classes:]
    source_seed = int(rng.integers(2**31))
    target_seed = int(rng.integers(2**31))
    shift_scale = rng.uniform(0.7, 1.3, patch_dim)
    shift_offset = rng.uniform(-0.5, 0.5, patch_dim)
    source = DomainSpec(
        n_classes=n_classes, grid=grid, patch_dim=patch_dim,
        class_protos=class_protos, background_protos=background_protos,
        spurious_strength=rho_source, noise_std=sigma_source,
        blob_size=blob_size, seed=source_seed,
    )
    target = DomainSpec(
        n_classes=n_classes, grid=grid, patch_dim=patch_dim,
        class_protos=class_protos, background_protos=background_protos,
        spurious_strength=1.0 / n_classes if rho_target is None else rho_target,
        noise_std=sigma_target, shift_scale=shift_scale, shift_offset=shift_offset,
        blob_size=blob_size, seed=target_seed,
    )
    return generate_domain(source, n_source), generate_domain(target, n_target)


# ---------------------------------------------------------------------------
# directory layout: patches.tnsr / labels.tnsr / masks.tnsr plus prototype
# tensors and a `key = value` manifest of the scalar spec fields

_MANIFEST_KEYS = (
    "n_classes", "grid_h", "grid_w", "patch_dim", "spurious_strength",
    "noise_std", "blob_min", "blob_max", "seed", "n_samples",
)


def save_dataset(ds, path):
    os.makedirs(path, exist_ok=True)
    save_tensor(os.path.join(path, "patches.tnsr"), Tensor(ds.patches))
    save_tensor(os.path.join(path, "labels.tnsr"), Tensor(ds.labels.astype(np.float64)))
    save_tensor(os.path.join(path, "masks.tnsr"), Tensor(ds.masks.astype(np.float64)))
    save_tensor(os.path.join(path, "class_protos.tnsr"), Tensor(ds.spec.class_protos))
    save_tensor(os.path.join(path, "background_protos.tnsr"), Tensor(ds.spec.background_protos))
    save_tensor(os.path.join(path, "shift_scale.tnsr"), Tensor(ds.spec.shift_scale))
    save_tensor(os.path.join(path, "shift_offset.tnsr"), Tensor(ds.spec.shift_offset))
    spec = ds.spec
    values = {
        "n_classes": spec.n_classes, "grid_h": spec.grid[0], "grid_w": spec.grid[1],
        "patch_dim": spec.patch_dim, "spurious_strength": repr(spec.spurious_strength),
        "noise_std": repr(spec.noise_std), "blob_min": spec.blob_size[0],
        "blob_max": spec.blob_size[1], "seed": spec.seed, "n_samples": len(ds),
    }
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        for key in _MANIFEST_KEYS:
            fh.write(f"{key} = {values[key]}\n")


def _parse_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"manifest: malformed line {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            out[key] = val
    missing = [k for k in _MANIFEST_KEYS if k not in out]
    if missing:
        raise ValueError(f"manifest: missing keys {missing}")
    return out


def load_dataset(path):
    manifest = _parse_manifest(os.path.join(path, "manifest.txt"))
    arrays = {}
    for name in ("patches", "labels", "masks", "class_protos", "background_protos", "shift_scale", "shift_offset"):
        fpath = os.path.join(path, f"{name}.tnsr")
        if not os.path.exists(fpath):
            raise FileNotFoundError(f"dataset: missing file {fpath}")
        arrays[name] = load_tensor(fpath).data
    patches, labels, masks = arrays["patches"], arrays["labels"], arrays["masks"]
    if patches.shape[0] != labels.shape[0] or patches.shape[0] != masks.shape[0]:
        raise ValueError(
            f"dataset: sample count disagreement: patches {patches.shape[0]}, "
            f"labels {labels.shape[0]}, masks {masks.shape[0]}"
        )
    n_classes = int(manifest["n_classes"])
    if labels.size and int(labels.max()) >= n_classes:
        raise ValueError(
            f"dataset: label {int(labels.max())} exceeds manifest n_classes {n_classes}"
        )
    grid = (int(manifest["grid_h"]), int(manifest["grid_w"]))
    patch_dim = int(manifest["patch_dim"])
    if patches.shape[1:] != grid + (patch_dim,):
        raise ValueError(f"dataset: patches shape {patches.shape[1:]} != manifest {grid + (patch_dim,)}")
    spec = DomainSpec(
        n_classes=n_classes, grid=grid, patch_dim=patch_dim,
        class_protos=arrays["class_protos"], background_protos=arrays["background_protos"],
        spurious_strength=float(manifest["spurious_strength"]),
        noise_std=float(manifest["noise_std"]),
        shift_scale=arrays["shift_scale"], shift_offset=arrays["shift_offset"],
        blob_size=(int(manifest["blob_min"]), int(manifest["blob_max"])),
        seed=int(manifest["seed"]),
    )
    return Dataset(
        patches=patches, labels=labels.astype(np.int64), masks=masks.astype(bool), spec=spec
    )
