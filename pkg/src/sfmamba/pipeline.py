"""Orchestration: source training, target adaptation with the frozen
classifier, evaluation, the decoupled-weight-decay optimizer with cosine
annealing and per-group learning rates, and JSONL metrics.

Adaptation epochs refresh pseudo-labels from an eval-mode snapshot before
any gradient step, then run minibatch steps minimizing kl + ent + div + ce,
where the kl/ce terms see only the trusted subset. The classifier stays
bit-identical throughout (asserted every step).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .labeling import FeatureBank, generate_pseudo_labels
from .losses import (
    LossBreakdown,
    diversity_loss,
    entropy_loss,
    kl_consistency,
    label_smoothed_ce,
    pseudo_ce,
    total_target_loss,
)
from .model import Model, ModelConfig, model_from_checkpoint, save_checkpoint
from .scs import batch_shuffle, grad_cam_batch, make_plan
from .tensor import GradTape, Tensor, backward, tape_scope


@dataclass
class RunConfig:
    phase: str = "adapt"
    model: ModelConfig = field(default_factory=ModelConfig)
    source_data: str = ""
    target_data: str = ""
    val_data: str = ""
    out_dir: str = ""
    epochs: int = 15
    batch_size: int = 8
    lr: float = 3e-4          # source phase
    lr_adapt: float = 5e-5    # adaptation; backbone runs at 0.1x
    weight_decay: float = 5e-2
    smoothing: float = 0.1
    gamma: float = 20.0       # background percentile for the shuffle
    beta: float = 0.6         # per-class trusted fraction
    k_neighbors: int = 4
    refine_iters: int = 2
    seed: int = 0
    use_scs: bool = True
    use_upa: bool = True

    def validate(self):
        if self.lr <= 0 or self.lr_adapt <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics)")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        self.model.validate()
        return self


BACKBONE_LR_FACTOR = 0.1


def cosine_lr(base, step, total_steps):
    """Cosine annealing from base toward 0 across the run."""
    if total_steps <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Adaptive moments with decoupled weight decay and per-name lr scales.

    Names absent from `scales` are frozen: never stepped, never decayed.
    Parameter tensors are replaced functionally on the model.
    """

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, model, scales, weight_decay):
        self.model = model
        self.scales = dict(scales)
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(model.params[name].data) for name in self.scales}
        self.v = {name: np.zeros_like(model.params[name].data) for name in self.scales}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, scale in self.scales.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            p = self.model.params[name].data
            self.model.params[name] = Tensor._wrap(
                p - lr * scale * (update + self.weight_decay * p)
            )


def source_scales(model):
    return {name: 1.0 for name in model.params}


def adapt_scales(model):
    """Neck (channel blocks + BN affine) at 1.0, backbone at 0.1, classifier frozen."""
    scales = {}
    for name in model.params:
        if name.startswith("classifier."):
            continue
        if name.startswith("chvss") or name.startswith("bn."):
            scales[name] = 1.0
        else:
            scales[name] = BACKBONE_LR_FACTOR
    return scales


class MetricsWriter:
    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "w") if path else None

    def write(self, record):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _batches(n, batch_size, order):
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def _grads_by_name(model, grads, names):
    return {name: grads[model.params[name].tid].data for name in names}


def classifier_digest(model):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(model.params["classifier.w"].data).tobytes())
    h.update(np.ascontiguousarray(model.params["classifier.b"].data).tobytes())
    return h.hexdigest()


def evaluate(model, dataset, batch_size=32):
    """Eval-mode top-1 accuracy plus per-class accuracy."""
    n = len(dataset)
    preds = np.empty(n, dtype=np.int64)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        logits, _, _ = model.forward(dataset.patches[start:stop], train=False)
        preds[start:stop] = np.argmax(logits.data, axis=1)
    correct = preds == dataset.labels
    per_class = {}
    for c in range(model.config.n_classes):
        members = dataset.labels == c
        if members.any():
            per_class[int(c)] = float(correct[members].mean())
    return {"accuracy": float(correct.mean()), "per_class": per_class, "predictions": preds}


def feature_bank(model, dataset, batch_size=32):
    """Eval-mode snapshot of pooled features and softmax predictions."""
    n = len(dataset)
    feats, probs = [], []
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        logits, _, feat = model.forward(dataset.patches[start:stop], train=False)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs.append(e / e.sum(axis=1, keepdims=True))
        feats.append(feat.data)
    return FeatureBank(features=np.concatenate(feats), probs=np.concatenate(probs))


def train_source(config, dataset, val_dataset=None, out_dir=None):
    """Fit the source model on smoothed CE; returns (model, metric records)."""
    config.validate()
    if dataset.patches.shape[1:] != config.model.grid + (config.model.patch_dim,):
        raise ValueError(
            f"dataset patches {dataset.patches.shape[1:]} do not match model config "
            f"{config.model.grid + (config.model.patch_dim,)}"
        )
    if dataset.labels.max() >= config.model.n_classes:
        raise ValueError("dataset has more classes than the model")
    model = Model(config.model, seed=config.seed)
    opt = AdamW(model, source_scales(model), config.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)
    n = len(dataset)
    steps_per_epoch = n // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    step = 0
    names = list(model.params)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for idx in _batches(n, config.batch_size, order):
            lr = cosine_lr(config.lr, step, total_steps)
            tape = GradTape()
            with tape_scope(tape):
                model.watch(tape)
                logits, _, _ = model.forward(dataset.patches[idx], train=True)
                loss = label_smoothed_ce(logits, dataset.labels[idx], config.smoothing)
            grads = _grads_by_name(model, backward(loss, tape), names)
            opt.step(grads, lr)
            metrics.write(
                LossBreakdown(lce=float(loss.data), total=float(loss.data),
                              batch_size=len(idx)).__dict__
                | {"step": step, "lr": lr}
            )
            step += 1
        record = {
            "epoch": epoch,
            "train_accuracy": evaluate(model, dataset)["accuracy"],
        }
        if val_dataset is not None:
            record["val_accuracy"] = evaluate(model, val_dataset)["accuracy"]
        metrics.write(record)
    metrics.close()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "source.sfmb"), model, config.seed, "source")
    return model, metrics.records


def _scs_plans(model, config, patches, refined, epoch, step):
    """Per-sample shuffle plans from a throwaway attribution pass (eval-mode
    statistics so samples stay independent)."""
    cam_tape = GradTape()
    with tape_scope(cam_tape):
        logits, fmap, _ = model.forward(patches, train=False)
    amaps = grad_cam_batch(cam_tape, fmap, logits, refined)
    plans = []
    for i, amap in enumerate(amaps):
        child = int(np.random.SeedSequence([config.seed, epoch, step, i]).generate_state(1)[0])
        plans.append(make_plan(amap, config.gamma, child))
    return plans


def adapt_target(config, source_checkpoint, dataset, out_dir=None):
    """Source-free adaptation pass; returns (model, metric records)."""
    config.validate()
    if source_checkpoint.phase != "source":
        raise ValueError(f"expected a source-phase checkpoint, got {source_checkpoint.phase!r}")
    model = model_from_checkpoint(source_checkpoint)
    if dataset.patches.shape[1:] != model.config.grid + (model.config.patch_dim,):
        raise ValueError("dataset does not match checkpoint config")
    frozen = {
        "classifier.w": model.params["classifier.w"].data.copy(),
        "classifier.b": model.params["classifier.b"].data.copy(),
    }
    scales = adapt_scales(model)
    opt = AdamW(model, scales, config.weight_decay)
    trainable = list(scales)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)
    n = len(dataset)
    steps_per_epoch = n // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        # labeling pass on a stable eval-mode snapshot, before any step
        bank = feature_bank(model, dataset)
        table = generate_pseudo_labels(
            bank, k=config.k_neighbors, iters=config.refine_iters,
            beta=config.beta, use_refinement=config.use_upa,
        )
        target_acc = evaluate(model, dataset)["accuracy"]
        metrics.write({
            "epoch": epoch,
            "target_accuracy": target_acc,
            "pseudo_label_accuracy": float((table.refined_label == dataset.labels).mean()),
            "n_selected": int(table.selected.sum()),
            "classifier_sha": classifier_digest(model),
        })
        order = shuffle_rng.permutation(n)
        for idx in _batches(n, config.batch_size, order):
            refined = table.refined_label[idx]
            sel = table.selected[idx]
            plans = _scs_plans(model, config, dataset.patches[idx], refined, epoch, step) \
                if config.use_scs else None
            lr_neck = cosine_lr(config.lr_adapt, step, total_steps)
            tape = GradTape()
            with tape_scope(tape):
                model.watch(tape, trainable)
                tokens = model.patch_embed(dataset.patches[idx])
                logits, _, _ = model.forward_tokens(tokens, train=True)
                ent = entropy_loss(logits)
                div = diversity_loss(logits)
                ce, n_sel = pseudo_ce(logits, refined, sel)
                if plans is not None:
                    perturbed = batch_shuffle(tokens, plans)
                    logits_pert, _, _ = model.forward_tokens(perturbed, train=True)
                    kl = kl_consistency(logits, logits_pert, sel)
                else:
                    kl = Tensor(0.0)
                total = total_target_loss(kl, ent, div, ce)
            grads = _grads_by_name(model, backward(total, tape), trainable)
            opt.step(grads, lr_neck)
            if not (
                np.array_equal(model.params["classifier.w"].data, frozen["classifier.w"])
                and np.array_equal(model.params["classifier.b"].data, frozen["classifier.b"])
            ):
                raise AssertionError("frozen classifier changed during adaptation")
            breakdown = LossBreakdown(
                ent=float(ent.data), div=float(div.data), ce=float(ce.data),
                kl=float(kl.data), total=float(total.data),
                batch_size=len(idx), n_selected=n_sel,
            )
            metrics.write(breakdown.__dict__ | {
                "step": step,
                "lr_neck": lr_neck,
                "lr_backbone": lr_neck * BACKBONE_LR_FACTOR,
            })
            step += 1
    final_acc = evaluate(model, dataset)["accuracy"]
    metrics.write({
        "epoch": config.epochs,
        "target_accuracy": final_acc,
        "classifier_sha": classifier_digest(model),
    })
    metrics.close()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "adapted.sfmb"), model, config.seed, "adapted")
    return model, metrics.records


# ---------------------------------------------------------------------------
# config files: `key = value` lines, `#` comments; flags override file keys

_MODEL_KEYS = {
    "grid_h": int, "grid_w": int, "patch_dim": int, "embed_dim": int,
    "n_encoder_blocks": int, "state_dim": int, "n_chvss": int,
    "n_classes": int, "chgroup_width": int,
}
_RUN_KEYS = {
    "phase": str, "source_data": str, "target_data": str, "val_data": str,
    "out_dir": str, "epochs": int, "batch_size": int, "lr": float,
    "lr_adapt": float, "weight_decay": float, "smoothing": float,
    "gamma": float, "beta": float, "k_neighbors": int, "refine_iters": int,
    "seed": int, "use_scs": bool, "use_upa": bool,
}


def _coerce(value, kind):
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    return kind(value)


def parse_config_file(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected `key = value`")
            key, val = (part.strip() for part in line.split("=", 1))
            if key in _MODEL_KEYS:
                out[key] = _coerce(val, _MODEL_KEYS[key])
            elif key in _RUN_KEYS:
                out[key] = _coerce(val, _RUN_KEYS[key])
            else:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    return out


def build_run_config(values):
    """RunConfig from a flat key dict (file plus flag overrides)."""
    model_kwargs = {}
    if "grid_h" in values or "grid_w" in values:
        model_kwargs["grid"] = (values.pop("grid_h", 8), values.pop("grid_w", 8))
    for key in list(values):
        if key in _MODEL_KEYS:
            model_kwargs[key] = values.pop(key)
    run_kwargs = {k: v for k, v in values.items() if k in _RUN_KEYS}
    unknown = set(values) - set(run_kwargs)
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    cfg = RunConfig(model=ModelConfig(**model_kwargs), **run_kwargs)
    env_seed = os.environ.get("SFMAMBA_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg.validate()
