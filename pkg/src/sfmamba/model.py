"""The desk-scale network: patch embedding, gated four-way-scan encoder
blocks, channel-wise bidirectional scan neck (with the channel-grid ablation
variant), BN + ReLU, and a linear classifier head, plus SFMB1 checkpoints.

Parameters live in a name -> Tensor dict so optimizers can swap entries
functionally; scan parameter bundles are materialized as views per forward.
BatchNorm running statistics are plain numpy buffers outside the tape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .ssm import SsmParams, bidirectional_scan, cross_merge_2d, cross_scan_2d, init_ssm_params, selective_scan_seq
from .tensor import Tensor, add, matmul, mul, relu, reshape, silu, slice_axis, sub, transpose

_SSM_FIELDS = ("a_log", "d_skip", "w_delta", "b_delta", "w_b", "b_b", "w_c", "b_c")


@dataclass
class ModelConfig:
    grid: tuple = (8, 8)
    patch_dim: int = 16
    embed_dim: int = 32
    n_encoder_blocks: int = 2
    state_dim: int = 8
    n_chvss: int = 2
    n_classes: int = 4
    chgroup_width: int = 0  # 0 disables the channel-grid variant

    def validate(self):
        h, w = self.grid
        for name, val in (
            ("grid height", h),
            ("grid width", w),
            ("patch_dim", self.patch_dim),
            ("embed_dim", self.embed_dim),
            ("n_encoder_blocks", self.n_encoder_blocks),
            ("state_dim", self.state_dim),
            ("n_classes", self.n_classes),
        ):
            if val <= 0:
                raise ValueError(f"{name} must be positive, got {val}")
        if self.n_chvss < 0 or self.chgroup_width < 0:
            raise ValueError("block counts must be nonnegative")
        if self.embed_dim % 2:
            raise ValueError(f"embed_dim must be even for the gating split, got {self.embed_dim}")
        if self.chgroup_width and self.embed_dim % self.chgroup_width:
            raise ValueError(
                f"chgroup_width {self.chgroup_width} must divide embed_dim {self.embed_dim}"
            )
        return self

    @property
    def n_tokens(self):
        return self.grid[0] * self.grid[1]


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    buffers: dict
    seed: int
    phase: str


class Model:
    """theta = classifier(BN+ReLU(pool(neck(encoder(embed(x))))))."""

    bn_eps = 1e-5
    bn_momentum = 0.1

    def __init__(self, config, seed=0):
        self.config = config.validate()
        self.params = {}
        self.buffers = {
            "bn.running_mean": np.zeros(config.embed_dim),
            "bn.running_var": np.ones(config.embed_dim),
        }
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        cfg = self.config
        d = cfg.embed_dim
        half = d // 2
        hw = cfg.n_tokens
        p = self.params
        p["patch_embed.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(cfg.patch_dim), (cfg.patch_dim, d)))
        p["patch_embed.b"] = Tensor(np.zeros(d))
        for i in range(cfg.n_encoder_blocks):
            p[f"enc{i}.ln.gamma"] = Tensor(np.ones(d))
            p[f"enc{i}.ln.beta"] = Tensor(np.zeros(d))
            for k in range(4):
                self._store(f"enc{i}.route{k}", init_ssm_params(half, cfg.state_dim, rng))
            p[f"enc{i}.out.w"] = Tensor(rng.normal(0.0, 0.1 / np.sqrt(half), (half, d)))
            p[f"enc{i}.out.b"] = Tensor(np.zeros(d))
        neck_dirs = ("fwd", "bwd") if not cfg.chgroup_width else tuple(f"route{k}" for k in range(4))
        for j in range(cfg.n_chvss):
            for direction in neck_dirs:
                self._store(f"chvss{j}.{direction}", init_ssm_params(hw, cfg.state_dim, rng))
        p["bn.gamma"] = Tensor(np.ones(d))
        p["bn.beta"] = Tensor(np.zeros(d))
        p["classifier.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.n_classes)))
        p["classifier.b"] = Tensor(np.zeros(cfg.n_classes))

    def _store(self, prefix, ssm):
        for name, t in ssm.named(prefix):
            self.params[name] = t

    def _ssm(self, prefix):
        return SsmParams(*[self.params[f"{prefix}.{f}"] for f in _SSM_FIELDS])

    def watch(self, tape, names=None):
        for name in names if names is not None else self.params:
            tape.watch(self.params[name])

    # ------------------------------------------------------------------
    # forward pieces

    def patch_embed(self, x):
        """Raw patches (B, H, W, P) or (H, W, P) -> token sequence (B, T, D)."""
        cfg = self.config
        arr = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if arr.data.ndim == 3:
            arr = reshape(arr, (1,) + arr.shape)
        nb = arr.shape[0]
        expect = (nb,) + cfg.grid + (cfg.patch_dim,)
        if arr.shape != expect:
            raise ValueError(f"patch_embed: input shape {arr.shape} != expected {expect}")
        flat = reshape(arr, (nb * cfg.n_tokens, cfg.patch_dim))
        tokens = add(matmul(flat, self.params["patch_embed.w"]), self.params["patch_embed.b"])
        return reshape(tokens, (nb, cfg.n_tokens, cfg.embed_dim))

    def _layernorm(self, x, prefix):
        mu = x.mean(axis=-1, keepdims=True)
        xc = sub(x, mu)
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = tz.exp(mul(tz.log(add(var, self.bn_eps)), -0.5))
        return add(mul(mul(xc, inv), self.params[f"{prefix}.gamma"]), self.params[f"{prefix}.beta"])

    def _tokens_to_map(self, tokens, d):
        nb = tokens.shape[0]
        h, w = self.config.grid
        return reshape(transpose(tokens, (0, 2, 1)), (nb, d, h, w))

    def _map_to_tokens(self, fmap):
        nb, d = fmap.shape[0], fmap.shape[1]
        return transpose(reshape(fmap, (nb, d, self.config.n_tokens)), (0, 2, 1))

    def vss_block(self, tokens, prefix):
        """LN -> signal/gate split -> 4-route scan + merge -> gated projection -> residual."""
        cfg = self.config
        h, w = cfg.grid
        half = cfg.embed_dim // 2
        x = self._layernorm(tokens, f"{prefix}.ln")
        signal = slice_axis(x, -1, 0, half)
        gate = slice_axis(x, -1, half, cfg.embed_dim)
        routes = cross_scan_2d(self._tokens_to_map(signal, half))
        outs = [selective_scan_seq(seq, self._ssm(f"{prefix}.route{k}")) for k, seq in enumerate(routes)]
        merged = self._map_to_tokens(cross_merge_2d(outs, h, w))
        gated = mul(merged, silu(gate))
        nb = tokens.shape[0]
        flat = reshape(gated, (nb * cfg.n_tokens, half))
        out = add(matmul(flat, self.params[f"{prefix}.out.w"]), self.params[f"{prefix}.out.b"])
        return add(tokens, reshape(out, (nb, cfg.n_tokens, cfg.embed_dim)))

    def chvss_block(self, tokens, prefix):
        """Bidirectional scan over the channel sequence (D tokens of size HW),
        added back residually."""
        chan_seq = transpose(tokens, (0, 2, 1))  # (B, D, HW)
        scanned = bidirectional_scan(chan_seq, self._ssm(f"{prefix}.fwd"), self._ssm(f"{prefix}.bwd"))
        return add(tokens, transpose(scanned, (0, 2, 1)))

    def chgroup_block(self, tokens, prefix):
        """Channel-grid variant: lay the D channel tokens (each an HW-vector)
        into a (D/d) x d grid and cross-scan it four ways."""
        cfg = self.config
        d_width = cfg.chgroup_width
        rows = cfg.embed_dim // d_width
        nb = tokens.shape[0]
        chan_grid = reshape(tokens, (nb, cfg.n_tokens, rows, d_width))  # channel c -> cell (c//d, c%d)
        routes = cross_scan_2d(chan_grid)  # 4 x (B, D, HW)
        outs = [selective_scan_seq(seq, self._ssm(f"{prefix}.route{k}")) for k, seq in enumerate(routes)]
        merged = cross_merge_2d(outs, rows, d_width)
        return add(tokens, reshape(merged, (nb, cfg.n_tokens, cfg.embed_dim)))

    def _batchnorm(self, x, train):
        gamma, beta = self.params["bn.gamma"], self.params["bn.beta"]
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch norm in train mode needs batch size >= 2")
            mu = x.mean(axis=0, keepdims=True)
            xc = sub(x, mu)
            var = (xc * xc).mean(axis=0, keepdims=True)
            inv = tz.exp(mul(tz.log(add(var, self.bn_eps)), -0.5))
            xn = mul(xc, inv)
            m = self.bn_momentum
            self.buffers["bn.running_mean"] = (1 - m) * self.buffers["bn.running_mean"] + m * mu.data.reshape(-1)
            self.buffers["bn.running_var"] = (1 - m) * self.buffers["bn.running_var"] + m * var.data.reshape(-1)
        else:
            scale = 1.0 / np.sqrt(self.buffers["bn.running_var"] + self.bn_eps)
            xn = mul(sub(x, Tensor(self.buffers["bn.running_mean"])), Tensor(scale))
        return add(mul(xn, gamma), beta)

    def forward_tokens(self, tokens, train=False):
        """Token sequence -> (logits, pre-pool feature map (B, D, H, W),
        pooled post-BN/ReLU feature (B, D))."""
        cfg = self.config
        x = tokens
        for i in range(cfg.n_encoder_blocks):
            x = self.vss_block(x, f"enc{i}")
        neck = self.chgroup_block if cfg.chgroup_width else self.chvss_block
        for j in range(cfg.n_chvss):
            x = neck(x, f"chvss{j}")
        fmap = self._tokens_to_map(x, cfg.embed_dim)
        pooled = fmap.mean(axis=(-2, -1))  # (B, D); attribution needs the map on-path
        feat = relu(self._batchnorm(pooled, train))
        logits = add(matmul(feat, self.params["classifier.w"]), self.params["classifier.b"])
        return logits, fmap, feat

    def forward(self, x, train=False):
        return self.forward_tokens(self.patch_embed(x), train=train)


# ---------------------------------------------------------------------------
# SFMB1 checkpoints: magic `SFMB`, version u8=1, config block of u32 LE
# fields in declared order (grid h, grid w, patch_dim, embed_dim,
# n_encoder_blocks, state_dim, n_chvss, n_classes, chgroup_width, seed,
# phase tag), u32 record count, then named TNSR1 records
# (u16 name length + UTF-8 name + tensor).

_CKPT_MAGIC = b"SFMB"
_PHASES = ("source", "adapted")


def save_checkpoint(path, model, seed, phase):
    if phase not in _PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    cfg = model.config
    records = list(model.params.items()) + [(k, Tensor(v)) for k, v in sorted(model.buffers.items())]
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<B", 1))
        fields = (*cfg.grid, cfg.patch_dim, cfg.embed_dim, cfg.n_encoder_blocks,
                  cfg.state_dim, cfg.n_chvss, cfg.n_classes, cfg.chgroup_width,
                  seed, _PHASES.index(phase))
        fh.write(struct.pack("<11I", *fields))
        fh.write(struct.pack("<I", len(records)))
        for name, t in records:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            tz.write_tensor(fh, t)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"checkpoint: bad magic {magic!r}")
        head = fh.read(1)
        if not head:
            raise ValueError("checkpoint: truncated file")
        if head[0] != 1:
            raise ValueError(f"checkpoint: unsupported version {head[0]}")
        raw = fh.read(48)
        if len(raw) < 48:
            raise ValueError("checkpoint: truncated file")
        vals = struct.unpack("<12I", raw)
        cfg = ModelConfig(
            grid=(vals[0], vals[1]), patch_dim=vals[2], embed_dim=vals[3],
            n_encoder_blocks=vals[4], state_dim=vals[5], n_chvss=vals[6],
            n_classes=vals[7], chgroup_width=vals[8],
        )
        seed, phase_tag, count = vals[9], vals[10], vals[11]
        if phase_tag >= len(_PHASES):
            raise ValueError(f"checkpoint: unknown phase tag {phase_tag}")
        named = {}
        for _ in range(count):
            lraw = fh.read(2)
            if len(lraw) < 2:
                raise ValueError("checkpoint: truncated file")
            (nlen,) = struct.unpack("<H", lraw)
            name = fh.read(nlen).decode("utf-8")
            named[name] = tz.read_tensor(fh)
    skeleton = Model(cfg)
    params, buffers = {}, {}
    for name, expect in skeleton.params.items():
        if name not in named:
            raise ValueError(f"checkpoint: missing parameter {name}")
        got = named.pop(name)
        if got.shape != expect.shape:
            raise ValueError(
                f"checkpoint: shape mismatch for {name}: {got.shape} vs config {expect.shape}"
            )
        params[name] = got
    for name, expect in skeleton.buffers.items():
        if name not in named:
            raise ValueError(f"checkpoint: missing buffer {name}")
        got = named.pop(name)
        if got.shape != expect.shape:
            raise ValueError(
                f"checkpoint: shape mismatch for {name}: {got.shape} vs config {expect.shape}"
            )
        buffers[name] = np.array(got.data, dtype=np.float64)
    if named:
        raise ValueError(f"checkpoint: unexpected records {sorted(named)}")
    return Checkpoint(config=cfg, params=params, buffers=buffers, seed=seed, phase=_PHASES[phase_tag])


def model_from_checkpoint(ckpt):
    model = Model(ckpt.config)
    if set(model.params) != set(ckpt.params):
        raise ValueError("checkpoint: parameter names do not match config")
    model.params = dict(ckpt.params)
    model.buffers = {k: np.array(v, copy=True) for k, v in ckpt.buffers.items()}
    return model
