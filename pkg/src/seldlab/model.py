"""CNN + self-attention SELD network, its GRU baseline, and checkpoint I/O.

Per-block ``attn_dims`` set the query/key width of every head. Values and
block outputs keep the CNN feature width, so residual connections line up.
"""
from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .tensor import (
    BatchNormState, DimensionError, GruWeights, Tensor, archive, as_tensor, batchnorm2d,
    concat, conv2d, gru_bidirectional, layer_norm, linear, maxpool2d, relu, softmax, tanh,
)

GRU_GATES = ("wz", "wr", "wh", "uz", "ur", "uh", "bz", "br", "bh")
BUFFER_SUFFIXES = (".rmean", ".rvar")
FEATSTAT_KEYS = ("featstat.mean", "featstat.std")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    temporal_module: str = "mhsa"
    n_blocks: int = 2
    n_heads: int = 8
    use_pos_emb: bool = True
    use_ln_residual: bool = True
    attn_dims: tuple = (128, 128)
    scale_attention: bool = True
    conv_channels: int = 64
    pool_sizes: tuple = ((5, 4), (1, 4), (1, 2))
    in_channels: int = 7
    n_mels: int = 64
    n_classes: int = 12
    label_frames: int = 50
    feature_frames: int = 250
    fc_hidden: int = 128
    gru_hidden: int = 128
    gru_layers: int = 2

    def __post_init__(self):
        self.attn_dims = tuple(int(d) for d in self.attn_dims)
        self.pool_sizes = tuple(tuple(int(v) for v in p) for p in self.pool_sizes)
        self.validate()

    def validate(self) -> None:
        if self.temporal_module not in ("mhsa", "gru"):
            raise ConfigError(f"temporal_module must be 'mhsa' or 'gru', got {self.temporal_module!r}")
        if self.temporal_module == "mhsa":
            if self.n_blocks < 1 or self.n_heads < 1:
                raise ConfigError("n_blocks and n_heads must be positive")
            if len(self.attn_dims) != self.n_blocks:
                raise ConfigError(f"attn_dims {self.attn_dims} must list one size per block "
                                  f"({self.n_blocks})")
            if any(d < 1 for d in self.attn_dims):
                raise ConfigError("attention sizes must be positive")
        t_pool = int(np.prod([p[0] for p in self.pool_sizes]))
        f_pool = int(np.prod([p[1] for p in self.pool_sizes]))
        if self.feature_frames != t_pool * self.label_frames:
            raise ConfigError(f"feature_frames {self.feature_frames} != {t_pool} x label_frames "
                              f"{self.label_frames}")
        if self.n_mels % f_pool:
            raise ConfigError(f"n_mels {self.n_mels} not divisible by frequency pooling {f_pool}")

    @property
    def time_pool(self) -> int:
        return int(np.prod([p[0] for p in self.pool_sizes]))

    @property
    def cnn_out_dim(self) -> int:
        f_pool = int(np.prod([p[1] for p in self.pool_sizes]))
        return self.conv_channels * (self.n_mels // f_pool)

    @classmethod
    def baseline(cls, **kw) -> "ModelConfig":
        return cls(temporal_module="gru", n_blocks=0, n_heads=0, use_pos_emb=False,
                   use_ln_residual=False, attn_dims=(), **kw)

    @classmethod
    def mhsa(cls, n_blocks: int, n_heads: int, pos_emb: bool = False, ln: bool = False,
             attn_dims=None, **kw) -> "ModelConfig":
        dims = tuple(attn_dims) if attn_dims is not None else (128,) * n_blocks
        return cls(temporal_module="mhsa", n_blocks=n_blocks, n_heads=n_heads,
                   use_pos_emb=pos_emb, use_ln_residual=ln, attn_dims=dims, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attn_dims"] = list(self.attn_dims)
        d["pool_sizes"] = [list(p) for p in self.pool_sizes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "attn_dims" not in d and "n_blocks" in d:
            # uniform 128-wide blocks unless sizes are given explicitly
            d["attn_dims"] = [128] * max(int(d["n_blocks"]), 0)
        return cls(**d)

    def label(self) -> str:
        if self.temporal_module == "gru":
            return "baseline-crnn"
        dims = "-".join(str(d) for d in self.attn_dims)
        return (f"N{self.n_blocks}-M{self.n_heads}-P{'y' if self.use_pos_emb else 'n'}"
                f"-LN{'y' if self.use_ln_residual else 'n'}-{dims}")


# -- parameter bookkeeping ------------------------------------------------
def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    """Canonical name -> shape of every trainable tensor, in initialization order."""
    shapes: OrderedDict[str, tuple] = OrderedDict()
    c_in = config.in_channels
    for n in range(1, len(config.pool_sizes) + 1):
        shapes[f"cnn.b{n}.conv.w"] = (config.conv_channels, c_in, 3, 3)
        shapes[f"cnn.b{n}.conv.b"] = (config.conv_channels,)
        shapes[f"cnn.b{n}.bn.gamma"] = (config.conv_channels,)
        shapes[f"cnn.b{n}.bn.beta"] = (config.conv_channels,)
        c_in = config.conv_channels
    width = config.cnn_out_dim
    if config.temporal_module == "mhsa":
        if config.use_pos_emb:
            shapes["posemb"] = (config.label_frames, width)
        for n, k in enumerate(config.attn_dims, start=1):
            for m in range(1, config.n_heads + 1):
                shapes[f"sa.b{n}.h{m}.wq"] = (width, k)
                shapes[f"sa.b{n}.h{m}.wk"] = (width, k)
                shapes[f"sa.b{n}.h{m}.wv"] = (width, width)
            shapes[f"sa.b{n}.wp"] = (config.n_heads * width, width)
            if config.use_ln_residual:
                shapes[f"sa.b{n}.ln.gamma"] = (width,)
                shapes[f"sa.b{n}.ln.beta"] = (width,)
        head_in = width
    else:
        d_in, h = width, config.gru_hidden
        for layer in range(1, config.gru_layers + 1):
            for direction in ("fwd", "bwd"):
                pre = f"gru.l{layer}.{direction}"
                for g in ("wz", "wr", "wh"):
                    shapes[f"{pre}.{g}"] = (d_in, h)
                for g in ("uz", "ur", "uh"):
                    shapes[f"{pre}.{g}"] = (h, h)
                for g in ("bz", "br", "bh"):
                    shapes[f"{pre}.{g}"] = (h,)
            d_in = h
        head_in = h
    shapes["fc1.w"] = (head_in, config.fc_hidden)
    shapes["fc1.b"] = (config.fc_hidden,)
    shapes["fc2.w"] = (config.fc_hidden, 3 * config.n_classes)
    shapes["fc2.b"] = (3 * config.n_classes,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form count of trainable parameters."""
    ch = config.conv_channels
    convs = len(config.pool_sizes)
    total = ch * config.in_channels * 9 + (convs - 1) * ch * ch * 9 + convs * 3 * ch
    width = config.cnn_out_dim
    if config.temporal_module == "mhsa":
        M = config.n_heads
        for k in config.attn_dims:
            total += M * (2 * width * k + width * width) + M * width * width
            total += 2 * width if config.use_ln_residual else 0
        total += config.label_frames * width if config.use_pos_emb else 0
        head_in = width
    else:
        h = config.gru_hidden
        d_in = width
        for _ in range(config.gru_layers):
            total += 2 * (3 * d_in * h + 3 * h * h + 3 * h)
            d_in = h
        head_in = h
    total += head_in * config.fc_hidden + config.fc_hidden
    total += config.fc_hidden * 3 * config.n_classes + 3 * config.n_classes
    return total


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith("conv.w"):
        return shape[1] * shape[2] * shape[3]
    return shape[0]


# -- building blocks ------------------------------------------------------
def cnn_extractor(x: Tensor, net: "SeldNet", train: bool) -> Tensor:
    """Three conv/BN/ReLU/max-pool blocks; ``B x 7 x T x F`` -> ``B x T' x (C * F_r)``."""
    h = x
    for n, pool in enumerate(net.config.pool_sizes, start=1):
        p = net.params
        h = conv2d(h, p[f"cnn.b{n}.conv.w"], p[f"cnn.b{n}.conv.b"])
        h = batchnorm2d(h, net.bn[n - 1], train)
        h = maxpool2d(relu(h), pool)
    B, C, Tr, Fr = h.shape
    return h.transpose(0, 2, 1, 3).reshape(B, Tr, C * Fr)


def self_attention(h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, scale: bool = True) -> Tensor:
    """One head: softmax(H Wq (H Wk)^T / sqrt(K)) H Wv over the time axis."""
    q, k, v = h @ wq, h @ wk, h @ wv
    scores = q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)
    if scale:
        scores = scores * (1.0 / np.sqrt(wq.shape[-1]))
    return softmax(scores, axis=-1) @ v


def mhsa(h: Tensor, heads, wp: Tensor, scale: bool = True) -> Tensor:
    """Multi-head self-attention with heads computed jointly.

    ``heads`` is a sequence of ``(wq, wk, wv)`` triples; the concatenated head
    outputs (``T x M*O``) are projected by ``wp``.
    """
    M = len(heads)
    if M < 1:
        raise ConfigError("mhsa needs at least one head")
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    B, T, _ = h.shape
    K, O = heads[0][0].shape[1], heads[0][2].shape[1]
    if wp.shape != (M * O, O):
        raise DimensionError(f"projection shape {wp.shape} != {(M * O, O)}")
    # one projection for every head's queries, keys and values
    w_all = concat([w[0] for w in heads] + [w[1] for w in heads] + [w[2] for w in heads], axis=1)
    qkv = h @ w_all
    q = qkv[..., :M * K].reshape(B, T, M, K).transpose(0, 2, 1, 3)
    k = qkv[..., M * K:2 * M * K].reshape(B, T, M, K).transpose(0, 2, 3, 1)
    v = qkv[..., 2 * M * K:].reshape(B, T, M, O).transpose(0, 2, 1, 3)
    scores = q @ k
    if scale:
        scores = scores * (1.0 / np.sqrt(K))
    att = softmax(scores, axis=-1) @ v
    out = att.transpose(0, 2, 1, 3).reshape(B, T, M * O) @ wp
    return out.reshape(T, O) if squeeze else out


def sa_stack(h: Tensor, net: "SeldNet") -> Tensor:
    cfg, p = net.config, net.params
    if h.shape[-1] != cfg.cnn_out_dim:
        raise DimensionError(f"sa_stack input width {h.shape[-1]} != {cfg.cnn_out_dim}")
    if cfg.use_pos_emb:
        h = h + p["posemb"]
    for n in range(1, cfg.n_blocks + 1):
        heads = [(p[f"sa.b{n}.h{m}.wq"], p[f"sa.b{n}.h{m}.wk"], p[f"sa.b{n}.h{m}.wv"])
                 for m in range(1, cfg.n_heads + 1)]
        out = mhsa(h, heads, p[f"sa.b{n}.wp"], cfg.scale_attention)
        if cfg.use_ln_residual:
            out = layer_norm(out + h, p[f"sa.b{n}.ln.gamma"], p[f"sa.b{n}.ln.beta"])
        h = out
    return h


def gru_stack(h: Tensor, net: "SeldNet") -> Tensor:
    for layer in range(1, net.config.gru_layers + 1):
        h = gru_bidirectional(h, net.gru_weights(layer, "fwd"), net.gru_weights(layer, "bwd"))
    return h


def head(h: Tensor, net: "SeldNet") -> Tensor:
    """FC1 -> FC2 -> tanh, reshaped to ``... x T' x C x 3``."""
    p = net.params
    y = linear(linear(h, p["fc1.w"], p["fc1.b"]), p["fc2.w"], p["fc2.b"])
    return tanh(y).reshape(*h.shape[:-1], net.config.n_classes, 3)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return (d * d).mean()


# -- the network ----------------------------------------------------------
class SeldNet:
    """Parameters, batch-norm state and forward pass for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in param_shapes(config).items():
            if name.endswith(("conv.b", ".beta", "fc1.b", "fc2.b")) or \
                    name.rsplit(".", 1)[-1] in ("bz", "br", "bh"):
                data = np.zeros(shape)
            elif name.endswith(".gamma"):
                data = np.ones(shape)
            elif name == "posemb":
                data = rng.uniform(-0.05, 0.05, shape)
            else:
                bound = 1.0 / np.sqrt(_fan_in(name, shape))
                data = rng.uniform(-bound, bound, shape)
            self.params[name] = Tensor(data, requires_grad=True, name=name)
        self.bn = [BatchNormState(self.params[f"cnn.b{n}.bn.gamma"], self.params[f"cnn.b{n}.bn.beta"],
                                  np.zeros(config.conv_channels), np.ones(config.conv_channels))
                   for n in range(1, len(config.pool_sizes) + 1)]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def gru_weights(self, layer: int, direction: str) -> GruWeights:
        pre = f"gru.l{layer}.{direction}"
        return GruWeights(*(self.params[f"{pre}.{g}"] for g in GRU_GATES))

    def temporal(self, h: Tensor) -> Tensor:
        return sa_stack(h, self) if self.config.temporal_module == "mhsa" else gru_stack(h, self)

    def forward(self, x, train: bool = False) -> Tensor:
        """Features (``B x 7 x T x F`` or unbatched) to ACCDOA output (``B x T' x C x 3``)."""
        x = as_tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape(1, *x.shape)
        cfg = self.config
        if x.shape[1:] != (cfg.in_channels, cfg.feature_frames, cfg.n_mels):
            raise DimensionError(f"expected features of shape (B, {cfg.in_channels}, "
                                 f"{cfg.feature_frames}, {cfg.n_mels}), got {x.shape}")
        y = head(self.temporal(cnn_extractor(x, self, train)), self)
        return y.reshape(*y.shape[1:]) if squeeze else y

    __call__ = forward

    # -- state --------------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, t in self.params.items():
            out[name] = t.data.copy()
        for n, bn in enumerate(self.bn, start=1):
            out[f"cnn.b{n}.bn.rmean"] = bn.running_mean.copy()
            out[f"cnn.b{n}.bn.rvar"] = bn.running_var.copy()
        return out

    def load_state_dict(self, state) -> None:
        expected = set(self.params) | {f"cnn.b{n}.bn.{s}" for n in range(1, len(self.bn) + 1)
                                       for s in ("rmean", "rvar")}
        got = set(state) - set(FEATSTAT_KEYS)
        if got != expected:
            missing, extra = sorted(expected - got), sorted(got - expected)
            raise ConfigError(f"checkpoint does not match config: missing {missing[:5]}, "
                              f"unexpected {extra[:5]}")
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr
        for n, bn in enumerate(self.bn, start=1):
            bn.running_mean = np.array(state[f"cnn.b{n}.bn.rmean"], dtype=np.float64)
            bn.running_var = np.array(state[f"cnn.b{n}.bn.rvar"], dtype=np.float64)


def is_trainable_entry(name: str) -> bool:
    return not name.endswith(BUFFER_SUFFIXES) and not name.startswith("featstat.")


def config_path_for(ckpt: str | os.PathLike) -> Path:
    return Path(ckpt).with_suffix(".json")


def save_checkpoint(path: str | os.PathLike, net: SeldNet,
                    stats: dsp.FeatureStats | None = None) -> None:
    state = net.state_dict()
    stats = stats or dsp.FeatureStats.identity()
    state["featstat.mean"] = stats.mean
    state["featstat.std"] = stats.std
    archive.save(path, state)
    with open(config_path_for(path), "w") as fh:
        json.dump(net.config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[SeldNet, dsp.FeatureStats]:
    with open(config_path_for(path)) as fh:
        config = ModelConfig.from_dict(json.load(fh))
    state = archive.load(path)
    net = SeldNet(config)
    net.load_state_dict(state)
    if not all(k in state for k in FEATSTAT_KEYS):
        raise ConfigError(f"{path}: checkpoint lacks feature statistics")
    return net, dsp.FeatureStats(state["featstat.mean"], state["featstat.std"])
