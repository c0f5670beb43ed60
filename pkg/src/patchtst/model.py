"""Patch Transformer forecaster: embedding, encoder, forecast and reconstruction heads.

Activations inside the network are token-major, ``[rows, N, D]`` (rows are
``batch*channels`` in channel-independent mode, ``batch`` in channel-mixing
mode). Weights keep their mathematical shapes, e.g. ``embed.W_p`` is
``[D, P]`` and maps a patch vector ``p`` to ``W_p @ p``.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import INSTANCE_EPS, instance_normalize
from .errors import ConfigError, ShapeError
from .patching import (NONOVERLAP, PADDED, PatchConfig, PatchMask, apply_mask,
                       channel_independent_reshape, channel_mixing_reshape, sample_mask)

INDEPENDENT = "independent"
MIXING = "mixing"
FORECAST = "forecast"
RECONSTRUCT = "reconstruct"


@dataclass(frozen=True)
class ModelConfig:
    L: int = 336
    T: int = 96
    P: int = 16
    S: int = 8
    d_model: int = 128
    n_heads: int = 16
    d_ff: int = 256
    n_layers: int = 3
    dropout: float = 0.2
    channel_mode: str = INDEPENDENT
    instance_norm: bool = True
    head_kind: str = FORECAST
    patch_mode: str = PADDED
    n_channels: int = 0  # only used by the channel-mixing variant
    init_scale: float = 0.02
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.channel_mode not in (INDEPENDENT, MIXING):
            raise ConfigError(f"unknown channel_mode {self.channel_mode!r}")
        if self.head_kind not in (FORECAST, RECONSTRUCT):
            raise ConfigError(f"unknown head_kind {self.head_kind!r}")
        if self.channel_mode == MIXING and self.n_channels < 1:
            raise ConfigError("channel-mixing mode needs n_channels")
        if self.channel_mode == MIXING and self.head_kind == RECONSTRUCT:
            raise ConfigError("masked pretraining is only defined for channel-independent models")
        if min(self.L, self.T, self.d_ff) < 1:
            raise ConfigError("L, T and d_ff must be positive")
        if self.L < self.P:
            raise ConfigError(f"look-back L={self.L} is shorter than patch length P={self.P}")
        self.patch_config  # validates P, S, mode

    @property
    def patch_config(self):
        return PatchConfig(self.P, self.S, self.patch_mode)

    @property
    def N(self):
        return self.patch_config.count(self.L)

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    @property
    def token_width(self):
        return self.P * (self.n_channels if self.channel_mode == MIXING else 1)

    @property
    def head_out(self):
        return self.T * (self.n_channels if self.channel_mode == MIXING else 1)

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# -- parameters ------------------------------------------------------------

def trunk_shapes(cfg: ModelConfig):
    D, F = cfg.d_model, cfg.d_ff
    shapes = {"embed.W_p": (D, cfg.token_width), "embed.W_pos": (D, cfg.N)}
    for i in range(cfg.n_layers):
        p = f"encoder.{i}."
        shapes.update({
            p + "attn.W_Q": (D, D), p + "attn.W_K": (D, D),
            p + "attn.W_V": (D, D), p + "attn.W_O": (D, D),
            p + "norm1.weight": (D,), p + "norm1.bias": (D,),
            p + "ffn.W_1": (F, D), p + "ffn.b_1": (F,),
            p + "ffn.W_2": (D, F), p + "ffn.b_2": (D,),
            p + "norm2.weight": (D,), p + "norm2.bias": (D,),
        })
    return shapes


def head_shapes(cfg: ModelConfig):
    if cfg.head_kind == FORECAST:
        return {"head.W": (cfg.head_out, cfg.N * cfg.d_model), "head.b": (cfg.head_out,)}
    return {"head.W": (cfg.P, cfg.d_model), "head.b": (cfg.P,)}


def bn_names(cfg: ModelConfig):
    return [f"encoder.{i}.{n}" for i in range(cfg.n_layers) for n in ("norm1", "norm2")]


def _init_array(name, shape, scale, rng):
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "weight":
        return np.ones(shape)
    if leaf in ("bias", "b", "b_1", "b_2"):
        return np.zeros(shape)
    return rng.uniform(-scale, scale, size=shape)


class ModelParams:
    """Learnable tensors keyed by canonical name, plus BatchNorm running statistics."""

    def __init__(self, tensors: dict, bn: dict):
        self.tensors = tensors
        self.bn = bn

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator):
        tensors = {}
        for name, shape in {**trunk_shapes(cfg), **head_shapes(cfg)}.items():
            tensors[name] = Tensor(_init_array(name, shape, cfg.init_scale, rng), requires_grad=True)
        bn = {n: ad.BatchNormState.fresh(cfg.d_model, cfg.bn_momentum, cfg.bn_eps) for n in bn_names(cfg)}
        return cls(tensors, bn)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def trunk_names(self):
        return [n for n in self.tensors if not n.startswith("head.")]

    def head_names(self):
        return [n for n in self.tensors if n.startswith("head.")]

    def arrays(self, include_head=True):
        """Ordered name -> ndarray view, running statistics included."""
        out = {}
        for name, t in self.tensors.items():
            if include_head or not name.startswith("head."):
                out[name] = t.data
        for name, st in self.bn.items():
            out[name + ".running_mean"] = st.running_mean
            out[name + ".running_var"] = st.running_var
        return out

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict, require_head=True):
        expected = {**trunk_shapes(cfg), **head_shapes(cfg)}
        tensors = {}
        for name, shape in expected.items():
            if name not in arrays:
                if name.startswith("head.") and not require_head:
                    continue
                raise ShapeError(f"missing parameter {name}")
            a = np.array(arrays[name], dtype=np.float64)
            if a.shape != tuple(shape):
                raise ShapeError(f"parameter {name} has shape {a.shape}, expected {tuple(shape)}")
            tensors[name] = Tensor(a, requires_grad=True)
        bn = {}
        for name in bn_names(cfg):
            bn[name] = ad.BatchNormState(np.array(arrays[name + ".running_mean"], dtype=np.float64),
                                         np.array(arrays[name + ".running_var"], dtype=np.float64),
                                         cfg.bn_momentum, cfg.bn_eps)
        return cls(tensors, bn)

    def copy(self):
        return ModelParams({n: Tensor(t.data.copy(), t.requires_grad) for n, t in self.tensors.items()},
                           copy.deepcopy(self.bn))

    def fingerprint(self, names=None):
        h = hashlib.sha256()
        for name, a in self.arrays().items():
            if names is None or name in names or name.rsplit(".", 1)[0] in names:
                h.update(name.encode())
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def count(self, names=None):
        return sum(self.tensors[n].size for n in (names or self.tensors))


# -- building blocks ---------------------------------------------------------

def linear(x, W, b=None):
    """``x[..., in] @ W.T + b`` for a weight stored as ``[out, in]``."""
    lead = x.shape[:-1]
    y = ad.reshape(x, (-1, x.shape[-1])) @ ad.transpose(W)
    if b is not None:
        y = y + b
    return ad.reshape(y, lead + (W.shape[0],))


def embed(patches, W_p, W_pos):
    """Patch values ``[rows, P, N]`` -> token embeddings ``[rows, N, D]``."""
    patches = ad.as_tensor(patches)
    if patches.shape[-1] != W_pos.shape[1]:
        raise ShapeError(f"input has {patches.shape[-1]} patches but W_pos was built for {W_pos.shape[1]}")
    tokens = ad.transpose(patches, (0, 2, 1))
    return linear(tokens, W_p) + ad.transpose(W_pos)


def attention(x, p, n_heads, dropout=0.0, rng=None, training=False, record=None):
    """Multi-head scaled dot-product self-attention over ``x [rows, N, D]``.

    ``p`` maps ``W_Q``, ``W_K``, ``W_V``, ``W_O`` (each ``[D, D]``, used as
    ``x @ W``) to tensors. Post-softmax matrices ``[rows, H, N, N]`` are
    appended to ``record`` when it is a list.
    """
    rows, N, D = x.shape
    dk = D // n_heads
    flat = ad.reshape(x, (rows * N, D))

    def heads(W):
        return ad.transpose(ad.reshape(flat @ W, (rows, N, n_heads, dk)), (0, 2, 1, 3))

    q, k, v = heads(p["W_Q"]), heads(p["W_K"]), heads(p["W_V"])
    scores = ad.mul(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dk))
    attn = ad.softmax_lastdim(scores)
    if record is not None:
        record.append(attn.data)
    attn = ad.dropout(attn, dropout, rng, training)
    o = ad.reshape(ad.transpose(attn @ v, (0, 2, 1, 3)), (rows * N, D))
    return ad.reshape(o @ p["W_O"], (rows, N, D))


def _bn_tokens(x, gamma, beta, state, training):
    y = ad.batchnorm(ad.transpose(x, (0, 2, 1)), gamma, beta, state, training)
    return ad.transpose(y, (0, 2, 1))


def encoder_layer(x, params: ModelParams, index, n_heads, dropout=0.0, rng=None,
                  training=False, record=None):
    """Post-norm block: BN(x + attn(x)) then BN(y + FFN(y))."""
    pre = f"encoder.{index}."
    attn_p = {k: params[pre + "attn." + k] for k in ("W_Q", "W_K", "W_V", "W_O")}
    a = attention(x, attn_p, n_heads, dropout, rng, training, record)
    y = x + ad.dropout(a, dropout, rng, training)
    y = _bn_tokens(y, params[pre + "norm1.weight"], params[pre + "norm1.bias"],
                   params.bn[pre + "norm1"], training)
    h = ad.gelu(linear(y, params[pre + "ffn.W_1"], params[pre + "ffn.b_1"]))
    f = linear(h, params[pre + "ffn.W_2"], params[pre + "ffn.b_2"])
    z = y + ad.dropout(f, dropout, rng, training)
    return _bn_tokens(z, params[pre + "norm2.weight"], params[pre + "norm2.bias"],
                      params.bn[pre + "norm2"], training)


def forecast_head(z, W, b):
    """Flatten ``[rows, N, D]`` token-major to ``[rows, N*D]`` and map to ``[rows, T]``."""
    rows, N, D = z.shape
    if W.shape[1] != N * D:
        raise ShapeError(f"head expects {W.shape[1] // D} patches, got {N}")
    return linear(ad.reshape(z, (rows, N * D)), W, b)


def reconstruct_head(z, W, b):
    """Token-wise ``[P, D]`` projection: ``[rows, N, D] -> [rows, P, N]``."""
    return ad.transpose(linear(z, W, b), (0, 2, 1))


# -- model -----------------------------------------------------------------

class PatchTST:
    def __init__(self, cfg: ModelConfig, params: ModelParams | None = None, seed: int = 2021):
        self.cfg = cfg
        self.seed = seed
        self.params = params if params is not None else ModelParams.init(cfg, np.random.default_rng([seed, 1]))
        self.rng = np.random.default_rng([seed, 2])
        self.training = True

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def parameters(self, names=None):
        return [self.params[n] for n in (names or self.params.names())]

    def set_trainable(self, names, flag):
        for n in names:
            self.params[n].requires_grad = flag

    # -- pieces --
    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.cfg.L:
            raise ShapeError(f"expected input [B, M, {self.cfg.L}], got {x.shape}")
        if self.cfg.channel_mode == MIXING and x.shape[1] != self.cfg.n_channels:
            raise ShapeError(f"mixing model built for {self.cfg.n_channels} channels, got {x.shape[1]}")
        return x

    def _normalize(self, x):
        if self.cfg.instance_norm:
            return instance_normalize(x)
        return x, None, None

    def patch(self, x):
        """``[B, M, L]`` -> token rows ``[rows, P_tok, N]`` for the configured channel mode."""
        patches = self.cfg.patch_config.apply(x)  # [B, M, P, N]
        if self.cfg.channel_mode == MIXING:
            return channel_mixing_reshape(patches)
        return channel_independent_reshape(patches).values

    def encode(self, tokens, record=None):
        p = self.params
        z = embed(tokens, p["embed.W_p"], p["embed.W_pos"])
        z = ad.dropout(z, self.cfg.dropout, self.rng, self.training)
        for i in range(self.cfg.n_layers):
            z = encoder_layer(z, p, i, self.cfg.n_heads, self.cfg.dropout, self.rng,
                              self.training, record)
        return z

    # -- forwards --
    def forward(self, x, denormalize=True):
        """Supervised forecast ``[B, M, L] -> [B, M, T]``.

        With ``denormalize=False`` the prediction stays in instance-normalised
        space; the instance statistics are then available as ``self.last_stats``.
        """
        if self.cfg.head_kind != FORECAST:
            raise ConfigError("model has a reconstruction head; use forward_pretrain")
        x = self._check_input(x)
        B, M, _ = x.shape
        xn, mu, sd = self._normalize(x)
        self.last_stats = (mu, sd)
        z = self.encode(self.patch(xn))
        out = forecast_head(z, self.params["head.W"], self.params["head.b"])
        out = ad.reshape(out, (B, M, self.cfg.T))
        if self.cfg.instance_norm and denormalize:
            out = out * (sd + INSTANCE_EPS)[..., None] + mu[..., None]
        return out

    __call__ = forward

    def forward_pretrain(self, x, mask: PatchMask | None = None, ratio=0.4, rng=None):
        """Masked reconstruction. Returns ``(recon [B, M, P, N], target patches, mask)``.

        Targets are the instance-normalised patches; masked tokens are zeroed
        before the embedding.
        """
        cfg = self.cfg
        if cfg.head_kind != RECONSTRUCT:
            raise ConfigError("model has a forecast head; build it with head_kind='reconstruct'")
        if cfg.patch_mode != NONOVERLAP:
            raise ConfigError("masked pretraining needs non-overlapping patches so visible "
                              "patches carry no information about masked ones")
        x = self._check_input(x)
        B, M, _ = x.shape
        xn, _, _ = self._normalize(x)
        tokens = self.patch(xn)
        if mask is None:
            mask = sample_mask(tokens.shape[0], cfg.N, ratio, rng if rng is not None else self.rng)
        visible = apply_mask(tokens, mask)
        self.last_masked_input = visible
        z = self.encode(visible)
        recon = reconstruct_head(z, self.params["head.W"], self.params["head.b"])
        recon = ad.reshape(recon, (B, M, cfg.P, cfg.N))
        return recon, tokens.reshape(B, M, cfg.P, cfg.N), mask

    def export_attention(self, x):
        """Attention maps averaged over heads and layers, ``[B, rows_per_item, N, N]``.

        In channel-independent mode the second axis is the channel.
        """
        x = self._check_input(x)
        B = x.shape[0]
        xn, _, _ = self._normalize(x)
        record = []
        was = self.training
        self.eval()
        try:
            with ad.no_grad():
                self.encode(self.patch(xn), record=record)
        finally:
            self.train(was)
        avg = np.mean([r.mean(axis=1) for r in record], axis=0)
        return avg.reshape(B, -1, self.cfg.N, self.cfg.N)

    def predict(self, x, batch_size=256):
        """Eval-mode, gradient-free forecast as a numpy array."""
        x = self._check_input(x)
        was = self.training
        self.eval()
        try:
            with ad.no_grad():
                out = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        finally:
            self.train(was)
        return np.concatenate(out, axis=0)


def with_head(model: PatchTST, cfg: ModelConfig, seed: int) -> PatchTST:
    """New model for ``cfg`` reusing ``model``'s trunk and a fresh head.

    The trunk is shared only in shape: arrays are copied.
    """
    src = model.params
    want = trunk_shapes(cfg)
    for name, shape in want.items():
        have = src[name].shape
        if have != tuple(shape):
            what = "patch length" if name == "embed.W_p" else "patch count" if name == "embed.W_pos" else "shape"
            raise ShapeError(f"cannot reuse trunk: {name} has {have}, target needs {tuple(shape)} ({what} mismatch)")
    fresh = ModelParams.init(cfg, np.random.default_rng([seed, 1]))
    tensors = {n: Tensor(src[n].data.copy(), requires_grad=True) for n in want}
    tensors.update({n: fresh[n] for n in fresh.head_names()})
    return PatchTST(cfg, ModelParams(tensors, copy.deepcopy(src.bn)), seed=seed)


def forecast_config_from(pretrain_cfg: ModelConfig, T: int) -> ModelConfig:
    return pretrain_cfg.replace(head_kind=FORECAST, T=T)

