"""The learned noise predictor.

Architecture per sampling block: spatial multi-head attention over the
trajectory's own features plus zero-masked neighbor context, a depthwise
temporal convolution, then a stack of two-layer residual MLPs; every
sublayer is wrapped as LayerNorm(x + sublayer(x)). Conditioning on the
noise level enters as a sinusoidal embedding of log(alpha_bar) added to the
features at the top of each block. Two linear heads read the trunk: one
emits the predicted noise for every feature channel, the other emits
per-step curvature and acceleration in physical units for the physics
regularizer.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import engine as en
from .engine import ShapeError, Tensor

CHECKPOINT_MAGIC = b"KDCK"
CHECKPOINT_VERSION = 1

NEG_INF = -1e30  # masked attention logits; exp underflows to exactly 0


class DenoiserError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    width: int = 32
    heads: int = 4
    sampling_blocks: int = 3
    resnet_blocks: int = 3
    kernel_size: int = 5
    max_context: int = 4
    in_features: int = 4
    kin_features: int = 2
    context_gain: float = 1.0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise DenoiserError(f"width {self.width} not divisible by heads {self.heads}")
        if self.sampling_blocks < 2 or self.resnet_blocks < 2:
            raise DenoiserError("need at least 2 sampling and 2 resnet blocks")
        if self.kernel_size % 2 != 1:
            raise DenoiserError("temporal kernel size must be odd")
        if self.context_gain < 0.0:
            raise DenoiserError("context_gain must be >= 0")

    @property
    def d_k(self):
        return self.width // self.heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_params(config, rng):
    """Fresh parameter dict keyed by layer path. Shapes are a pure function
    of the config, so checkpoint/config mismatches are detectable."""
    w = config.width
    p = {}

    def lin(name, fan_in, fan_out, gain=1.0):
        std = gain / np.sqrt(fan_in)
        p[f"{name}.w"] = Tensor(rng.normal((fan_in, fan_out)) * std)
        p[f"{name}.b"] = Tensor(np.zeros(fan_out))

    def ln(name):
        p[f"{name}.gain"] = Tensor(np.ones(w))
        p[f"{name}.bias"] = Tensor(np.zeros(w))

    lin("embed.l1", config.in_features, w)
    lin("embed.l2", w, w)
    lin("step.l1", w, w)
    lin("step.l2", w, w)
    for b in range(config.sampling_blocks):
        base = f"block{b}"
        for proj in ("wq", "wk", "wv", "wo"):
            lin(f"{base}.attn.{proj}", w, w)
        ln(f"{base}.ln_attn")
        kern = rng.normal((w, config.kernel_size)) * 0.1
        kern[:, config.kernel_size // 2] += 1.0  # start near identity
        p[f"{base}.conv.kern"] = Tensor(kern)
        lin(f"{base}.conv.proj", w, w)
        ln(f"{base}.ln_conv")
        for r in range(config.resnet_blocks):
            lin(f"{base}.res{r}.l1", w, w)
            lin(f"{base}.res{r}.l2", w, w)
            ln(f"{base}.res{r}.ln")
    lin("head.eps", w, config.in_features, gain=0.1)
    lin("head.kin", w, config.kin_features, gain=0.1)
    return p


_SHAPE_CACHE = {}


def param_shapes(config):
    cached = _SHAPE_CACHE.get(config)
    if cached is None:
        cached = {k: tuple(v.shape) for k, v in init_params(config, _ZeroRng()).items()}
        _SHAPE_CACHE[config] = cached
    return cached


class _ZeroRng:
    def normal(self, shape=()):
        return np.zeros(shape)


def validate_params(params, config):
    expected = param_shapes(config)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DenoiserError(f"param names do not match config (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise DenoiserError(
                f"param {name!r} has shape {tuple(params[name].shape)}, config wants {shape}")


# -- building blocks -------------------------------------------------------


def _linear(p, name, x):
    # flatten leading axes so the product is a single large GEMM
    w = p[f"{name}.w"]
    shape = x.shape
    if len(shape) > 2:
        flat = en.reshape(x, (-1, shape[-1]))
        out = flat @ w + p[f"{name}.b"]
        return en.reshape(out, shape[:-1] + (w.shape[1],))
    return x @ w + p[f"{name}.b"]


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-step normalization to zero mean / unit variance over the channel
    axis, then learned scale and shift."""
    return en.layernorm(x, gain, bias, eps)


def residual_block(x, sublayer_out, gain, bias):
    """LayerNorm(x + Sublayer(x))."""
    return layer_norm(x + sublayer_out, gain, bias)


def step_embedding(abar, width):
    """Sinusoidal encoding of log(alpha_bar); distinct noise levels map to
    distinct vectors and the map is smooth in alpha_bar."""
    abar = np.atleast_1d(np.asarray(abar, dtype=np.float64))
    if np.any(abar <= 0.0) or np.any(abar > 1.0):
        raise DenoiserError("abar must lie in (0, 1]")
    half = width // 2
    freqs = np.exp(np.linspace(np.log(0.3), np.log(30.0), half))
    ang = np.log(abar)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < width:
        emb = np.pad(emb, ((0, 0), (0, width - emb.shape[1])))
    return emb


def spatial_attention(q, keys, values, heads, mask_bias=None):
    """Multi-head scaled dot-product attention over a key set.

    q is (B, n, W); keys/values are (B, J, n, W) with J keys per time step
    (the self key plus neighbors). `mask_bias` (B, n, 1, J) is added to the
    logits (0 to keep, a large negative number to drop, log-gain to
    reweight). Per head the weights are a softmax over the J keys; head
    outputs are concatenated. Returns (mixed features (B, n, W), weights
    (B, n, H, J)).
    """
    B, n, W = q.shape
    J = keys.shape[1]
    if W % heads != 0 or keys.shape[-1] != W or values.shape[-1] != W:
        raise ShapeError("spatial_attention", q.shape, keys.shape)
    dk = W // heads
    q5 = en.reshape(q, (B, 1, n, heads, dk))
    k5 = en.reshape(keys, (B, J, n, heads, dk))
    v5 = en.transpose(en.reshape(values, (B, J, n, heads, dk)), (0, 2, 3, 1, 4))
    # logits[b,i,h,j] = q . k / sqrt(dk), via broadcast-mul + reduce (faster
    # than a stack of 1 x dk GEMMs)
    logits = en.transpose((q5 * k5).sum(axis=-1), (0, 2, 3, 1)) * (1.0 / np.sqrt(dk))
    if mask_bias is not None:
        logits = logits + mask_bias
    weights = en.softmax(logits, axis=-1)
    w5 = en.reshape(weights, (B, n, heads, J, 1))
    out = (w5 * v5).sum(axis=-2)  # (B, n, H, dk)
    return en.reshape(out, (B, n, W)), weights


def temporal_conv(features, kernel):
    """Depthwise 1-D convolution along the time axis, length preserving."""
    return en.conv1d(features, kernel)


def context_mask_bias(ctx_mask, n, gain):
    """Additive attention-logit bias from the neighbor mask, (B, n, 1, K+1).

    Key 0 is the self key (always on). Neighbor keys get log(gain)
    (context_gain 1 leaves them untouched, 0 removes them entirely) and a
    large negative bias wherever the neighbor does not overlap the step.
    """
    B, K = ctx_mask.shape[0], ctx_mask.shape[1]
    bias = np.zeros((B, n, 1, K + 1))
    if K == 0:
        return bias
    nb = np.where(ctx_mask > 0.0, 0.0, NEG_INF)  # (B, K, n)
    bias[..., 0, 1:] = np.transpose(nb, (0, 2, 1))
    if gain != 1.0:
        bias[..., 1:] += (np.log(gain) if gain > 0.0 else NEG_INF)
    return bias


def denoise_forward(params, config, x_t, abar, ctx_feats=None, ctx_mask=None):
    """Run the denoiser; returns (eps_hat, kin) graph nodes.

    x_t is (n, d) or (B, n, d) in normalized units; abar is a scalar or
    (B,) of noise levels; ctx_feats (B, K, n, d) and ctx_mask (B, K, n)
    supply the neighbor context (None means no neighbors). eps_hat matches
    x_t's shape; kin is (..., n, 2) with curvature (1/m) and acceleration
    (m/s^2) in physical units.
    """
    x_in = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    squeeze = x_in.ndim == 2
    if squeeze:
        x_in = x_in[None]
    B, n, d = x_in.shape
    if d != config.in_features:
        raise DenoiserError(f"input has {d} channels, config wants {config.in_features}")
    validate_params(params, config)

    if ctx_feats is None or ctx_feats.shape[1] == 0:
        ctx_feats = np.zeros((B, 0, n, d))
        ctx_mask = np.zeros((B, 0, n))
    if ctx_feats.shape[1] > config.max_context:
        ctx_feats = ctx_feats[:, :config.max_context]
        ctx_mask = ctx_mask[:, :config.max_context]
    K = ctx_feats.shape[1]

    x_node = x_t if isinstance(x_t, Tensor) else Tensor(x_in)
    if squeeze and isinstance(x_t, Tensor):
        x_node = en.reshape(x_node, (1, n, d))

    h = _linear(params, "embed.l2", en.silu(_linear(params, "embed.l1", x_node)))
    semb = step_embedding(abar, config.width)
    if semb.shape[0] == 1 and B > 1:
        semb = np.repeat(semb, B, axis=0)
    s = _linear(params, "step.l2", en.silu(_linear(params, "step.l1", Tensor(semb))))
    s3 = en.reshape(s, (B, 1, config.width))

    if K > 0:
        c = _linear(params, "embed.l2", en.silu(_linear(params, "embed.l1", Tensor(ctx_feats))))
    bias = context_mask_bias(ctx_mask, n, config.context_gain)

    for b in range(config.sampling_blocks):
        base = f"block{b}"
        h = h + s3
        q = _linear(params, f"{base}.attn.wq", h)
        k_self = en.reshape(_linear(params, f"{base}.attn.wk", h), (B, 1, n, config.width))
        v_self = en.reshape(_linear(params, f"{base}.attn.wv", h), (B, 1, n, config.width))
        if K > 0:
            k_nb = _linear(params, f"{base}.attn.wk", c)
            v_nb = _linear(params, f"{base}.attn.wv", c)
            keys = en.concat([k_self, k_nb], axis=1)
            values = en.concat([v_self, v_nb], axis=1)
        else:
            keys, values = k_self, v_self
        mixed, _ = spatial_attention(q, keys, values, config.heads, mask_bias=bias)
        attn_out = _linear(params, f"{base}.attn.wo", mixed)
        h = residual_block(h, attn_out, params[f"{base}.ln_attn.gain"],
                           params[f"{base}.ln_attn.bias"])

        conv = temporal_conv(h, params[f"{base}.conv.kern"])
        conv = en.silu(_linear(params, f"{base}.conv.proj", conv))
        h = residual_block(h, conv, params[f"{base}.ln_conv.gain"],
                           params[f"{base}.ln_conv.bias"])

        for r in range(config.resnet_blocks):
            u = _linear(params, f"{base}.res{r}.l2",
                        en.silu(_linear(params, f"{base}.res{r}.l1", h)))
            h = residual_block(h, u, params[f"{base}.res{r}.ln.gain"],
                               params[f"{base}.res{r}.ln.bias"])

    eps_hat = _linear(params, "head.eps", h)
    kin = _linear(params, "head.kin", h)
    if squeeze:
        eps_hat = en.reshape(eps_hat, (n, d))
        kin = en.reshape(kin, (n, config.kin_features))
    return eps_hat, kin


def as_model(params, config):
    """Wrap trained parameters as the sampling-time callable
    (x_t, abar, ctx_feats, ctx_mask) -> (eps_hat, kin) on numpy arrays."""

    def model(x_t, abar, ctx_feats=None, ctx_mask=None):
        eps_hat, kin = denoise_forward(params, config, x_t, abar, ctx_feats, ctx_mask)
        return eps_hat.data, kin.data

    return model


# -- checkpoint format ------------------------------------------------------


def save_checkpoint(path, params, config, normalizer, schedule_meta, step=0,
                    moments=None):
    """Versioned binary checkpoint: JSON header + named little-endian fp64
    blobs. `schedule_meta` is {"T", "beta1", "betaT", "digest"}; optimizer
    moments ride along as extra blobs so training can resume."""
    blobs = [(name, params[name].data) for name in sorted(params)]
    if moments is not None:
        for kind in ("m", "v"):
            store = getattr(moments, kind)
            blobs += [(f"adam_{kind}/{name}", store[name]) for name in sorted(store)]
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "normalizer": normalizer.to_dict(),
        "schedule": schedule_meta,
        "step": int(step),
        "adam_step": int(moments.step) if moments is not None else None,
        "blobs": [[name, list(arr.shape)] for name, arr in blobs],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back; returns a dict with params, config,
    normalizer dict, schedule meta, step, and any optimizer moments."""
    from .geodata import Normalizer

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DenoiserError(f"not a checkpoint file (magic {magic!r})")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise DenoiserError(f"unsupported checkpoint version {version}")
        head_len = struct.unpack("<Q", fh.read(8))[0]
        header = json.loads(fh.read(head_len).decode("utf-8"))
        params = {}
        adam_m, adam_v = {}, {}
        for name, shape in header["blobs"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
            if name.startswith("adam_m/"):
                adam_m[name[7:]] = arr
            elif name.startswith("adam_v/"):
                adam_v[name[7:]] = arr
            else:
                params[name] = Tensor(arr)
    config = DenoiserConfig.from_dict(header["config"])
    validate_params(params, config)
    return {
        "params": params,
        "config": config,
        "normalizer": Normalizer.from_dict(header["normalizer"]),
        "schedule": header["schedule"],
        "step": header["step"],
        "adam_step": header.get("adam_step"),
        "adam_m": adam_m or None,
        "adam_v": adam_v or None,
    }
