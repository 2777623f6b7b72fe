"""Transformer encoder mapping (L, D) frames to latent vectors.

Pre-norm residual blocks with standard multi-head self-attention, sinusoidal
absolute positions, and mean/sum pooling over time followed by a projection
to the latent dimension. Built entirely on diffcore tensors so training can
backpropagate through every weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .special import LOG_2PI


@dataclass
class EncoderConfig:
    input_dim: int
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    dropout: float = 0.1
    pooling_mode: str = "mean"
    dim_feedforward: int = 128
    latent_dim: int = 16
    positional_encoding: str = "sinusoidal"

    def validate(self) -> None:
        if self.input_dim < 1 or self.model_dim < 1 or self.latent_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.num_layers < 1 or self.num_heads < 1 or self.dim_feedforward < 1:
            raise ValueError("layer counts must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.pooling_mode not in ("mean", "sum"):
            raise ValueError(f"unknown pooling_mode {self.pooling_mode!r}")
        if self.positional_encoding not in ("sinusoidal", "none"):
            raise ValueError(f"unknown positional_encoding {self.positional_encoding!r}")


@dataclass
class EncoderParams:
    """Named weight tensors; iteration order is fixed for determinism."""

    tensors: dict[str, dc.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> dc.Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def leaves(self) -> list[dc.Tensor]:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(config: EncoderConfig, seed: int) -> EncoderParams:
    """Seeded uniform(+-1/sqrt(fan_in)) init; norm gains start at identity."""
    config.validate()
    rng = np.random.default_rng(seed)
    d_in, m, ff, d_out = (config.input_dim, config.model_dim,
                          config.dim_feedforward, config.latent_dim)
    p: dict[str, np.ndarray] = {}
    p["in_proj.weight"] = _uniform(rng, (d_in, m), d_in)
    p["in_proj.bias"] = _uniform(rng, (m,), d_in)
    for i in range(config.num_layers):
        pre = f"layer{i}."
        p[pre + "attn_norm.gain"] = np.ones(m)
        p[pre + "attn_norm.bias"] = np.zeros(m)
        for name in ("q", "k", "v", "out"):
            p[pre + f"attn.{name}.weight"] = _uniform(rng, (m, m), m)
            p[pre + f"attn.{name}.bias"] = _uniform(rng, (m,), m)
        p[pre + "ff_norm.gain"] = np.ones(m)
        p[pre + "ff_norm.bias"] = np.zeros(m)
        p[pre + "ff1.weight"] = _uniform(rng, (m, ff), m)
        p[pre + "ff1.bias"] = _uniform(rng, (ff,), m)
        p[pre + "ff2.weight"] = _uniform(rng, (ff, m), ff)
        p[pre + "ff2.bias"] = _uniform(rng, (m,), ff)
    p["final_norm.gain"] = np.ones(m)
    p["final_norm.bias"] = np.zeros(m)
    p["out_proj.weight"] = _uniform(rng, (m, d_out), m)
    p["out_proj.bias"] = _uniform(rng, (d_out,), m)
    return EncoderParams({k: dc.Tensor(v, requires_grad=True) for k, v in p.items()})


def expected_num_parameters(config: EncoderConfig) -> int:
    """Analytic parameter count for a config (weights, biases, norm affines)."""
    m, ff = config.model_dim, config.dim_feedforward
    per_layer = 2 * m + 4 * (m * m + m) + 2 * m + (m * ff + ff) + (ff * m + m)
    return (config.input_dim * m + m) + config.num_layers * per_layer \
        + 2 * m + (m * config.latent_dim + config.latent_dim)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim - dim // 2])
    return pe


def _affine_norm(x: dc.Tensor, gain: dc.Tensor, bias: dc.Tensor) -> dc.Tensor:
    return dc.add(dc.mul(dc.layer_norm(x), gain), bias)


def _linear(x: dc.Tensor, w: dc.Tensor, b: dc.Tensor) -> dc.Tensor:
    return dc.add(dc.matmul(x, w), b)


def _dropout(x: dc.Tensor, rate: float, rng: np.random.Generator | None) -> dc.Tensor:
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return dc.mul(x, dc.constant(mask))


def encode(batch: np.ndarray, params: EncoderParams, config: EncoderConfig,
           train_mode: bool = False,
           dropout_rng: np.random.Generator | None = None) -> dc.Tensor:
    """Map a (B, L, D) batch of frames to (B, latent_dim) embeddings.

    In eval mode (train_mode False) dropout is disabled and the output is a
    deterministic function of (params, batch).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.ndim != 3 or batch.shape[-1] != config.input_dim:
        raise dc.ShapeMismatchError(
            f"encode: expected batch (B, L, {config.input_dim}), got {batch.shape}")
    _, length, _ = batch.shape
    rng = dropout_rng if (train_mode and config.dropout > 0.0) else None

    h = _linear(dc.constant(batch), params["in_proj.weight"], params["in_proj.bias"])
    if config.positional_encoding == "sinusoidal":
        h = dc.add(h, dc.constant(sinusoidal_positions(length, config.model_dim)))

    n_heads = config.num_heads
    head_dim = config.model_dim // n_heads
    scale = 1.0 / math.sqrt(head_dim)

    for i in range(config.num_layers):
        pre = f"layer{i}."
        a = _affine_norm(h, params[pre + "attn_norm.gain"], params[pre + "attn_norm.bias"])

        def heads(t: dc.Tensor) -> dc.Tensor:
            t = dc.reshape(t, (-1, length, n_heads, head_dim))
            return dc.transpose(t, (0, 2, 1, 3))  # (B, H, L, hd)

        q = heads(_linear(a, params[pre + "attn.q.weight"], params[pre + "attn.q.bias"]))
        k = heads(_linear(a, params[pre + "attn.k.weight"], params[pre + "attn.k.bias"]))
        v = heads(_linear(a, params[pre + "attn.v.weight"], params[pre + "attn.v.bias"]))
        scores = dc.scalar_mul(dc.matmul(q, dc.transpose(k)), scale)
        attn = dc.row_softmax(scores)
        attn = _dropout(attn, config.dropout, rng)
        ctx = dc.transpose(dc.matmul(attn, v), (0, 2, 1, 3))
        ctx = dc.reshape(ctx, (-1, length, config.model_dim))
        ctx = _linear(ctx, params[pre + "attn.out.weight"], params[pre + "attn.out.bias"])
        h = dc.add(h, _dropout(ctx, config.dropout, rng))

        a2 = _affine_norm(h, params[pre + "ff_norm.gain"], params[pre + "ff_norm.bias"])
        f = dc.relu(_linear(a2, params[pre + "ff1.weight"], params[pre + "ff1.bias"]))
        f = _linear(f, params[pre + "ff2.weight"], params[pre + "ff2.bias"])
        h = dc.add(h, _dropout(f, config.dropout, rng))

    h = _affine_norm(h, params["final_norm.gain"], params["final_norm.bias"])
    pooled = dc.mean_reduce(h, axis=1) if config.pooling_mode == "mean" \
        else dc.sum_reduce(h, axis=1)
    return _linear(pooled, params["out_proj.weight"], params["out_proj.bias"])


def marginal_baseline_score(z: dc.Tensor, mu: np.ndarray, sigma: np.ndarray) -> dc.Tensor:
    """Diagonal-Gaussian log-density of standardized latents, shape (B,).

    Equals the full multivariate Gaussian score with the correlation forced
    to identity; serves as the marginal-only baseline scorer.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("marginal_baseline_score: sigma components must be positive")
    zs = dc.mul(dc.sub(z, dc.constant(mu)), dc.constant(1.0 / sigma))
    quad = dc.scalar_mul(dc.sum_reduce(dc.mul(zs, zs), axis=-1), -0.5)
    const = -float(np.sum(np.log(sigma))) - 0.5 * LOG_2PI * mu.shape[-1]
    return dc.add(quad, dc.constant(const))
