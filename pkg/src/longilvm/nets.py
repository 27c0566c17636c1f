"""Amortized encoders and decoders.

Encoders map a (zero-filled) observation or mask vector to the mean and
variance of a diagonal Gaussian; decoders map latent samples to a Gaussian
mean for the observations or Bernoulli probabilities for the mask.  Two
architectures are provided: a plain MLP and a convolutional pair for
square image data.  Final layers are zero-initialized so a freshly built
model decodes to zero means and 0.5 probabilities.
"""

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp

VARIANCE_FLOOR = 1e-6
PROB_EPS = 1e-6


@dataclass(frozen=True)
class MLPSpec:
    in_dim: int
    hidden: tuple
    out_dim: int
    kind: str = "mlp"


@dataclass(frozen=True)
class ConvEncoderSpec:
    side: int
    out_dim: int
    channels: int = 144
    kernel: int = 3
    stride: int = 2
    pool: int = 2
    hidden: tuple = (300, 30)
    kind: str = "conv_encoder"

    @property
    def in_dim(self):
        return self.side * self.side


@dataclass(frozen=True)
class ConvDecoderSpec:
    side: int
    in_dim: int
    hidden: tuple = (30, 300)
    base_side: int = 9
    base_channels: int = 32
    channels: int = 256
    kernel: int = 4
    kind: str = "conv_decoder"

    @property
    def out_dim(self):
        return self.side * self.side


def _dense_init(key, n_in, n_out, zero=False):
    if zero:
        w = jnp.zeros((n_in, n_out))
    else:
        w = jax.random.normal(key, (n_in, n_out)) * math.sqrt(2.0 / n_in)
    return {"w": w, "b": jnp.zeros((n_out,))}


def _conv_init(key, kernel, c_in, c_out, zero=False):
    shape = (kernel, kernel, c_in, c_out)
    if zero:
        w = jnp.zeros(shape)
    else:
        w = jax.random.normal(key, shape) * math.sqrt(2.0 / (kernel * kernel * c_in))
    return {"w": w, "b": jnp.zeros((c_out,))}


def init_params(spec, key):
    if spec.kind == "mlp":
        dims = (spec.in_dim,) + tuple(spec.hidden) + (spec.out_dim,)
        keys = jax.random.split(key, len(dims) - 1)
        return [
            _dense_init(k, a, b, zero=(i == len(dims) - 2))
            for i, (k, a, b) in enumerate(zip(keys, dims[:-1], dims[1:]))
        ]
    if spec.kind == "conv_encoder":
        keys = jax.random.split(key, 2 + len(spec.hidden))
        reduced = spec.side // spec.stride // spec.pool
        dims = (reduced * reduced * spec.channels,) + tuple(spec.hidden)
        layers = [_conv_init(keys[0], spec.kernel, 1, spec.channels)]
        layers += [
            _dense_init(k, a, b) for k, a, b in zip(keys[1:-1], dims[:-1], dims[1:])
        ]
        layers.append(_dense_init(keys[-1], dims[-1], spec.out_dim, zero=True))
        return layers
    if spec.kind == "conv_decoder":
        keys = jax.random.split(key, len(spec.hidden) + 4)
        dims = (spec.in_dim,) + tuple(spec.hidden)
        layers = [_dense_init(k, a, b) for k, a, b in zip(keys, dims[:-1], dims[1:])]
        base = spec.base_side * spec.base_side * spec.base_channels
        layers.append(_dense_init(keys[len(spec.hidden)], dims[-1], base))
        layers.append(_conv_init(keys[-3], spec.kernel, spec.base_channels, spec.channels))
        layers.append(_conv_init(keys[-2], spec.kernel, spec.channels, spec.channels))
        layers.append(_conv_init(keys[-1], 3, spec.channels, 1, zero=True))
        return layers
    raise ValueError(f"unknown net kind {spec.kind!r}")


def _conv(x, layer, stride):
    out = jax.lax.conv_general_dilated(
        x, layer["w"], window_strides=(stride, stride), padding="SAME",
        dimension_numbers=("NHWC", "HWIO", "NHWC"),
    )
    return out + layer["b"]


def _conv_transpose(x, layer, stride):
    out = jax.lax.conv_transpose(
        x, layer["w"], strides=(stride, stride), padding="SAME",
        dimension_numbers=("NHWC", "HWIO", "NHWC"),
    )
    return out + layer["b"]


def _max_pool(x, window):
    return jax.lax.reduce_window(
        x, -jnp.inf, jax.lax.max,
        window_dimensions=(1, window, window, 1),
        window_strides=(1, window, window, 1),
        padding="VALID",
    )


def apply(spec, params, x):
    """Forward pass on a batch of row vectors (N, in_dim) -> (N, out_dim)."""
    if spec.kind == "mlp":
        h = x
        for layer in params[:-1]:
            h = jax.nn.relu(h @ layer["w"] + layer["b"])
        return h @ params[-1]["w"] + params[-1]["b"]
    if spec.kind == "conv_encoder":
        h = x.reshape(-1, spec.side, spec.side, 1)
        h = jax.nn.relu(_conv(h, params[0], spec.stride))
        h = _max_pool(h, spec.pool)
        h = h.reshape(h.shape[0], -1)
        for layer in params[1:-1]:
            h = jax.nn.relu(h @ layer["w"] + layer["b"])
        return h @ params[-1]["w"] + params[-1]["b"]
    if spec.kind == "conv_decoder":
        h = x
        n_dense = len(spec.hidden) + 1
        for layer in params[:n_dense]:
            h = jax.nn.relu(h @ layer["w"] + layer["b"])
        h = h.reshape(-1, spec.base_side, spec.base_side, spec.base_channels)
        h = jax.nn.relu(_conv_transpose(h, params[n_dense], spec.kernel // 2))
        h = jax.nn.relu(_conv_transpose(h, params[n_dense + 1], spec.kernel // 2))
        h = _conv(h, params[n_dense + 2], 1)
        return h.reshape(h.shape[0], spec.out_dim)
    raise ValueError(f"unknown net kind {spec.kind!r}")


def encode(spec, params, x):
    """Diagonal Gaussian parameters from an encoder: (mean, variance).

    The raw second head goes through a softplus with a small floor so the
    variance stays strictly positive under unconstrained optimization.
    """
    out = apply(spec, params, x)
    latent = spec.out_dim // 2
    mean, raw = out[..., :latent], out[..., latent:]
    return mean, jax.nn.softplus(raw) + VARIANCE_FLOOR


def decode_mean(spec, params, z):
    """Gaussian mean head for observations."""
    return apply(spec, params, z)


def decode_probs(spec, params, z):
    """Bernoulli probability head for the mask, clamped inside (0, 1)."""
    return jnp.clip(jax.nn.sigmoid(apply(spec, params, z)), PROB_EPS, 1.0 - PROB_EPS)


def encoder_spec(kind, in_dim, latent, side=None, hidden=(300, 30)):
    if kind == "conv":
        return ConvEncoderSpec(side=side, out_dim=2 * latent, hidden=tuple(hidden))
    return MLPSpec(in_dim=in_dim, hidden=tuple(hidden), out_dim=2 * latent)


def decoder_spec(kind, latent_in, out_dim, side=None, hidden=(30, 30, 300)):
    if kind == "conv":
        return ConvDecoderSpec(side=side, in_dim=latent_in, hidden=tuple(hidden))
    return MLPSpec(in_dim=latent_in, hidden=tuple(hidden), out_dim=out_dim)
