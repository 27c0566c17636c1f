"""Additive longitudinal covariance functions.

A kernel is a sum of components over named covariate columns: squared
exponential over continuous columns, an indicator kernel over one
categorical column, or a product of the two (interaction terms such as
id x time).  The instance-id components are kept separable from the rest
because the scalable KL bound treats them exactly, as block-diagonal
per-patient pieces.

A separate kernel acts on vectors of elapsed times to the D most recent
events; entries are infinite where the history is shorter than the lag
order, and such entries contribute nothing.
"""

from dataclasses import dataclass
from typing import NamedTuple

import jax.numpy as jnp
import numpy as np

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

VALID_KINDS = ("se", "categorical", "product")


@dataclass(frozen=True)
class KernelComponent:
    """One additive term: kind plus the covariate columns it reads."""

    kind: str
    cat_cols: tuple = ()
    cont_cols: tuple = ()

    @property
    def uses_id(self):
        return "id" in self.cat_cols

    def validate(self):
        if self.kind not in VALID_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "se" and (self.cat_cols or not self.cont_cols):
            raise ValueError("se component takes continuous inputs only")
        if self.kind == "categorical" and (len(self.cat_cols) != 1 or self.cont_cols):
            raise ValueError("categorical component takes exactly one categorical input")
        if self.kind == "product" and (len(self.cat_cols) != 1 or not self.cont_cols):
            raise ValueError(
                "product component combines exactly one categorical input "
                "with at least one continuous input"
            )


@dataclass(frozen=True)
class AdditiveKernelSpec:
    """Component structure of one additive kernel (shared across latent dims)."""

    components: tuple

    def __post_init__(self):
        for c in self.components:
            c.validate()
        if not any(c.uses_id for c in self.components):
            raise ValueError("additive kernel needs at least one component on the id column")

    @property
    def n_components(self):
        return len(self.components)

    @property
    def n_lengthscales(self):
        return sum(len(c.cont_cols) for c in self.components)

    def lengthscale_slices(self):
        slices, start = [], 0
        for c in self.components:
            stop = start + len(c.cont_cols)
            slices.append((start, stop))
            start = stop
        return slices


def make_component(kind, inputs, column_kinds):
    """Resolve a (kind, input names) pair against the covariate schema."""
    cat, cont = [], []
    for name in inputs:
        if name not in column_kinds:
            raise KeyError(f"kernel input column {name!r} is not a known covariate")
        (cat if column_kinds[name] == CATEGORICAL else cont).append(name)
    comp = KernelComponent(kind=kind, cat_cols=tuple(cat), cont_cols=tuple(cont))
    comp.validate()
    return comp


class KernelParams(NamedTuple):
    """Hyperparameters for one additive kernel (optionally stacked over dims).

    All fields are stored on log scale so unconstrained optimization keeps
    variances nonnegative and lengthscales positive.
    """

    log_variance: jnp.ndarray    # (..., R)
    log_lengthscale: jnp.ndarray  # (..., total continuous inputs)
    log_noise: jnp.ndarray       # (...,)  latent noise sigma_z^2


def init_kernel_params(spec, n_dims=None, variance=1.0, lengthscale=1.0, noise=0.1):
    if variance < 0:
        raise ValueError("kernel variance must be nonnegative")
    if lengthscale <= 0 or noise <= 0:
        raise ValueError("lengthscale and latent noise must be positive")
    shape = () if n_dims is None else (n_dims,)
    return KernelParams(
        log_variance=jnp.full(shape + (spec.n_components,), np.log(variance)),
        log_lengthscale=jnp.full(shape + (spec.n_lengthscales,), np.log(lengthscale)),
        log_noise=jnp.full(shape, np.log(noise)),
    )


def _component_matrix(comp, gamma, lengthscales, x1, x2, cols):
    out = gamma * jnp.ones((x1.shape[0], x2.shape[0]), dtype=x1.dtype)
    for name in comp.cat_cols:
        c = cols[name]
        out = out * (x1[:, c, None] == x2[None, :, c])
    if comp.cont_cols:
        d2 = jnp.zeros((x1.shape[0], x2.shape[0]), dtype=x1.dtype)
        for i, name in enumerate(comp.cont_cols):
            c = cols[name]
            diff = x1[:, c, None] - x2[None, :, c]
            d2 = d2 + (diff / lengthscales[i]) ** 2
        out = out * jnp.exp(-0.5 * d2)
    return out


def _sum_components(spec, params, x1, x2, cols, keep):
    gammas = jnp.exp(params.log_variance)
    lens = jnp.exp(params.log_lengthscale)
    out = jnp.zeros((x1.shape[0], x2.shape[0]), dtype=x1.dtype)
    for r, ((start, stop), comp) in enumerate(zip(spec.lengthscale_slices(), spec.components)):
        if keep(comp):
            out = out + _component_matrix(comp, gammas[r], lens[start:stop], x1, x2, cols)
    return out


def eval_component(comp, gamma, lengthscales, x1, x2, cols):
    """Single-component covariance matrix between two covariate matrices."""
    if gamma < 0:
        raise ValueError("kernel variance must be nonnegative")
    for name in comp.cat_cols + comp.cont_cols:
        if name not in cols:
            raise KeyError(f"covariate column {name!r} missing from input")
    return _component_matrix(
        comp, jnp.asarray(gamma, dtype=jnp.float64), jnp.asarray(lengthscales), x1, x2, cols
    )


def eval_additive(spec, params, x1, x2, cols, add_noise=False):
    """Full additive kernel matrix; latent noise on the diagonal if requested."""
    out = _sum_components(spec, params, x1, x2, cols, keep=lambda c: True)
    if add_noise:
        if x1.shape[0] != x2.shape[0]:
            raise ValueError("noise can only be added on a square matrix of identical inputs")
        out = out + jnp.exp(params.log_noise) * jnp.eye(x1.shape[0], dtype=x1.dtype)
    return out


def non_id_matrix(spec, params, x1, x2, cols):
    """Sum of the components that do not touch the id column (the shared part)."""
    return _sum_components(spec, params, x1, x2, cols, keep=lambda c: not c.uses_id)


def id_matrix(spec, params, x1, x2, cols):
    """Sum of the id-bound components (block diagonal across patients)."""
    return _sum_components(spec, params, x1, x2, cols, keep=lambda c: c.uses_id)


def patient_block(spec, params, x_p, cols):
    """Per-patient covariance of the id components plus latent noise."""
    block = id_matrix(spec, params, x_p, x_p, cols)
    return block + jnp.exp(params.log_noise) * jnp.eye(x_p.shape[0], dtype=x_p.dtype)


def eval_split(spec, params, x, cols, patient_offsets):
    """Split the kernel on patient-sorted inputs into shared + per-patient parts.

    Returns ``(K_A, blocks)`` where ``K_A`` is the non-id component sum over
    all inputs and ``blocks[p]`` is the id-component block of patient ``p``
    with latent noise on the diagonal, so that the full noisy kernel equals
    ``K_A + blockdiag(blocks)``.
    """
    offsets = np.asarray(patient_offsets)
    if offsets[0] != 0 or offsets[-1] != x.shape[0] or np.any(np.diff(offsets) <= 0):
        raise ValueError("inputs must be sorted by patient with valid offsets")
    k_a = non_id_matrix(spec, params, x, x, cols)
    blocks = [
        patient_block(spec, params, x[a:b], cols) for a, b in zip(offsets[:-1], offsets[1:])
    ]
    return k_a, blocks


class LagKernelParams(NamedTuple):
    """Per-lag SE hyperparameters of the event-history kernel (log scale)."""

    log_variance: jnp.ndarray     # (D,)
    log_lengthscale: jnp.ndarray  # (D,)

    @property
    def depth(self):
        return self.log_variance.shape[-1]


def init_lag_params(depth, variance=1.0, lengthscale=1.0):
    if depth < 1:
        raise ValueError("lag depth must be at least 1")
    if variance < 0 or lengthscale <= 0:
        raise ValueError("invalid lag kernel hyperparameters")
    return LagKernelParams(
        log_variance=jnp.full((depth,), np.log(max(variance, 1e-300))),
        log_lengthscale=jnp.full((depth,), np.log(lengthscale)),
    )


def lag_kernel_matrix(params, v1, v2):
    """Kernel between two sets of lag vectors; infinite lags contribute 0."""
    f1 = jnp.isfinite(v1)
    f2 = jnp.isfinite(v2)
    a = jnp.where(f1, v1, 0.0)
    b = jnp.where(f2, v2, 0.0)
    gamma = jnp.exp(params.log_variance)
    ell = jnp.exp(params.log_lengthscale)
    diff = a[:, None, :] - b[None, :, :]
    terms = gamma * jnp.exp(-0.5 * (diff / ell) ** 2)
    terms = terms * f1[:, None, :] * f2[None, :, :]
    return jnp.sum(terms, axis=-1)


def eval_lag_kernel(params, v1, v2):
    """Validating wrapper around :func:`lag_kernel_matrix`."""
    v1 = jnp.atleast_2d(jnp.asarray(v1, dtype=jnp.float64))
    v2 = jnp.atleast_2d(jnp.asarray(v2, dtype=jnp.float64))
    for v in (v1, v2):
        finite = np.isfinite(np.asarray(v))
        if np.any(np.asarray(v)[finite] < 0):
            raise ValueError("finite lags must be nonnegative")
    if v1.shape[-1] != params.depth or v2.shape[-1] != params.depth:
        raise ValueError("lag vectors must match the kernel depth")
    return lag_kernel_matrix(params, v1, v2)
