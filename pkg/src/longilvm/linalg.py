"""Cholesky-based linear algebra helpers shared by the GP modules.

Kernel matrices built from SE/indicator components are frequently
rank-deficient (coincident inputs, all-infinite lag rows), so every
factorization goes through a jitter ladder: try the matrix as given and
escalate the diagonal boost only when the factorization fails.  The
selected jitter is excluded from the gradient path, which keeps the
ladder usable inside jit-compiled, differentiated code.
"""

import jax
import jax.numpy as jnp
from jax.scipy.linalg import solve_triangular

# Relative rungs, scaled by the mean diagonal of the matrix at hand.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)

VAR_FLOOR = 1e-10


def safe_cholesky(mat):
    """Lower Cholesky factor of ``mat`` with escalating diagonal jitter.

    Returns the factor of ``mat + eps * I`` for the smallest ladder rung
    ``eps`` that yields a finite factorization.  ``eps`` is treated as a
    constant w.r.t. differentiation.
    """
    n = mat.shape[-1]
    eye = jnp.eye(n, dtype=mat.dtype)
    scale = jnp.maximum(jnp.mean(jnp.diagonal(mat, axis1=-2, axis2=-1), axis=-1), 1e-30)

    def ok(m):
        chol = jnp.linalg.cholesky(m)
        return jnp.all(jnp.isfinite(chol))

    eps = jnp.asarray(JITTER_LADDER[-1]) * scale
    for rung in reversed(JITTER_LADDER[:-1]):
        eps = jnp.where(ok(mat + rung * scale * eye), rung * scale, eps)
    eps = jax.lax.stop_gradient(eps)
    return jnp.linalg.cholesky(mat + eps * eye)


def chol_solve(chol, b):
    """Solve ``A x = b`` given the lower Cholesky factor of ``A``."""
    return solve_triangular(chol.T, solve_triangular(chol, b, lower=True), lower=False)


def chol_logdet(chol):
    return 2.0 * jnp.sum(jnp.log(jnp.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)


def chol_inv_diag(chol):
    """Diagonal of ``A^{-1}`` from the lower Cholesky factor of ``A``."""
    inv_l = solve_triangular(chol, jnp.eye(chol.shape[-1], dtype=chol.dtype), lower=True)
    return jnp.sum(inv_l * inv_l, axis=-2)


def gaussian_kl(mean_q, chol_q, chol_p):
    """KL(N(mean_q, L_q L_q^T) || N(0, L_p L_p^T)) for full-rank factors."""
    m = mean_q.shape[-1]
    a = solve_triangular(chol_p, chol_q, lower=True)
    b = solve_triangular(chol_p, mean_q, lower=True)
    return 0.5 * (
        jnp.sum(a * a)
        + jnp.sum(b * b)
        - m
        + chol_logdet(chol_p)
        - chol_logdet(chol_q)
    )


def tril_from_flat(flat, n):
    """Lower-triangular matrix with exp-transformed diagonal from a flat vector."""
    tri = jnp.zeros((n, n), dtype=flat.dtype)
    idx = jnp.tril_indices(n)
    tri = tri.at[idx].set(flat)
    diag = jnp.exp(jnp.diagonal(tri))
    return tri - jnp.diag(jnp.diagonal(tri)) + jnp.diag(diag)


def flat_from_tril(tri):
    """Inverse of :func:`tril_from_flat`."""
    tri = tri - jnp.diag(jnp.diagonal(tri)) + jnp.diag(jnp.log(jnp.diagonal(tri)))
    return tri[jnp.tril_indices(tri.shape[0])]
