"""KL divergences between amortized Gaussian posteriors and GP priors.

For a diagonal Gaussian posterior N(mu, W) and a GP prior N(0, Sigma) over
the same N points, three routes are available:

* :func:`exact_kl` — the O(N^3) closed form.
* :func:`titsias_kl_upper` — the classic collapsed inducing-point upper
  bound obtained from the sparse lower bound on the prior marginal
  likelihood.
* :func:`scalable_kl_core` / :func:`scalable_kl_upper` — the longitudinal
  upper bound that treats the instance-id components of the kernel exactly
  (block diagonal per patient) and approximates only the shared components
  through M inducing points, with free-form variational parameters
  (m_H, H) and an unbiased mini-batch estimator over whole patients.

The free-form parameters admit a closed-form optimum
(:func:`optimal_variational`) and a natural-gradient update whose
fixed-step form is a convex blend of precisions
(:func:`natural_step_from_stats`).
"""

from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular

from . import kernels
from .linalg import chol_logdet, chol_solve, gaussian_kl, safe_cholesky


class GPVariational(NamedTuple):
    """Free-form Gaussian over inducing function values, one per latent dim.

    ``s`` are inducing locations in covariate space (the id column is
    carried along but ignored by the shared kernel components), ``m`` the
    mean and ``chol_h`` the lower Cholesky factor of the covariance.
    """

    s: jnp.ndarray       # (M, Q)
    m: jnp.ndarray       # (M,)
    chol_h: jnp.ndarray  # (M, M)


def init_gp_variational(s, prior_chol=None):
    s = jnp.asarray(s, dtype=jnp.float64)
    m = s.shape[0]
    chol = jnp.eye(m, dtype=jnp.float64) if prior_chol is None else prior_chol
    return GPVariational(s=s, m=jnp.zeros((m,)), chol_h=chol)


def exact_kl(mean, var, sigma):
    """KL(N(mean, diag(var)) || N(0, sigma)) via a triangular factorization."""
    mean = jnp.asarray(mean, dtype=jnp.float64)
    var = jnp.asarray(var, dtype=jnp.float64)
    n = mean.shape[0]
    chol = safe_cholesky(jnp.asarray(sigma, dtype=jnp.float64))
    white = solve_triangular(chol, mean, lower=True)
    inv_diag = jnp.sum(
        solve_triangular(chol, jnp.eye(n, dtype=jnp.float64), lower=True) ** 2, axis=0
    )
    return 0.5 * (
        jnp.dot(inv_diag, var)
        + jnp.dot(white, white)
        - n
        + chol_logdet(chol)
        - jnp.sum(jnp.log(var))
    )


def titsias_kl_upper(mean, var, k_xx, k_xs, k_ss, noise):
    """Collapsed inducing-point KL upper bound for Sigma = K_xx + noise I."""
    mean = jnp.asarray(mean, dtype=jnp.float64)
    var = jnp.asarray(var, dtype=jnp.float64)
    n = mean.shape[0]
    chol_ss = safe_cholesky(k_ss)
    c = solve_triangular(chol_ss, k_xs.T, lower=True)          # (M, N)
    nystrom = c.T @ c
    trace_gap = jnp.maximum(jnp.sum(jnp.diag(k_xx)) - jnp.sum(c * c), 0.0)
    sigma_bar = nystrom + noise * jnp.eye(n, dtype=jnp.float64)
    return exact_kl(mean, var, sigma_bar) + trace_gap / (2.0 * noise)


def titsias_kl_upper_from_kernel(mean, var, spec, params, x, s, cols):
    """Spec-level Titsias bound: inducing points live in the full covariate space."""
    k_xx = kernels.eval_additive(spec, params, x, x, cols)
    k_xs = kernels.eval_additive(spec, params, x, s, cols)
    k_ss = kernels.eval_additive(spec, params, s, s, cols)
    return titsias_kl_upper(mean, var, k_xx, k_xs, k_ss, jnp.exp(params.log_noise))


def scalable_kl_core(
    mean, var, valid, k_a_ps, k_a_pp, sigma_hat, chol_ss, m_h, chol_h, scale, n_total,
    patient_valid=None,
):
    """Mini-batch estimate of the longitudinal KL upper bound.

    All per-patient arrays are padded to a common row count ``n``; padded
    rows carry zeroed kernel cross terms, an identity block in
    ``sigma_hat``, zero mean and unit variance, and are masked by
    ``valid``.  ``scale`` is P_total / |patients in batch|; the -N/2 and
    inducing-KL terms enter unscaled.

    Shapes: mean/var/valid (B, n); k_a_ps (B, n, M); k_a_pp (B, n, n);
    sigma_hat (B, n, n); chol_ss/chol_h (M, M); m_h (M,).
    """
    proj_mean = k_a_ps @ chol_solve(chol_ss, m_h)              # (B, n)
    u = chol_solve(chol_ss, chol_h)                            # (M, M)

    def per_patient(mu_p, w_p, valid_p, kps, kpp, sh, pm):
        chol_p = safe_cholesky(sh)
        resid = (pm - mu_p) * valid_p
        white = solve_triangular(chol_p, resid, lower=True)
        quad = jnp.dot(white, white)
        inv_l = solve_triangular(chol_p, jnp.eye(sh.shape[0], dtype=sh.dtype), lower=True)
        inv_diag = jnp.sum(inv_l * inv_l, axis=0)
        tr_w = jnp.dot(inv_diag * valid_p, w_p)
        logdet = chol_logdet(chol_p)
        c = solve_triangular(chol_ss, kps.T, lower=True)       # (M, n)
        k_tilde = kpp - c.T @ c
        tr_tilde = jnp.trace(chol_solve(chol_p, k_tilde))
        d = solve_triangular(chol_p, kps @ u, lower=True)
        tr_h = jnp.sum(d * d)
        log_w = jnp.dot(valid_p, jnp.log(w_p))
        return quad + tr_w + logdet + tr_tilde + tr_h - log_w

    terms = jax.vmap(per_patient)(mean, var, valid, k_a_ps, k_a_pp, sigma_hat, proj_mean)
    if patient_valid is not None:
        terms = terms * patient_valid
    return (
        0.5 * scale * jnp.sum(terms)
        - 0.5 * n_total
        + gaussian_kl(m_h, chol_h, chol_ss)
    )


def _pad_patients(arrays, offsets):
    """Pad per-patient slices of 1-d arrays to a common length; returns masks too."""
    counts = np.diff(offsets)
    n_max = int(counts.max())
    out = []
    for arr, fill in arrays:
        padded = np.full((len(counts), n_max), fill, dtype=np.float64)
        for p, (a, b) in enumerate(zip(offsets[:-1], offsets[1:])):
            padded[p, : b - a] = arr[a:b]
        out.append(padded)
    valid = np.zeros((len(counts), n_max))
    for p, c in enumerate(counts):
        valid[p, :c] = 1.0
    return out, valid


def scalable_kl_upper(
    mean, var, spec, params, x, cols, offsets, gv, p_total=None, n_total=None,
    expected_counts=None,
):
    """Spec-level scalable bound on a (batch of whole) patients.

    ``offsets`` give patient boundaries in the patient-sorted rows of
    ``x``; ``p_total``/``n_total`` default to treating the batch as the
    full dataset.  ``expected_counts`` (patient id -> row count) rejects
    batches that split a patient.
    """
    offsets = np.asarray(offsets)
    counts = np.diff(offsets)
    if expected_counts is not None:
        for p, c in enumerate(counts):
            if expected_counts[p] != c:
                raise ValueError(f"batch splits patient at position {p}: {c} of {expected_counts[p]} rows")
    n_batch = int(offsets[-1])
    p_batch = len(counts)
    p_total = p_batch if p_total is None else p_total
    n_total = n_batch if n_total is None else n_total

    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    (mean_p, var_p), valid = _pad_patients([(mean, 0.0), (var, 1.0)], offsets)
    n_max = mean_p.shape[1]
    m = gv.s.shape[0]

    k_a_ps = np.zeros((p_batch, n_max, m))
    k_a_pp = np.zeros((p_batch, n_max, n_max))
    sigma_hat = np.tile(np.eye(n_max), (p_batch, 1, 1))
    for p, (a, b) in enumerate(zip(offsets[:-1], offsets[1:])):
        x_p = x[a:b]
        c = b - a
        k_a_ps[p, :c] = np.asarray(kernels.non_id_matrix(spec, params, x_p, gv.s, cols))
        k_a_pp[p, :c, :c] = np.asarray(kernels.non_id_matrix(spec, params, x_p, x_p, cols))
        sigma_hat[p, :c, :c] = np.asarray(kernels.patient_block(spec, params, x_p, cols))

    chol_ss = safe_cholesky(kernels.non_id_matrix(spec, params, gv.s, gv.s, cols))
    return scalable_kl_core(
        jnp.asarray(mean_p), jnp.asarray(var_p), jnp.asarray(valid),
        jnp.asarray(k_a_ps), jnp.asarray(k_a_pp), jnp.asarray(sigma_hat),
        chol_ss, gv.m, gv.chol_h,
        scale=p_total / p_batch, n_total=n_total,
    )


def batch_statistics(mean, valid, k_a_ps, sigma_hat):
    """Sufficient statistics (P, q) of the bound's quadratic dependence on (m_H, H).

    ``P = sum_p K_sp Sighat_p^-1 K_ps`` and ``q = sum_p K_sp Sighat_p^-1 mu_p``.
    """
    def per_patient(mu_p, valid_p, kps, sh):
        chol_p = safe_cholesky(sh)
        sol = chol_solve(chol_p, kps)                          # (n, M)
        return kps.T @ sol, sol.T @ (mu_p * valid_p)

    ps, qs = jax.vmap(per_patient)(mean, valid, k_a_ps, sigma_hat)
    return jnp.sum(ps, axis=0), jnp.sum(qs, axis=0)


def optimal_variational(mean, valid, k_a_ps, sigma_hat, k_a_ss):
    """Closed-form optimum of (m_H, H) on a full batch.

    With P, q as in :func:`batch_statistics`, the optimum is
    ``H* = K_ss (P + K_ss)^-1 K_ss`` and ``m* = K_ss (P + K_ss)^-1 q``.
    """
    stat_p, stat_q = batch_statistics(mean, valid, k_a_ps, sigma_hat)
    chol = safe_cholesky(stat_p + k_a_ss)
    h_opt = k_a_ss @ chol_solve(chol, k_a_ss)
    h_opt = 0.5 * (h_opt + h_opt.T)
    m_opt = k_a_ss @ chol_solve(chol, stat_q)
    return m_opt, h_opt


def natural_gradient_step(gv, grad_m, grad_h, step, max_halvings=10):
    """One natural-gradient ascent step on the free-form Gaussian.

    ``grad_m``/``grad_h`` are ordinary gradients of the objective w.r.t.
    the mean and the covariance matrix.  The update runs in natural
    coordinates (eta1 = H^-1 m, eta2 = -1/2 H^-1), where the natural
    gradient equals the gradient w.r.t. expectation parameters.  If the
    updated precision loses positive definiteness the step is halved, up
    to ``max_halvings`` times.
    """
    if not 0.0 < step <= 1.0:
        raise ValueError("step must lie in (0, 1]")
    h = gv.chol_h @ gv.chol_h.T
    lam = chol_solve(gv.chol_h, jnp.eye(h.shape[0], dtype=h.dtype))
    eta1 = lam @ gv.m
    grad_h = 0.5 * (grad_h + grad_h.T)
    nat_m = grad_m - 2.0 * grad_h @ gv.m
    for _ in range(max_halvings + 1):
        lam_new = lam - 2.0 * step * grad_h
        chol_lam = np.linalg.cholesky(np.asarray(lam_new)) if _is_pd(lam_new) else None
        if chol_lam is not None:
            eta1_new = eta1 + step * nat_m
            h_new = chol_solve(jnp.asarray(chol_lam), jnp.eye(h.shape[0], dtype=h.dtype))
            h_new = 0.5 * (h_new + h_new.T)
            m_new = h_new @ eta1_new
            return gv._replace(m=m_new, chol_h=jnp.linalg.cholesky(h_new))
        step = step / 2.0
    raise ValueError("natural gradient step lost positive definiteness after 10 halvings")


def _is_pd(mat):
    try:
        np.linalg.cholesky(np.asarray(mat))
        return True
    except np.linalg.LinAlgError:
        return False


def natural_step_from_stats(gv, stat_p, stat_q, chol_ss, step, scale=1.0):
    """Fixed-step natural-gradient update expressed as a precision blend.

    Equivalent to :func:`natural_gradient_step` with exact gradients of the
    (scaled) bound: the new precision is a convex combination of the old
    one and the batch value ``scale * K_ss^-1 P K_ss^-1 + K_ss^-1``.  Always
    positive definite, hence usable inside compiled training steps.
    """
    m_dim = gv.m.shape[0]
    eye = jnp.eye(m_dim, dtype=jnp.float64)
    kss_inv = chol_solve(chol_ss, eye)
    a = chol_solve(chol_ss, stat_p)                 # K_ss^-1 P
    b_mat = chol_solve(chol_ss, a.T).T              # K_ss^-1 P K_ss^-1
    lam_old = chol_solve(gv.chol_h, eye)
    lam_new = (1.0 - step) * lam_old + step * (scale * b_mat + kss_inv)
    lam_new = 0.5 * (lam_new + lam_new.T)
    eta1_old = lam_old @ gv.m
    eta1_new = (1.0 - step) * eta1_old + step * scale * chol_solve(chol_ss, stat_q)
    chol_lam = safe_cholesky(lam_new)
    h_new = chol_solve(chol_lam, eye)
    h_new = 0.5 * (h_new + h_new.T)
    m_new = h_new @ eta1_new
    return gv._replace(m=m_new, chol_h=safe_cholesky(h_new))
