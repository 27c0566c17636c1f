"""Variational GP temporal point process with a squared link.

The latent rate function lives on vectors of elapsed times to the D most
recent events, the intensity is lambda(t) = (z(t) + beta)^2, and the
posterior over z is a sparse GP with inducing lag locations.  The model
evidence terms have closed forms: the expected log intensity at events
reduces to log-moments of a noncentral chi-square, and the expected
integrated intensity reduces to erf integrals (Phi, Psi) because the lag
vector is piecewise linear in t between events.
"""

from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular
from jax.scipy.special import digamma, gammaln
from numpy.polynomial.hermite import hermgauss

from .kernels import LagKernelParams, init_lag_params, lag_kernel_matrix
from .linalg import VAR_FLOOR, chol_solve, gaussian_kl, safe_cholesky

EULER_GAMMA = float(np.euler_gamma)

# Noncentrality threshold for switching between the chi-square digamma
# series (exact for small noncentrality) and Gauss-Hermite quadrature
# (exact for large); the branches agree to ~1e-12 at the crossover.
_SERIES_LIMIT = 50.0
_SERIES_TERMS = 128
_GH_NODES, _GH_WEIGHTS = (jnp.asarray(a) for a in hermgauss(50))


class PointProcessState(NamedTuple):
    """Trainable state of the point process component."""

    lag: LagKernelParams   # per-lag kernel hyperparameters, log scale
    beta: jnp.ndarray      # (G,) intensity offsets, one per static group
    s: jnp.ndarray         # (M, D) inducing lag locations
    m: jnp.ndarray         # (M,) variational mean of inducing values
    chol_s: jnp.ndarray    # (M, M) lower factor of the variational covariance


def init_state(depth, inducing, beta=0.5, n_groups=1, lag_high=10.0, variance=1.0,
               lengthscale=1.0):
    """State with inducing lags spread over (0, lag_high] per dimension."""
    grid = np.linspace(lag_high / inducing, lag_high, inducing)
    s = np.tile(grid[:, None], (1, depth)) * np.linspace(1.0, 2.0, depth)
    return PointProcessState(
        lag=init_lag_params(depth, variance=variance, lengthscale=lengthscale),
        beta=jnp.full((n_groups,), float(beta)),
        s=jnp.asarray(s),
        m=jnp.zeros((inducing,)),
        chol_s=jnp.eye(inducing, dtype=jnp.float64),
    )


def build_lags(times, depth):
    """Lag matrix of events: row i holds t_i - t_{i-d}, inf-padded.

    ``times`` must be strictly increasing within the patient.
    """
    t = np.asarray(times, dtype=np.float64)
    if t.ndim != 1:
        raise ValueError("times must be a vector")
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing within a patient")
    lags = np.full((t.size, depth), np.inf)
    for d in range(1, depth + 1):
        lags[d:, d - 1] = t[d:] - t[:-d]
    return lags


def interval_anchors(times, depth):
    """Anchor events for each inter-event interval, inf where unavailable.

    Interval k runs from a[k] to b[k] with a = [0, t_1, ..., t_n] and
    b = [t_1, ..., t_n, T]; during interval k the d-th most recent event
    is t_{k-d+1} (1-based), returned as ``anchors[k, d-1]``.
    """
    t = np.asarray(times, dtype=np.float64)
    n = t.size
    anchors = np.full((n + 1, depth), np.inf)
    for k in range(n + 1):
        for d in range(1, depth + 1):
            if k - d >= 0:
                anchors[k, d - 1] = t[k - d]
    return anchors


def q_marginal(state, lags):
    """Marginal posterior (mean, variance) of the latent rate at lag vectors."""
    k_vs = lag_kernel_matrix(state.lag, lags, state.s)
    chol = safe_cholesky(lag_kernel_matrix(state.lag, state.s, state.s))
    b = chol_solve(chol, k_vs.T)                       # K_ss^-1 k_sv, (M, N)
    mu = b.T @ state.m
    prior_diag = jnp.sum(
        jnp.exp(state.lag.log_variance) * jnp.isfinite(lags), axis=-1
    )
    a = solve_triangular(chol, k_vs.T, lower=True)
    c = state.chol_s.T @ b
    var = prior_diag - jnp.sum(a * a, axis=0) + jnp.sum(c * c, axis=0)
    return mu, jnp.maximum(var, VAR_FLOOR)


def expected_log_squared(mu, var, beta=0.0):
    """E[log (z + beta)^2] for z ~ N(mu, var), elementwise.

    Small noncentrality uses the exact noncentral-chi-square series
    E[log X] = sum_j Pois(j; d/2) (log 2 + psi(1/2 + j)); large
    noncentrality uses 50-node Gauss-Hermite quadrature, accurate there
    because the log singularity falls far outside the node range.
    """
    loc = jnp.asarray(mu) + beta
    var = jnp.maximum(jnp.asarray(var), VAR_FLOOR)
    delta = loc**2 / var

    j = jnp.arange(_SERIES_TERMS, dtype=jnp.float64)
    half = jnp.minimum(delta, 2.0 * _SERIES_LIMIT)[..., None] / 2.0
    log_w = -half + j * jnp.log(half + 1e-300) - gammaln(j + 1.0)
    series = jnp.log(var) + jnp.sum(
        jnp.exp(log_w) * (jnp.log(2.0) + digamma(0.5 + j)), axis=-1
    )

    z = loc[..., None] + jnp.sqrt(2.0 * var)[..., None] * _GH_NODES
    quad = jnp.sum(_GH_WEIGHTS * jnp.log(jnp.maximum(z**2, 1e-300)), axis=-1)
    quad = quad / jnp.sqrt(jnp.pi)

    return jnp.where(delta < _SERIES_LIMIT, series, quad)


def expected_log_intensity(mu, var, beta=0.0):
    """Expected log intensity per event under the marginal posterior."""
    return expected_log_squared(mu, var, beta)


def expected_log_squared_reference(mu, var, beta=0.0):
    """Special-function form of E[log (z + beta)^2]; cross-check path.

    Evaluates -Gt(-(mu+beta)^2 / (2 var)) + log(var / 2) - C with C the
    Euler-Mascheroni constant and Gt the derivative of the confluent
    hypergeometric function 1F1(a; 1/2; x) w.r.t. a at a = 0, via mpmath.
    """
    import mpmath as mp

    mp.mp.dps = 40
    loc = mp.mpf(float(mu)) + mp.mpf(float(beta))
    v = mp.mpf(float(var))
    x = -(loc**2) / (2 * v)
    gt = mp.diff(lambda a: mp.hyp1f1(a, mp.mpf(1) / 2, x), 0)
    return float(-gt + mp.log(v / 2) - mp.euler)


def _erf_pair(bound_hi, bound_lo, center, scale):
    return jax.scipy.special.erf((bound_hi - center) / scale) - jax.scipy.special.erf(
        (bound_lo - center) / scale
    )


def phi_matrix(lag_params, s, anchors, lo, hi):
    """Integrated cross kernel over intervals: (n_intervals, M).

    ``anchors``: (n_intervals, D) event times anchoring each lag during the
    interval (inf where history is too short); ``lo``/``hi``: interval
    bounds, (n_intervals,).
    """
    gamma = jnp.exp(lag_params.log_variance)
    ell = jnp.exp(lag_params.log_lengthscale)
    fin_a = jnp.isfinite(anchors)
    anc = jnp.where(fin_a, anchors, 0.0)
    fin_s = jnp.isfinite(s)
    s0 = jnp.where(fin_s, s, 0.0)
    # Gaussian in t centered at anchor_d + s_{m,d} with width l_d.
    center = anc[:, None, :] + s0[None, :, :]                 # (n, M, D)
    scale = jnp.sqrt(2.0) * ell
    pair = _erf_pair(hi[:, None, None], lo[:, None, None], center, scale)
    coeff = gamma * jnp.sqrt(jnp.pi / 2.0) * ell
    terms = coeff * pair * fin_a[:, None, :] * fin_s[None, :, :]
    return jnp.sum(terms, axis=-1)


def psi_matrix(lag_params, s, anchors, lo, hi):
    """Integrated kernel product over intervals: (n_intervals, M, M)."""
    gamma = jnp.exp(lag_params.log_variance)
    ell2 = jnp.exp(2.0 * lag_params.log_lengthscale)
    fin_a = jnp.isfinite(anchors)
    anc = jnp.where(fin_a, anchors, 0.0)
    fin_s = jnp.isfinite(s)
    s0 = jnp.where(fin_s, s, 0.0)
    depth = gamma.shape[0]
    n_int = anchors.shape[0]
    m_ind = s.shape[0]

    pairs = jnp.stack(
        jnp.meshgrid(jnp.arange(depth), jnp.arange(depth), indexing="ij"), axis=-1
    ).reshape(-1, 2)

    def one_pair(acc, pair_ij):
        i, jj = pair_ij[0], pair_ij[1]
        li2, lj2 = ell2[i], ell2[jj]
        lsum = li2 + lj2
        center_i = anc[:, i, None] + s0[None, :, i]           # (n, M)
        center_j = anc[:, jj, None] + s0[None, :, jj]
        gauss = jnp.exp(
            -((center_i[:, :, None] - center_j[:, None, :]) ** 2) / (2.0 * lsum)
        )
        # Product of the two Gaussians in t: center weighted by lengthscales.
        mid = (lj2 * center_i[:, :, None] + li2 * center_j[:, None, :]) / lsum
        width = jnp.sqrt(2.0 * li2 * lj2 / lsum)
        pair_erf = _erf_pair(hi[:, None, None], lo[:, None, None], mid, width)
        coeff = gamma[i] * gamma[jj] * jnp.sqrt(jnp.pi * li2 * lj2 / (2.0 * lsum))
        ind = (
            fin_a[:, i, None, None]
            * fin_a[:, jj, None, None]
            * fin_s[None, :, i, None]
            * fin_s[None, None, :, jj]
        )
        return acc + coeff * gauss * pair_erf * ind, None

    init = jnp.zeros((n_int, m_ind, m_ind))
    total, _ = jax.lax.scan(one_pair, init, pairs)
    return total


def phi_integral(lag_params, s, interval, lag_offsets):
    """Integral of the cross kernel over one interval: (M,) vector."""
    lo, hi = float(interval[0]), float(interval[1])
    if hi < lo:
        raise ValueError("invalid interval: upper bound below lower bound")
    out = phi_matrix(
        lag_params, jnp.asarray(s), jnp.asarray(lag_offsets)[None, :],
        jnp.asarray([lo]), jnp.asarray([hi]),
    )
    return out[0]


def psi_integral(lag_params, s_i, s_j, interval, lag_offsets):
    """Integral of the kernel product over one interval: scalar."""
    lo, hi = float(interval[0]), float(interval[1])
    if hi < lo:
        raise ValueError("invalid interval: upper bound below lower bound")
    s_pair = jnp.stack([jnp.asarray(s_i), jnp.asarray(s_j)])
    out = psi_matrix(
        lag_params, s_pair, jnp.asarray(lag_offsets)[None, :],
        jnp.asarray([lo]), jnp.asarray([hi]),
    )
    return out[0, 0, 1]


def integral_term_parts(state, anchors, lo, hi):
    """Expected integrated intensity, split into (quadratic, linear, var, lensum).

    Callers assemble L_t = quad + 2 beta lin + var + beta^2 |T|; the split
    keeps the beta terms outside so group offsets can be applied per patient.
    """
    chol = safe_cholesky(lag_kernel_matrix(state.lag, state.s, state.s))
    phi = phi_matrix(state.lag, state.s, anchors, lo, hi)      # (n, M)
    psi = jnp.sum(psi_matrix(state.lag, state.s, anchors, lo, hi), axis=0)
    alpha = chol_solve(chol, state.m)
    quad = alpha @ psi @ alpha
    lin = jnp.sum(phi, axis=0) @ alpha
    lengths = (hi - lo)[:, None] * jnp.isfinite(anchors)
    lensum = jnp.sum(jnp.exp(state.lag.log_variance) * jnp.sum(lengths, axis=0))
    u = chol_solve(chol, state.chol_s)
    var = lensum - jnp.trace(chol_solve(chol, psi)) + jnp.sum(u * (psi @ u))
    return quad, lin, var


def expected_integral_term(state, times, window, beta=None):
    """E[integral of the intensity over [0, window]] for one patient."""
    t = np.asarray(times, dtype=np.float64)
    if t.size and (np.any(t < 0) or np.any(t > window)):
        raise ValueError("window must cover all events")
    beta = state.beta[0] if beta is None else beta
    depth = state.lag.depth
    anchors = jnp.asarray(interval_anchors(t, depth))
    lo = jnp.asarray(np.concatenate([[0.0], t]))
    hi = jnp.asarray(np.concatenate([t, [window]]))
    quad, lin, var = integral_term_parts(state, anchors, lo, hi)
    return quad + 2.0 * beta * lin + var + beta**2 * window


def tpp_elbo(state, patients):
    """Point-process evidence terms over patients.

    ``patients`` is a sequence of (times, window) or (times, window,
    group index) tuples.  Returns (L_T, KL(q(u) || p(u))) where L_T sums
    expected log intensities at events minus expected integrated
    intensities over the windows.
    """
    total = 0.0
    for patient in patients:
        times, window = patient[0], patient[1]
        group = patient[2] if len(patient) > 2 else 0
        beta = state.beta[group]
        lags = jnp.asarray(build_lags(times, state.lag.depth))
        mu, var = q_marginal(state, lags)
        total = total + jnp.sum(expected_log_squared(mu, var, beta))
        total = total - expected_integral_term(state, times, window, beta)
    chol = safe_cholesky(lag_kernel_matrix(state.lag, state.s, state.s))
    kl_u = gaussian_kl(state.m, state.chol_s, chol)
    return total, kl_u


def posterior_intensity(state, history_times, query_times, group=0):
    """Posterior mean intensity E[(z + beta)^2] at query times.

    Lags are computed against the history events strictly before each
    query time, so evaluating just after an event includes it.
    """
    hist = np.sort(np.asarray(history_times, dtype=np.float64))
    queries = np.asarray(query_times, dtype=np.float64)
    depth = state.lag.depth
    lags = np.full((queries.size, depth), np.inf)
    for i, tq in enumerate(queries):
        past = hist[hist < tq]
        take = min(depth, past.size)
        if take:
            lags[i, :take] = tq - past[::-1][:take]
    mu, var = q_marginal(state, jnp.asarray(lags))
    beta = state.beta[group]
    return np.asarray((mu + beta) ** 2 + var)
