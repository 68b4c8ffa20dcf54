"""Joint estimation of the nominal parameters and the latent residual model.

Model for one consumer::

    y(t) = theta @ phi(t) + z @ gamma(t) + e(t),   z ~ N(0, diag(d)),  e ~ N(0, sigma2)

``theta``, ``d`` and ``sigma2`` maximise the marginal likelihood of the data
with ``z`` integrated out; ``z`` itself is reported through its posterior mean
``z_hat`` and covariance ``P``. Everything is computed from streaming
sufficient statistics, so a batch fit and a sample-by-sample fit see exactly
the same information.

The E-step is the exact Gaussian posterior. It is evaluated in the scaled
form ``P = B (I + B S_gg B / sigma2)^-1 B`` with ``B = diag(sqrt(d))`` which
stays well conditioned as prior variances shrink towards zero. The M-step is
closed form and updates ``d_k <- z_hat_k**2 + P_kk``, so irrelevant
components shrink monotonically and are pruned once negligible.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .errors import ConfigError, DataError, NumericError

LOG_2PI = math.log(2.0 * math.pi)
SIGMA2_FLOOR = 1e-12


@dataclass
class SufficientStats:
    """Exponentially weighted sums over (phi, gamma, y) samples.

    ``s_y`` (sum of y) is carried in addition to the second-order sums; it
    is only used to initialise the noise variance.
    """

    p: int
    K: int
    lam: float = 1.0
    n: float = 0.0
    S_pp: np.ndarray = None
    S_gg: np.ndarray = None
    S_gp: np.ndarray = None
    s_py: np.ndarray = None
    s_gy: np.ndarray = None
    s_yy: float = 0.0
    s_y: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError(f"forgetting factor must lie in (0, 1], got {self.lam}")
        p, K = self.p, self.K
        if self.S_pp is None:
            self.S_pp = np.zeros((p, p))
            self.S_gg = np.zeros((K, K))
            self.S_gp = np.zeros((K, p))
            self.s_py = np.zeros(p)
            self.s_gy = np.zeros(K)

    def copy(self) -> "SufficientStats":
        return copy.deepcopy(self)

    def update(self, phi, gamma, y: float) -> "SufficientStats":
        """Discount by ``lam`` and add one sample, in place."""
        phi = np.asarray(phi, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        if phi.shape != (self.p,) or gamma.shape != (self.K,):
            raise DataError(f"expected phi of length {self.p} and gamma of length {self.K}, "
                            f"got {phi.shape} and {gamma.shape}")
        y = float(y)
        if self.lam != 1.0:
            for a in (self.S_pp, self.S_gg, self.S_gp, self.s_py, self.s_gy):
                a *= self.lam
            self.s_yy *= self.lam
            self.s_y *= self.lam
            self.n *= self.lam
        self.S_pp += np.outer(phi, phi)
        if self.K:
            self.S_gg += np.outer(gamma, gamma)
            self.S_gp += np.outer(gamma, phi)
            self.s_gy += gamma * y
        self.s_py += phi * y
        self.s_yy += y * y
        self.s_y += y
        self.n += 1.0
        return self

    @classmethod
    def from_batch(cls, Phi, Gamma, y, lam: float = 1.0) -> "SufficientStats":
        """Statistics of a whole block of samples (rows are time steps, oldest first)."""
        Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
        y = np.asarray(y, dtype=float)
        n = len(y)
        Gamma = np.asarray(Gamma, dtype=float).reshape(n, -1)
        w = lam ** np.arange(n - 1, -1, -1, dtype=float)
        Pw, Gw = Phi * w[:, None], Gamma * w[:, None]
        return cls(
            p=Phi.shape[1], K=Gamma.shape[1], lam=lam, n=float(w.sum()),
            S_pp=_mirror(Pw.T @ Phi), S_gg=_mirror(Gw.T @ Gamma), S_gp=Gw.T @ Phi,
            s_py=Pw.T @ y, s_gy=Gw.T @ y, s_yy=float(w @ (y * y)), s_y=float(w @ y),
        )


def _mirror(A: np.ndarray) -> np.ndarray:
    """Copy the upper triangle onto the lower one; matrix products are not
    guaranteed to come out bit-for-bit symmetric."""
    return np.triu(A) + np.triu(A, 1).T


def update_stats(stats: SufficientStats, phi, gamma, y: float) -> SufficientStats:
    """Functional form of :meth:`SufficientStats.update`; ``stats`` is left untouched."""
    return stats.copy().update(phi, gamma, y)


@dataclass(frozen=True)
class EmOptions:
    max_iters: int = 2000
    rel_tol: float = 1e-10
    prune_tol: float = 1e-8
    iters_per_sample: int = 3
    ridge_jitter: float = 1e-8
    selection: str = "none"
    # optional second stopping test: largest change of theta, z_hat and d
    # relative to their magnitude. The likelihood flattens out at round-off
    # level long before near-null prior variances settle.
    param_tol: float | None = None

    def __post_init__(self):
        for name in ("max_iters", "rel_tol", "prune_tol", "iters_per_sample", "ridge_jitter"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"EmOptions.{name} must be positive")
        if self.param_tol is not None and not self.param_tol > 0:
            raise ConfigError("EmOptions.param_tol must be positive or None")
        if self.selection not in ("none", "bic"):
            raise ConfigError(f"EmOptions.selection must be 'none' or 'bic', got {self.selection!r}")


@dataclass
class ModelState:
    theta: np.ndarray
    z_hat: np.ndarray
    P: np.ndarray
    d: np.ndarray
    sigma2: float
    active: np.ndarray
    stats: SufficientStats
    loglik: float = float("nan")
    n_iter: int = 0

    @property
    def p(self) -> int:
        return len(self.theta)

    @property
    def K(self) -> int:
        return len(self.z_hat)

    @property
    def n(self) -> float:
        return self.stats.n

    @property
    def nonzero_params(self) -> int:
        """Number of latent parameters that survived pruning."""
        return int(np.count_nonzero(self.active))

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


def _initial_sigma2(stats: SufficientStats) -> float:
    if stats.n <= 0:
        return 1.0
    second = stats.s_yy / stats.n
    var = second - (stats.s_y / stats.n) ** 2
    if var > SIGMA2_FLOOR * second:
        return var
    return second if second > 0 else 1.0


def init_state(stats: SufficientStats) -> ModelState:
    """Neutral starting point: theta = 0, D = I, sigma2 = sample variance of y."""
    K = stats.K
    return ModelState(
        theta=np.zeros(stats.p),
        z_hat=np.zeros(K),
        P=np.eye(K),
        d=np.ones(K),
        sigma2=_initial_sigma2(stats),
        active=np.ones(K, dtype=bool),
        stats=stats,
    )


@dataclass
class _Posterior:
    """Posterior of z on the active set, kept in factored form."""

    idx: np.ndarray
    z: np.ndarray          # posterior mean on the active set
    b: np.ndarray          # sqrt of the prior variances
    Linv: np.ndarray       # inverse Cholesky factor of I + B S_gg B / sigma2
    sigma2: float
    loglik: float          # marginal log-likelihood of the parameters it was computed at

    @property
    def diag_P(self) -> np.ndarray:
        return self.b ** 2 * np.einsum("ij,ij->j", self.Linv, self.Linv)

    def trace_PS(self) -> float:
        """tr(P S_gg) on the active set, via B S B = sigma2 (A - I)."""
        return self.sigma2 * (self.idx.size - np.einsum("ij,ij->", self.Linv, self.Linv))

    def full_P(self) -> np.ndarray:
        return _mirror((self.Linv.T @ self.Linv) * np.outer(self.b, self.b))


def _sigma2_floor(stats: SufficientStats) -> float:
    if stats.n <= 0:
        return 1e-300
    return max(SIGMA2_FLOOR * stats.s_yy / stats.n, 1e-300)


def _cholesky(A: np.ndarray, jitter: float) -> np.ndarray:
    L, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        A = A.copy()
        A[np.diag_indices_from(A)] += jitter * np.trace(A) / len(A)
        L, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        raise NumericError("posterior system is singular even after jitter")
    return L


def _posterior(stats: SufficientStats, theta, d, sigma2: float, active, jitter: float = 1e-8) -> _Posterior:
    if not sigma2 > 0:
        raise NumericError(f"noise variance must be positive, got {sigma2}")
    idx = np.flatnonzero(active)
    rr = stats.s_yy - 2.0 * theta @ stats.s_py + theta @ stats.S_pp @ theta
    quad = rr / sigma2
    logdet = stats.n * math.log(sigma2)
    if idx.size:
        everything = idx.size == stats.K
        b = np.sqrt(d if everything else d[idx])
        S_gp = stats.S_gp if everything else stats.S_gp[idx]
        g = (stats.s_gy if everything else stats.s_gy[idx]) - S_gp @ theta
        S = stats.S_gg if everything else stats.S_gg[np.ix_(idx, idx)]
        A = S * np.outer(b / sigma2, b)
        A[np.diag_indices_from(A)] += 1.0
        L = _cholesky(A, jitter)
        w, _ = lapack.dpotrs(L, b * g, lower=1)
        z = b * w / sigma2
        Linv, info = lapack.dtrtri(L, lower=1)
        if info != 0:
            raise NumericError("triangular inverse failed")
        logdet += 2.0 * np.log(np.diag(L)).sum()
        quad -= g @ z / sigma2
    else:
        z = b = np.zeros(0)
        Linv = np.zeros((0, 0))
    loglik = -0.5 * (stats.n * LOG_2PI + logdet + quad)
    if not math.isfinite(loglik):
        raise NumericError("marginal log-likelihood is not finite")
    return _Posterior(idx, z, b, Linv, sigma2, loglik)


def marginal_log_likelihood(stats: SufficientStats, theta, d, sigma2: float, active=None) -> float:
    """log N(Y; Phi theta, sigma2 I + Gamma diag(d) Gamma^T) from the statistics alone.

    Cost is cubic in the number of active latent components, independent of
    the number of samples.
    """
    theta = np.asarray(theta, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise NumericError("prior variances must be non-negative")
    if active is None:
        active = d > 0
    return _posterior(stats, theta, d, sigma2, np.asarray(active) & (d > 0)).loglik


def _apply_posterior(state: ModelState, post: _Posterior) -> ModelState:
    K = state.K
    state.z_hat = np.zeros(K)
    state.z_hat[post.idx] = post.z
    state.P = np.zeros((K, K))
    if post.idx.size == K:
        state.P = post.full_P()
    elif post.idx.size:
        state.P[np.ix_(post.idx, post.idx)] = post.full_P()
    state.loglik = post.loglik
    return state


def e_step(state: ModelState, opts: EmOptions | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of z under the current parameters.

    Pruned components get zero mean and zero covariance.
    """
    opts = opts or EmOptions()
    s = state.copy()
    _apply_posterior(s, _posterior(s.stats, s.theta, s.d, s.sigma2, s.active, opts.ridge_jitter))
    return s.z_hat, s.P


def _solve_normal(S: np.ndarray, rhs: np.ndarray, jitter: float) -> np.ndarray:
    """Solve ``S x = rhs`` for symmetric PSD ``S``. A relative ridge is only
    added when the plain Cholesky factorisation fails, so well-posed problems
    are solved without bias."""
    p = S.shape[0]
    ridge = jitter * max(np.trace(S), 1e-300) / p
    try:
        c = linalg.cho_factor(S, check_finite=False)
        # pivots are Schur complements; one at the ridge scale means the
        # system is numerically rank deficient
        if np.all(np.diag(c[0]) ** 2 > ridge):
            return linalg.cho_solve(c, rhs, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        pass
    S = S.copy()
    S[np.diag_indices(p)] += ridge
    try:
        return linalg.solve(S, rhs, assume_a="pos", check_finite=False)
    except (linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(S, rhs, rcond=None)[0]


def _maximize(state: ModelState, z: np.ndarray, diag_P: np.ndarray, trace_PS: float,
              opts: EmOptions) -> ModelState:
    """M-step in place. ``z`` is the full-length posterior mean, ``diag_P``
    the posterior variances on the active set."""
    st = state.stats
    if st.n <= 0:
        return state
    p = state.p
    rhs = st.s_py - st.S_gp.T @ z
    theta = _solve_normal(st.S_pp, rhs, opts.ridge_jitter)
    resid2 = (st.s_yy - 2.0 * theta @ st.s_py - 2.0 * z @ st.s_gy + theta @ st.S_pp @ theta
              + 2.0 * z @ st.S_gp @ theta + z @ st.S_gg @ z + trace_PS)
    state.theta = theta
    state.sigma2 = max(resid2 / st.n, _sigma2_floor(st))
    idx = np.flatnonzero(state.active)
    d = np.zeros(state.K)
    d[idx] = z[idx] ** 2 + diag_P
    state.z_hat = z
    if idx.size:
        dmax = d.max()
        keep = d >= opts.prune_tol * dmax if dmax > 0 else np.zeros(state.K, dtype=bool)
        keep &= state.active
        pruned = state.active & ~keep
        if pruned.any():
            d[pruned] = 0.0
            state.active = keep
            state.z_hat = np.where(keep, z, 0.0)
            state.P = state.P.copy()
            state.P[pruned, :] = 0.0
            state.P[:, pruned] = 0.0
    state.d = d
    return state


def m_step(state: ModelState, opts: EmOptions | None = None) -> ModelState:
    """Closed-form maximisation given the posterior stored in ``state``.

    theta solves the normal equations with the latent mean removed, sigma2 is
    the expected residual power and ``d_k = z_hat_k**2 + P_kk``. Components
    whose prior variance falls below ``prune_tol * max(d)`` are pruned.
    """
    state = state.copy()
    idx = np.flatnonzero(state.active)
    Pa = state.P[np.ix_(idx, idx)]
    trace_PS = float(np.sum(Pa * state.stats.S_gg[np.ix_(idx, idx)]))
    return _maximize(state, state.z_hat, np.diag(Pa).copy(), trace_PS, opts or EmOptions())


def _max_rel_change(old, new) -> float:
    worst = 0.0
    for a, b in zip(old, new):
        if a.size:
            worst = max(worst, float(np.abs(b - a).max() / max(np.abs(b).max(), 1e-300)))
    return worst


def _em_iterate(state: ModelState, opts: EmOptions, n_iter: int, rel_tol: float | None,
                trace: list | None) -> ModelState:
    """Run up to ``n_iter`` EM sweeps on ``state`` in place. The state always
    ends with a posterior consistent with its final parameters."""
    post = _posterior(state.stats, state.theta, state.d, state.sigma2, state.active, opts.ridge_jitter)
    if trace is not None:
        trace.append(post.loglik)
    z_prev = np.zeros(state.K)
    z_prev[post.idx] = post.z
    for _ in range(n_iter):
        prev = post.loglik
        before = (state.theta.copy(), z_prev, state.d.copy())
        _maximize(state, z_prev, post.diag_P, post.trace_PS(), opts)
        post = _posterior(state.stats, state.theta, state.d, state.sigma2, state.active, opts.ridge_jitter)
        state.n_iter += 1
        z_prev = np.zeros(state.K)
        z_prev[post.idx] = post.z
        if trace is not None:
            trace.append(post.loglik)
        if rel_tol is None or abs(post.loglik - prev) > rel_tol * max(abs(prev), 1.0):
            continue
        if opts.param_tol is None or _max_rel_change(before, (state.theta, z_prev, state.d)) <= opts.param_tol:
            break
    return _apply_posterior(state, post)


def em_fit(stats: SufficientStats, opts: EmOptions | None = None, init: ModelState | None = None,
           trace: list | None = None) -> ModelState:
    """Alternate E- and M-steps until the relative change of the marginal
    log-likelihood drops below ``opts.rel_tol`` or ``opts.max_iters`` sweeps.

    If ``trace`` is a list, the log-likelihood of every visited parameter set
    is appended to it (initial point first).
    """
    opts = opts or EmOptions()
    if stats.n < 1:
        raise DataError("em_fit needs at least one sample")
    if init is None:
        state = init_state(stats.copy())
    else:
        if (init.p, init.K) != (stats.p, stats.K):
            raise DataError("initial state does not match the statistics' dimensions")
        state = init.copy()
        state.stats = stats.copy()
    state.n_iter = 0
    _em_iterate(state, opts, opts.max_iters, opts.rel_tol, trace)
    if opts.selection == "bic" and select_support(state, opts):
        _em_iterate(state, opts, opts.max_iters, opts.rel_tol, trace)
    return state


def _gains(S_diag, diag_SPS, g, Sz, d, s2):
    big_S = S_diag / s2 - diag_SPS / s2 ** 2
    big_Q = g / s2 - Sz / s2
    denom = 1.0 - d * big_S
    small_s = big_S / denom
    small_q = big_Q / denom
    # s_k <= 0 only arises from round-off; such components are kept
    ok = small_s > 0
    ratio = np.where(ok, small_q ** 2 / np.where(ok, small_s, 1.0), 1.0)
    gain = 0.5 * (ratio - 1.0 - np.log(np.maximum(ratio, 1.0)))
    return np.where(ok, np.where(ratio > 1.0, gain, 0.0), np.inf)


def evidence_gain(state: ModelState) -> np.ndarray:
    """Log-likelihood gained by each active component at its best prior
    variance, all other parameters held fixed (zero for inactive ones).

    Uses the leave-one-out quantities ``s_k = g_k' C_-k^-1 g_k`` and
    ``q_k = g_k' C_-k^-1 r``; the optimum is ``d_k = (q_k^2 - s_k) / s_k^2``
    and is worth ``(q_k^2/s_k - 1 - log(q_k^2/s_k)) / 2`` when ``q_k^2 > s_k``.
    The posterior stored in ``state`` must be current.
    """
    st, s2 = state.stats, state.sigma2
    idx = np.flatnonzero(state.active)
    gain = np.zeros(state.K)
    if idx.size == 0:
        return gain
    S_a = st.S_gg[np.ix_(idx, idx)]
    g = st.s_gy[idx] - st.S_gp[idx] @ state.theta
    Pa = state.P[np.ix_(idx, idx)]
    diag_SPS = np.einsum("ij,ji->i", S_a @ Pa, S_a)
    gain[idx] = _gains(np.diag(S_a), diag_SPS, g, S_a @ state.z_hat[idx], state.d[idx], s2)
    return gain


def select_support(state: ModelState, opts: EmOptions | None = None) -> int:
    """Backward elimination of weak latent components, in place.

    Repeatedly prunes the active component with the smallest evidence gain
    while that gain is below the BIC price ``log(n) / 2`` of one parameter.
    One component is removed at a time so that groups of collinear columns
    are thinned out instead of being dropped together. Returns the number
    of pruned components; parameters other than ``d`` are not refitted.

    Setting ``d_k = 0`` is the same as conditioning the posterior on
    ``z_k = 0``, so each removal is a rank-one downdate of the posterior
    rather than a fresh factorization.
    """
    opts = opts or EmOptions()
    price = 0.5 * math.log(max(state.stats.n, 1.0))
    st, s2 = state.stats, state.sigma2
    idx = np.flatnonzero(state.active)
    if idx.size == 0:
        return 0
    S_a = st.S_gg[np.ix_(idx, idx)]
    S_diag = np.diag(S_a).copy()
    g = st.s_gy[idx] - st.S_gp[idx] @ state.theta
    P = state.P[np.ix_(idx, idx)].copy()
    z = state.z_hat[idx].copy()
    d = state.d[idx].copy()
    diag_SPS = np.einsum("ij,ji->i", S_a @ P, S_a)
    Sz = S_a @ z
    alive = np.ones(idx.size, dtype=bool)
    removed = 0
    while alive.any():
        gain = _gains(S_diag, diag_SPS, g, Sz, d, s2)
        gain[~alive] = np.inf
        j = int(np.argmin(gain))
        if gain[j] >= price:
            break
        alive[j] = False
        removed += 1
        v = P[:, j].copy()
        pjj = v[j]
        if pjj > 0:
            u = S_a @ v
            diag_SPS -= u * u / pjj
            Sz -= u * (z[j] / pjj)
            z -= v * (z[j] / pjj)
            P -= np.outer(v, v / pjj)
        d[j] = 0.0
        P[j, :] = 0.0
        P[:, j] = 0.0
        z[j] = 0.0
    if removed:
        gone = idx[~alive]
        state.active[gone] = False
        state.d[gone] = 0.0
        post = _posterior(st, state.theta, state.d, s2, state.active, opts.ridge_jitter)
        _apply_posterior(state, post)
    return removed


def recursive_update(state: ModelState, phi, gamma, y: float, opts: EmOptions | None = None) -> ModelState:
    """Fold one observation into ``state`` (in place) and refine it with
    ``opts.iters_per_sample`` EM sweeps. Returns the same object."""
    opts = opts or EmOptions()
    first = state.stats.n == 0
    state.stats.update(phi, gamma, y)
    if first:
        state.sigma2 = _initial_sigma2(state.stats)
    return _em_iterate(state, opts, opts.iters_per_sample, None, None)


def new_state(p: int, K: int, lam: float = 1.0) -> ModelState:
    """Empty state for streaming from scratch (prediction is zero until data arrives)."""
    return init_state(SufficientStats(p, K, lam))
