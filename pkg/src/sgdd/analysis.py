"""Distances between pmfs, exact posterior oracles, and numerical theory checks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .diffusion import TabularPrior
from .splitgibbs import coupling_coefficient
from .statespace import (
    DEFAULT_ENUMERATION_BUDGET,
    BudgetError,
    DimensionError,
    DomainError,
    StateSpace,
    as_batch,
    hamming_distance,
)

PMF_TOL = 1e-12
PSNR_CAP = 99.0
ENUM_CHUNK = 2**20


@dataclass(frozen=True)
class Pmf:
    """Normalized probabilities over an implicit product grid (the array shape)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise DomainError("pmf entries must be finite and non-negative")
        if abs(p.sum() - 1) > PMF_TOL * max(1, p.size ** 0.5):
            raise DomainError(f"pmf sums to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def normalize(cls, weights) -> "Pmf":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum())

    @property
    def shape(self):
        return self.probs.shape

    def marginal(self, dims) -> "Pmf":
        dims = tuple(dims)
        other = tuple(a for a in range(self.probs.ndim) if a not in dims)
        m = self.probs.sum(axis=other) if other else self.probs
        order = np.argsort(np.argsort(dims))
        return Pmf(np.transpose(m, order) if m.ndim > 1 else m)


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = p.probs if isinstance(p, Pmf) else np.asarray(p, dtype=float)
    q = q.probs if isinstance(q, Pmf) else np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionError(f"support mismatch: {p.shape} vs {q.shape}")
    return p, q


def hellinger(p, q) -> float:
    p, q = _pair(p, q)
    return float(np.sqrt(max(0.0, 0.5 * np.sum((np.sqrt(p) - np.sqrt(q)) ** 2))))


def total_variation(p, q) -> float:
    p, q = _pair(p, q)
    return float(0.5 * np.abs(p - q).sum())


def kl_divergence(mu, pi, *, return_flag: bool = False):
    """``sum mu log(mu/pi)`` with ``0 log 0 = 0``.

    Returns ``inf`` (and ``flag=True`` when requested) if ``mu`` is not
    absolutely continuous with respect to ``pi``.
    """
    mu, pi = _pair(mu, pi)
    support = mu > 0
    violated = bool(np.any(pi[support] <= 0))
    if violated:
        val = np.inf
    else:
        m = mu[support]
        val = float(max(0.0, np.sum(m * (np.log(m) - np.log(pi[support])))))
    return (val, violated) if return_flag else val


def check_rate_matrix(Q, tol: float = 1e-10) -> np.ndarray:
    """Validate a generator in the column convention ``d/dt p = Q p``."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise DimensionError("rate matrix must be square")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        raise DomainError("off-diagonal rates must be non-negative")
    if np.any(np.abs(Q.sum(axis=0)) > tol * max(1.0, np.abs(Q).max())):
        raise DomainError("columns of a rate matrix must sum to zero")
    return Q


def random_rate_matrix(S: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Dense irreducible generator with positive off-diagonal rates."""
    Q = rng.uniform(0.1, 1.0, size=(S, S)) * scale
    np.fill_diagonal(Q, 0.0)
    Q -= np.diag(Q.sum(axis=0))
    return Q


def relative_fisher_information(mu, pi, Q) -> float:
    """``sum_{i != j} pi_i Q[j, i] (f_j - f_i - f_i log(f_j / f_i))`` with ``f = mu / pi``."""
    mu, pi = _pair(mu, pi)
    Q = check_rate_matrix(Q)
    if np.any(pi <= 0):
        raise DomainError("pi must be strictly positive")
    f = mu / pi
    fi = f[None, :]  # column index i (source)
    fj = f[:, None]  # row index j (target)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.where(fi > 0, fi * (np.log(fj) - np.log(fi)), 0.0)
    terms = fj - fi - log_term
    W = pi[None, :] * Q
    np.fill_diagonal(W, 0.0)
    mask = W > 0
    return float(np.sum(W[mask] * terms[mask]))


def empirical_pmf(samples, vocab_size: int, dims=(0, 1)) -> Pmf:
    """Raw frequency table of ``samples[:, dims]`` over the ``N**len(dims)`` grid."""
    x = as_batch(samples).astype(np.intp)
    dims = tuple(dims)
    counts = np.zeros((vocab_size,) * len(dims))
    np.add.at(counts, tuple(x[:, d] for d in dims), 1.0)
    return Pmf(counts / counts.sum())


def _log_posterior_table(prior: TabularPrior, f, budget: int) -> np.ndarray:
    space = prior.space
    S = space.num_states(budget)
    shape = (space.vocab_size,) * space.seq_len
    log_post = np.empty(S)
    for start in range(0, S, ENUM_CHUNK):
        idx = np.arange(start, min(S, start + ENUM_CHUNK))
        states = np.stack(np.unravel_index(idx, shape), axis=1).astype(np.uint16)
        with np.errstate(divide="ignore"):
            log_post[idx] = prior.log_prob(states) - np.asarray(f(states), dtype=float)
    return log_post.reshape(shape)


def _normalize_log(log_w: np.ndarray) -> np.ndarray:
    m = np.max(log_w[np.isfinite(log_w)])
    w = np.exp(log_w - m)
    return w / w.sum()


def exact_posterior_enumerate(prior: TabularPrior, f, budget: int = DEFAULT_ENUMERATION_BUDGET) -> Pmf:
    """``p0(x) exp(-f(x))`` normalized over all ``N**D`` states (array of shape ``(N,)*D``)."""
    return Pmf(_normalize_log(_log_posterior_table(prior, f, budget)))


def _lattice_indices(values: np.ndarray, step: float) -> tuple[np.ndarray, float]:
    a = np.abs(values)
    base = a.min()
    k = (a - base) / step
    ki = np.rint(k)
    if np.max(np.abs(k - ki)) > 1e-9:
        raise DomainError("value map is not aligned to the lattice")
    return ki.astype(np.int64), float(base)


def exact_posterior_marginal_dp(prior: TabularPrior, model, y: float, sigma_y: float,
                                dims=(0, 1), budget: int = DEFAULT_ENUMERATION_BUDGET) -> Pmf:
    """Exact two-position posterior marginal for an ``l1_sum`` model by lattice convolution.

    The remaining positions only enter through the sum of their absolute
    values, whose distribution is an integer-lattice convolution of the
    per-position pmfs.  Falls back to enumeration when the values are not
    lattice aligned and the space is small enough.
    """
    if prior.form != "factorized":
        raise DomainError("the lattice oracle needs a factorized prior")
    if model.kind != "l1_sum":
        raise DomainError("the lattice oracle needs an l1_sum forward model")
    d0, d1 = dims
    D, N = prior.seq_len, prior.vocab_size
    values = np.asarray(model.values, dtype=float)
    step = model.lattice_step
    try:
        if step is None:
            raise DomainError("no lattice step recorded")
        k, base = _lattice_indices(values, step)
    except DomainError:
        from .tasks import make_likelihood

        post = exact_posterior_enumerate(prior, make_likelihood(model, y, sigma_y), budget)
        return post.marginal(dims)
    rest = [d for d in range(D) if d not in dims]
    conv = np.ones(1)
    for d in rest:
        pk = np.bincount(k, weights=prior.tables[d], minlength=k.max() + 1)
        conv = np.convolve(conv, pk)
    s_vals = len(rest) * base + np.arange(len(conv)) * step
    a = np.abs(values)
    total = a[:, None, None] + a[None, :, None] + s_vals[None, None, :]
    lik = np.exp(-np.abs(total - y) / sigma_y) @ conv
    w = prior.tables[d0][:, None] * prior.tables[d1][None, :] * lik
    return Pmf.normalize(w)


def psnr_binary(x, ref) -> np.ndarray | float:
    """``10 log10(1 / MSE)`` for binary sequences, capped at 99 dB when identical."""
    x = np.asarray(x)
    ref = np.asarray(ref)
    D = x.shape[-1]
    if ref.shape[-1] != D:
        raise DimensionError("length mismatch")
    if max(int(x.max(initial=0)), int(ref.max(initial=0))) > 1:
        raise DomainError("psnr_binary needs binary tokens")
    d = np.asarray(hamming_distance(x, ref), dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(d > 0, 10 * np.log10(D / np.maximum(d, 1)), PSNR_CAP)
    return float(out) if out.ndim == 0 else out


def psnr_pooled(x, ref) -> float:
    """PSNR of the mean squared error pooled over a batch, capped at 99 dB.

    Less dominated by exact matches than the mean of per-sample PSNRs.
    """
    x = as_batch(x)
    ref = np.asarray(ref)
    if ref.shape[-1] != x.shape[1]:
        raise DimensionError("length mismatch")
    mse = float(np.mean(hamming_distance(x, ref))) / x.shape[1]
    return PSNR_CAP if mse == 0 else min(PSNR_CAP, 10 * np.log10(1 / mse))


# -- Metropolis-Hastings kernels and the augmented target ------------------

def mh_transition_matrix(log_target, space: StateSpace, *, invert_acceptance: bool = False) -> np.ndarray:
    """Row-stochastic kernel of one single-site uniform MH proposal.

    ``log_target`` is an unnormalized log-probability per state in row-major
    order.  ``invert_acceptance`` flips the acceptance ratio (negative control).
    """
    lt = np.asarray(log_target, dtype=float).ravel()
    S = space.num_states()
    if lt.shape != (S,):
        raise DimensionError("log_target must have one entry per state")
    N, D = space.vocab_size, space.seq_len
    states = space.enumerate().astype(np.int64)
    strides = N ** np.arange(D - 1, -1, -1)
    idx = np.arange(S)
    T = np.zeros((S, S))
    q = 1.0 / (D * (N - 1))
    for d in range(D):
        for shift in range(1, N):
            new = (states[:, d] + shift) % N
            j = idx + (new - states[:, d]) * strides[d]
            delta = lt[j] - lt[idx]
            if invert_acceptance:
                delta = -delta
            with np.errstate(invalid="ignore"):
                acc = np.where(np.isfinite(lt[j]), np.exp(np.minimum(0.0, delta)), 0.0)
            T[idx, j] += q * acc
    T[idx, idx] = 1.0 - T.sum(axis=1)
    return T


def likelihood_step_kernel(x_state: int, f_values, eta: float, space: StateSpace, *,
                           sweeps: int = 1, coupling: str = "heat_kernel",
                           invert_acceptance: bool = False) -> np.ndarray:
    """Dense kernel of ``sweeps`` MH sweeps on ``z`` given a fixed ``x`` (by flat index)."""
    states = space.enumerate()
    c = coupling_coefficient(eta, space.vocab_size, coupling)
    d = hamming_distance(states, states[x_state])
    lt = -np.asarray(f_values, dtype=float).ravel() - c * d
    T = mh_transition_matrix(lt, space, invert_acceptance=invert_acceptance)
    return np.linalg.matrix_power(T, sweeps * space.seq_len)


def hamming_kernel_apply(table: np.ndarray, weight_off: float) -> np.ndarray:
    """``out[x] = sum_z table[z] * weight_off**d(x, z)`` via per-axis application."""
    out = np.asarray(table, dtype=float)
    for axis in range(out.ndim):
        out = (1 - weight_off) * out + weight_off * out.sum(axis=axis, keepdims=True)
    return out


def augmented_joint(prior: TabularPrior, f, eta: float, coupling: str = "heat_kernel") -> np.ndarray:
    """Dense ``pi(x, z; eta)`` as an ``(S, S)`` array (small spaces only)."""
    space = prior.space
    states = space.enumerate(budget=4096)
    c = coupling_coefficient(eta, space.vocab_size, coupling)
    with np.errstate(divide="ignore"):
        log_p0 = prior.log_prob(states)
    log_lik = -np.asarray(f(states), dtype=float)
    d = hamming_distance(states[:, None, :], states[None, :, :])
    log_w = log_p0[:, None] + log_lik[None, :] - c * d
    return _normalize_log(log_w)


def augmented_marginal_x(prior: TabularPrior, f, eta: float, coupling: str = "heat_kernel",
                         budget: int = DEFAULT_ENUMERATION_BUDGET) -> Pmf:
    """Exact ``pi^X(x; eta) ∝ p0(x) sum_z exp(-f(z) - c(eta) d(x, z))``."""
    space = prior.space
    c = coupling_coefficient(eta, space.vocab_size, coupling)
    shape = (space.vocab_size,) * space.seq_len
    states = space.enumerate(budget)
    log_lik = -np.asarray(f(states), dtype=float)
    lik = np.exp(log_lik - log_lik.max()).reshape(shape)
    smoothed = hamming_kernel_apply(lik, np.exp(-c))
    w = prior.joint_table(budget) * smoothed
    return Pmf.normalize(w)


def exact_prior_conditional(prior: TabularPrior, eta: float, coupling: str = "heat_kernel") -> np.ndarray:
    """Row-stochastic ``P[z, x] = pi(x | z; eta) ∝ p0(x) exp(-c d(x, z))``."""
    space = prior.space
    states = space.enumerate(budget=4096)
    c = coupling_coefficient(eta, space.vocab_size, coupling)
    p0 = prior.joint_table().ravel()
    d = hamming_distance(states[:, None, :], states[None, :, :])
    W = p0[None, :] * np.exp(-c * d)
    return W / W.sum(axis=1, keepdims=True)


def augmented_sweep_kernel(prior: TabularPrior, f, eta: float, *, sweeps: int = 1,
                           coupling: str = "heat_kernel", invert_acceptance: bool = False) -> np.ndarray:
    """Kernel on ``(x, z)`` pairs (flat index ``x * S + z``) of one likelihood+prior sweep."""
    space = prior.space
    S = space.num_states(4096)
    states = space.enumerate()
    fz = np.asarray(f(states), dtype=float)
    L = np.zeros((S * S, S * S))
    for xi in range(S):
        Kz = likelihood_step_kernel(xi, fz, eta, space, sweeps=sweeps, coupling=coupling,
                                    invert_acceptance=invert_acceptance)
        L[xi * S:(xi + 1) * S, xi * S:(xi + 1) * S] = Kz
    P_cond = exact_prior_conditional(prior, eta, coupling)
    P = np.zeros((S * S, S * S))
    for xi in range(S):
        for zi in range(S):
            P[xi * S + zi, np.arange(S) * S + zi] = P_cond[zi]
    return L @ P


def verify_mh_dpi(pi, mu, kernel) -> tuple[float, float]:
    """``KL(pi || mu)`` before and after pushing both through a Markov kernel."""
    K = np.asarray(kernel, dtype=float)
    if np.any(np.abs(K.sum(axis=1) - 1) > 1e-12) or np.any(K < -1e-15):
        raise DomainError("kernel must be row-stochastic")
    p, m = _pair(pi, mu)
    return kl_divergence(p, m), kl_divergence(p @ K, m @ K)


def _kl_decay_residual(Q, Qt, pi0, mu0, t_grid, dt):
    worst = 0.0
    for t in t_grid:
        def kl_at(s):
            return kl_divergence(expm(Q * s) @ pi0, expm(Qt * s) @ mu0)

        deriv = (kl_at(t + dt) - kl_at(t - dt)) / (2 * dt)
        pi_t = expm(Q * t) @ pi0
        mu_t = expm(Qt * t) @ mu0
        fi = relative_fisher_information(pi_t, mu_t, Qt)
        error_term = np.log(pi_t / mu_t) @ ((Qt - Q) @ pi_t)
        worst = max(worst, abs(deriv - (-fi - error_term)))
    return worst


def verify_kl_decay_identity(Q, Qtilde, pi0, mu0, t_grid, dt: float = 1e-3) -> float:
    """Max residual of ``d/dt KL(pi_t||mu_t) = -FI_Qtilde(pi_t||mu_t) - log(pi_t/mu_t)^T (Qtilde - Q) pi_t``.

    ``pi_t`` evolves under ``Q`` and ``mu_t`` under ``Qtilde`` (exact matrix
    exponentials); the derivative is a central difference of width ``dt``.
    """
    Q = check_rate_matrix(Q)
    Qt = check_rate_matrix(Qtilde)
    if Q.shape[0] > 64:
        raise BudgetError("theory checks are limited to 64 states")
    pi0, mu0 = _pair(pi0, mu0)
    if np.any(np.asarray(t_grid) - dt < 0):
        raise DomainError("t_grid points must be at least dt")
    res = _kl_decay_residual(Q, Qt, pi0, mu0, t_grid, dt)
    if not np.isfinite(res):
        warnings.warn("non-finite residual; retrying with dt / 2", RuntimeWarning)
        res = _kl_decay_residual(Q, Qt, pi0, mu0, t_grid, dt / 2)
    return float(res)
