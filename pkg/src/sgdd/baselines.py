"""Guided reverse-diffusion baselines (SVDD-PM, SMC, discrete DPS) and prior-free MCMC.

All samplers consume the same :class:`~sgdd.diffusion.ConcreteScoreProvider`
and :class:`~sgdd.splitgibbs.LikelihoodPotential` as SGDD.  Each one is
batched over independent runs; a run returns one sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .base import PosteriorSampler
from .diffusion import ConcreteScoreProvider, euler_step, reverse_euler_sample, sigma_grid
from .splitgibbs import ConfigError, LikelihoodPotential, metropolis_sweeps
from .statespace import TOKEN_DTYPE, BudgetError, StateSpace

DPS_BUDGET = 4096
WEIGHT_TOL = 1e-12
ROLLOUT_CHUNK = 2**22  # max ratio entries (rows * D * N) evaluated at once
RESAMPLING = ("systematic", "multinomial")


@dataclass(frozen=True)
class ValueEstimateConfig:
    """Monte Carlo estimate of ``p(y | x_t)`` through ``x0`` rollouts."""

    mc_samples: int = 3
    euler_steps_for_x0: int = 5

    def __post_init__(self):
        if self.mc_samples < 1 or self.euler_steps_for_x0 < 1:
            raise ConfigError("mc_samples and euler_steps_for_x0 must be >= 1")


def estimate_log_likelihood(score: ConcreteScoreProvider, f: LikelihoodPotential, x, sigma: float,
                            vcfg: ValueEstimateConfig, rng: np.random.Generator) -> np.ndarray:
    """``log mean_m exp(-f(x0_m))`` with ``x0_m`` denoised from ``x`` at noise ``sigma``."""
    x = np.asarray(x)
    B, D = x.shape
    mc = vcfg.mc_samples
    rep = np.repeat(x, mc, axis=0)
    rows = max(1, ROLLOUT_CHUNK // (D * score.vocab_size))
    x0 = np.empty_like(rep)
    for start in range(0, len(rep), rows):
        sl = slice(start, start + rows)
        x0[sl] = reverse_euler_sample(score, rep[sl], sigma, vcfg.euler_steps_for_x0, rng)
    neg_f = -np.asarray(f(x0), dtype=float).reshape(B, mc)
    return logsumexp(neg_f, axis=1) - np.log(mc)


def _step_chunked(score, x, hi, lo, rng, log_guidance=None):
    rows = max(1, ROLLOUT_CHUNK // (x.shape[1] * score.vocab_size))
    if len(x) <= rows:
        return euler_step(score, x, hi, hi - lo, rng, log_guidance)
    out = np.empty_like(x)
    for start in range(0, len(x), rows):
        sl = slice(start, start + rows)
        g = None if log_guidance is None else log_guidance[sl]
        out[sl] = euler_step(score, x[sl], hi, hi - lo, rng, g)
    return out


def run_svdd_pm(score: ConcreteScoreProvider, f: LikelihoodPotential, M: int, steps: int,
                vcfg: ValueEstimateConfig, rng: np.random.Generator, n_runs: int = 1, *,
                sigma_max: float = 20.0, selection_beta: float = np.inf) -> np.ndarray:
    """Reverse diffusion that keeps the best of ``M`` candidate moves per step.

    At every step each run proposes ``M`` unconditional Euler moves, scores
    each with the estimated soft value ``log p(y | x_t)`` and keeps the argmax
    (lowest index on ties).  A finite ``selection_beta`` samples the candidate
    with probability ``∝ exp(selection_beta * value)`` instead.
    """
    if M < 1 or steps < 1:
        raise ConfigError("M and steps must be >= 1")
    space = StateSpace(score.vocab_size, score.seq_len)
    x = space.uniform(n_runs, rng)
    grid = sigma_grid(sigma_max, steps)
    runs = np.arange(n_runs)
    for hi, lo in zip(grid[:-1], grid[1:]):
        cand = _step_chunked(score, np.repeat(x, M, axis=0), hi, lo, rng)
        if M == 1:
            x = cand
            continue
        value = estimate_log_likelihood(score, f, cand, lo, vcfg, rng).reshape(n_runs, M)
        if np.isinf(selection_beta):
            pick = np.argmax(value, axis=1)
        else:
            logits = selection_beta * value
            probs = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
            pick = (np.cumsum(probs, axis=1) < rng.random((n_runs, 1))).sum(axis=1)
            pick = np.minimum(pick, M - 1)
        x = cand.reshape(n_runs, M, -1)[runs, pick]
    return x.astype(TOKEN_DTYPE)


@dataclass
class ParticleSet:
    """Weighted particles of ``n_runs`` independent SMC runs.

    ``particles`` has shape ``(n_runs, M, D)`` and ``weights`` ``(n_runs, M)``
    with rows summing to one.  ``degenerate`` marks runs whose weights all
    vanished at some step.
    """

    particles: np.ndarray
    weights: np.ndarray
    degenerate: np.ndarray
    n_resample: np.ndarray

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """One particle per run, chosen by weight."""
        u = rng.random((len(self.weights), 1))
        pick = np.minimum((np.cumsum(self.weights, axis=1) < u).sum(axis=1), self.weights.shape[1] - 1)
        return self.particles[np.arange(len(pick)), pick]


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices for each row of ``weights`` with a single uniform offset per row."""
    R, M = weights.shape
    u = (rng.random((R, 1)) + np.arange(M)) / M
    cdf = np.cumsum(weights, axis=1)
    cdf[:, -1] = 1.0
    return np.minimum((cdf[:, None, :] <= u[:, :, None]).sum(axis=2), M - 1)


def multinomial_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    R, M = weights.shape
    cdf = np.cumsum(weights, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((R, M))
    return np.minimum((cdf[:, None, :] <= u[:, :, None]).sum(axis=2), M - 1)


def effective_sample_size(weights: np.ndarray) -> np.ndarray:
    return 1.0 / np.sum(weights**2, axis=-1)


def run_smc(score: ConcreteScoreProvider, f: LikelihoodPotential, M: int, steps: int,
            temper_beta: float, rng: np.random.Generator, n_runs: int = 1, *,
            vcfg: ValueEstimateConfig = ValueEstimateConfig(), sigma_max: float = 20.0,
            ess_threshold: float = 0.5, resampling: str = "systematic") -> ParticleSet:
    """Sequential Monte Carlo with the unconditional reverse step as proposal.

    Incremental weights are ``[p(y|x_t) / p(y|x_{t+1})] ** temper_beta`` with
    both likelihoods estimated by rollouts.  Runs resample when their effective
    sample size drops below ``ess_threshold * M``.
    """
    if M < 2:
        raise ConfigError("SMC needs M >= 2")
    if steps < 1 or temper_beta < 0:
        raise ConfigError("need steps >= 1 and temper_beta >= 0")
    if resampling not in RESAMPLING:
        raise ConfigError(f"unknown resampling scheme {resampling!r}")
    resample = systematic_resample if resampling == "systematic" else multinomial_resample
    space = StateSpace(score.vocab_size, score.seq_len)
    D = space.seq_len
    grid = sigma_grid(sigma_max, steps)
    x = space.uniform(n_runs * M, rng)
    log_w = np.zeros((n_runs, M))
    ll_prev = estimate_log_likelihood(score, f, x, grid[0], vcfg, rng).reshape(n_runs, M)
    degenerate = np.zeros(n_runs, dtype=bool)
    n_resample = np.zeros(n_runs, dtype=np.int64)
    runs = np.arange(n_runs)[:, None]
    w = np.full((n_runs, M), 1.0 / M)
    for hi, lo in zip(grid[:-1], grid[1:]):
        x = _step_chunked(score, x, hi, lo, rng)
        ll = estimate_log_likelihood(score, f, x, lo, vcfg, rng).reshape(n_runs, M)
        if temper_beta > 0:
            with np.errstate(invalid="ignore"):
                inc = temper_beta * (ll - ll_prev)
            log_w = log_w + np.where(np.isnan(inc), -np.inf, inc)
        ll_prev = ll
        dead = ~np.isfinite(np.max(log_w, axis=1))
        if np.any(dead):
            degenerate |= dead
            log_w[dead] = 0.0
        w = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        if np.max(np.abs(w.sum(axis=1) - 1)) > WEIGHT_TOL:
            raise FloatingPointError("SMC weights failed to normalize")
        need = (effective_sample_size(w) < ess_threshold * M) | dead
        if np.any(need):
            idx = resample(w[need], rng)
            xr = x.reshape(n_runs, M, D)
            xr[need] = xr[runs[need], idx]
            llr = ll_prev
            llr[need] = llr[runs[need], idx]
            x = xr.reshape(n_runs * M, D)
            log_w[need] = 0.0
            w[need] = 1.0 / M
            n_resample += need
    return ParticleSet(x.reshape(n_runs, M, D).astype(TOKEN_DTYPE), w, degenerate, n_resample)


def dps_log_guidance(score: ConcreteScoreProvider, f: LikelihoodPotential, x: np.ndarray,
                     sigma: float, vcfg: ValueEstimateConfig, rng: np.random.Generator) -> np.ndarray:
    """``log p(y | x with x_d = v) - log p(y | x)`` for every position and token, shape ``(B, D, N)``."""
    B, D = x.shape
    N = score.vocab_size
    nbr = np.repeat(x[:, None, None, :], N, axis=2)
    nbr = np.repeat(nbr, D, axis=1)  # (B, D, N, D)
    d_idx = np.arange(D)
    nbr[:, d_idx, :, d_idx] = np.arange(N, dtype=x.dtype)[None, None, :]
    ll = estimate_log_likelihood(score, f, nbr.reshape(-1, D), sigma, vcfg, rng).reshape(B, D, N)
    own = np.take_along_axis(ll, x.astype(np.intp)[:, :, None], axis=2)
    with np.errstate(invalid="ignore"):
        g = ll - own
    return np.where(np.isnan(g), 0.0, g)


def run_discrete_dps(score: ConcreteScoreProvider, f: LikelihoodPotential, steps: int,
                     vcfg: ValueEstimateConfig, rng: np.random.Generator, n_runs: int = 1, *,
                     sigma_max: float = 20.0, budget: int = DPS_BUDGET) -> np.ndarray:
    """Reverse diffusion with rates multiplied by estimated likelihood ratios of each neighbour."""
    space = StateSpace(score.vocab_size, score.seq_len)
    if space.vocab_size * space.seq_len > budget:
        raise BudgetError(f"DPS needs N*D <= {budget}, got {space.vocab_size * space.seq_len}")
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    x = space.uniform(n_runs, rng)
    grid = sigma_grid(sigma_max, steps)
    for hi, lo in zip(grid[:-1], grid[1:]):
        g = dps_log_guidance(score, f, x, hi, vcfg, rng)
        x = _step_chunked(score, x, hi, lo, rng, g)
    return x


def run_mcmc_no_prior(f: LikelihoodPotential, space: StateSpace, n_sweeps: int,
                      rng: np.random.Generator, n_runs: int = 1, *,
                      proposal: str = "single_site_uniform") -> tuple[np.ndarray, np.ndarray]:
    """Plain Metropolis-Hastings on ``exp(-f)`` from uniform starts."""
    x = space.uniform(n_runs, rng)
    return metropolis_sweeps(x, f, 0.0, n_sweeps, rng, vocab_size=space.vocab_size, proposal=proposal)


def _check_positive_ints(est, names) -> None:
    for name in names:
        v = getattr(est, name)
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
            raise ConfigError(f"{name} must be a positive integer, got {v!r}")


class SVDDPM(PosteriorSampler):
    """Best-of-``M`` value-guided reverse diffusion (see :func:`run_svdd_pm`)."""

    def __init__(self, M=20, steps=20, mc_samples=3, euler_steps_for_x0=5, selection_beta=np.inf,
                 sigma_max=20.0, random_state=0, block_size=1000, n_jobs=1):
        self.M = M
        self.steps = steps
        self.mc_samples = mc_samples
        self.euler_steps_for_x0 = euler_steps_for_x0
        self.selection_beta = selection_beta
        self.sigma_max = sigma_max
        self.random_state = random_state
        self.block_size = block_size
        self.n_jobs = n_jobs

    def _validate_params_values(self):
        super()._validate_params_values()
        _check_positive_ints(self, ("M", "steps", "mc_samples", "euler_steps_for_x0"))
        if not self.selection_beta > 0:
            raise ConfigError("selection_beta must be positive (inf for argmax)")

    def _sample_block(self, n, rng):
        vcfg = ValueEstimateConfig(self.mc_samples, self.euler_steps_for_x0)
        x = run_svdd_pm(self.score_, self.likelihood_, self.M, self.steps, vcfg, rng, n,
                        sigma_max=self.sigma_max, selection_beta=self.selection_beta)
        return x, None

    def nfe(self):
        per = 1 + self.mc_samples * self.euler_steps_for_x0
        return self.steps * self.M * per, self.steps * (1 + self.euler_steps_for_x0)


class SMC(PosteriorSampler):
    """Sequential Monte Carlo baseline; each run returns one particle drawn by weight."""

    def __init__(self, M=20, steps=20, temper_beta=0.5, mc_samples=3, euler_steps_for_x0=5,
                 ess_threshold=0.5, resampling="systematic", sigma_max=20.0, random_state=0,
                 block_size=1000, n_jobs=1):
        self.M = M
        self.steps = steps
        self.temper_beta = temper_beta
        self.mc_samples = mc_samples
        self.euler_steps_for_x0 = euler_steps_for_x0
        self.ess_threshold = ess_threshold
        self.resampling = resampling
        self.sigma_max = sigma_max
        self.random_state = random_state
        self.block_size = block_size
        self.n_jobs = n_jobs

    def _validate_params_values(self):
        super()._validate_params_values()
        _check_positive_ints(self, ("steps", "mc_samples", "euler_steps_for_x0"))
        if self.M < 2:
            raise ConfigError("SMC needs M >= 2")
        if not self.temper_beta >= 0 or not 0 <= self.ess_threshold <= 1:
            raise ConfigError("need temper_beta >= 0 and 0 <= ess_threshold <= 1")
        if self.resampling not in RESAMPLING:
            raise ConfigError(f"unknown resampling scheme {self.resampling!r}")

    def _sample_block(self, n, rng):
        vcfg = ValueEstimateConfig(self.mc_samples, self.euler_steps_for_x0)
        ps = run_smc(self.score_, self.likelihood_, self.M, self.steps, self.temper_beta, rng, n,
                     vcfg=vcfg, sigma_max=self.sigma_max, ess_threshold=self.ess_threshold,
                     resampling=self.resampling)
        return ps.draw(rng), ps

    def _collect(self, infos):
        self.degenerate_ = np.concatenate([p.degenerate for p in infos])
        self.n_resample_ = np.concatenate([p.n_resample for p in infos])

    def nfe(self):
        per = 1 + self.mc_samples * self.euler_steps_for_x0
        return self.steps * self.M * per, self.steps * (1 + self.euler_steps_for_x0)


class DiscreteDPS(PosteriorSampler):
    """Reverse diffusion with a likelihood-ratio guidance rate matrix."""

    def __init__(self, steps=20, mc_samples=1, euler_steps_for_x0=2, sigma_max=20.0,
                 random_state=0, block_size=1000, n_jobs=1):
        self.steps = steps
        self.mc_samples = mc_samples
        self.euler_steps_for_x0 = euler_steps_for_x0
        self.sigma_max = sigma_max
        self.random_state = random_state
        self.block_size = block_size
        self.n_jobs = n_jobs

    def _validate_params_values(self):
        super()._validate_params_values()
        _check_positive_ints(self, ("steps", "mc_samples", "euler_steps_for_x0"))

    def fit(self, prior, likelihood):
        super().fit(prior, likelihood)
        if self.space_.vocab_size * self.space_.seq_len > DPS_BUDGET:
            raise BudgetError(f"DPS needs N*D <= {DPS_BUDGET}")
        return self

    def _sample_block(self, n, rng):
        vcfg = ValueEstimateConfig(self.mc_samples, self.euler_steps_for_x0)
        return run_discrete_dps(self.score_, self.likelihood_, self.steps, vcfg, rng, n,
                                sigma_max=self.sigma_max), None

    def nfe(self):
        N, D = self.space_.vocab_size, self.space_.seq_len
        per = D * (N - 1) * self.mc_samples * self.euler_steps_for_x0
        return self.steps * per, self.steps * self.euler_steps_for_x0


class MCMCNoPrior(PosteriorSampler):
    """Metropolis-Hastings on ``exp(-f)`` with SGDD's proposal and ``K * mh_sweeps`` sweeps."""

    def __init__(self, K=10, mh_sweeps=5, proposal="single_site_uniform", random_state=0,
                 block_size=1000, n_jobs=1):
        self.K = K
        self.mh_sweeps = mh_sweeps
        self.proposal = proposal
        self.random_state = random_state
        self.block_size = block_size
        self.n_jobs = n_jobs

    def _validate_params_values(self):
        super()._validate_params_values()
        _check_positive_ints(self, ("K", "mh_sweeps"))

    def _sample_block(self, n, rng):
        return run_mcmc_no_prior(self.likelihood_, self.space_, self.K * self.mh_sweeps, rng, n,
                                 proposal=self.proposal)

    def _collect(self, infos):
        self.accept_rate_ = np.concatenate(infos)

    def nfe(self):
        return 0, 0
