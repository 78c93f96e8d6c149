"""Uniform-kernel discrete diffusion with exact tabular concrete scores.

The forward process perturbs every position independently with the generator
``11^T/N - I`` in the noise coordinate ``sigma``.  Per position the transition
after noise ``sigma`` keeps the token with probability ``1 - beta`` and moves to
each of the ``N - 1`` other tokens with probability ``beta / (N - 1)``, where
``beta = (N-1)/N * (1 - exp(-sigma))``.
"""

from __future__ import annotations

import functools
import json
from pathlib import Path
from typing import Protocol

import numpy as np

from .statespace import (
    DEFAULT_ENUMERATION_BUDGET,
    BudgetError,
    DimensionError,
    DomainError,
    StateSpace,
    TOKEN_DTYPE,
    as_batch,
    check_tokens,
    hamming_distance,
)

RATIO_CLAMP = (1e-30, 1e30)
SIGMA_FLOOR = 1e-5
NORMALIZATION_TOL = 1e-12
NOISE_CACHE_BYTES = 2**28  # memory for cached noised tables per prior


class DegenerateStateError(ValueError):
    """Concrete score requested at a state of zero probability."""


class NumericError(FloatingPointError):
    pass


def beta_of_sigma(sigma, vocab_size: int):
    """Total probability that a position has changed after noise ``sigma``."""
    s = np.asarray(sigma, dtype=float)
    if np.any(s < 0) or np.any(np.isnan(s)):
        raise DomainError("sigma must be non-negative")
    if vocab_size < 2:
        raise DomainError("vocab_size must be >= 2")
    out = (vocab_size - 1) / vocab_size * -np.expm1(-s)
    return float(out) if out.ndim == 0 else out


def heat_kernel_logpmf(x_t, x_0, sigma: float, vocab_size: int):
    """Exact ``log p_sigma(x_t | x_0)`` under the product uniform kernel."""
    x_t = np.asarray(x_t)
    x_0 = np.asarray(x_0)
    D = x_t.shape[-1]
    d = np.asarray(hamming_distance(x_t, x_0))
    beta = beta_of_sigma(sigma, vocab_size)
    with np.errstate(divide="ignore"):
        log_wrong = np.log(beta / (vocab_size - 1))
        log_keep = np.log1p(-beta)
    with np.errstate(invalid="ignore"):  # 0 * -inf in the unused branch at sigma = 0
        out = np.where(d > 0, d * log_wrong, 0.0) + (D - d) * log_keep
    return float(out) if out.ndim == 0 else out


def one_dim_kernel(sigma: float, vocab_size: int) -> np.ndarray:
    """Column-stochastic ``exp(sigma * (11^T/N - I))`` for a single position."""
    decay = np.exp(-sigma)
    return decay * np.eye(vocab_size) + (1 - decay) / vocab_size


class ConcreteScoreProvider(Protocol):
    vocab_size: int
    seq_len: int

    def ratios(self, x: np.ndarray, sigma: float) -> np.ndarray:
        """``p_sigma(x with x_d := v) / p_sigma(x)`` for a ``(B, D)`` batch, shape ``(B, D, N)``.

        Entries at ``v == x_d`` equal one.
        """
        ...


class TabularPrior:
    """Exact prior over ``{0..N-1}^D``, either factorized or as a full joint table.

    Parameters
    ----------
    form : {"factorized", "joint"}
    tables : array_like
        ``(D, N)`` per-position pmfs for the factorized form, or an array of
        shape ``(N,) * D`` for the joint form.
    budget : int
        Largest joint table allowed.
    """

    def __init__(self, form: str, tables, *, budget: int = DEFAULT_ENUMERATION_BUDGET):
        arr = np.array(tables, dtype=float)
        if form == "factorized":
            if arr.ndim != 2:
                raise DimensionError("factorized tables must have shape (D, N)")
            D, N = arr.shape
            sums = arr.sum(axis=1)
        elif form == "joint":
            if arr.ndim < 1 or len(set(arr.shape)) != 1:
                raise DimensionError("joint table must have shape (N,)*D")
            D, N = arr.ndim, arr.shape[0]
            StateSpace(N, D).num_states(budget)
            sums = np.array([arr.sum()])
        else:
            raise DomainError(f"unknown prior form {form!r}")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise DomainError("probabilities must be finite and non-negative")
        if np.any(np.abs(sums - 1) > NORMALIZATION_TOL):
            raise DomainError(f"tables must sum to 1 within {NORMALIZATION_TOL}")
        arr.setflags(write=False)
        self.form = form
        self.tables = arr
        self.space = StateSpace(N, D)
        self.budget = budget
        n_cached = int(np.clip(NOISE_CACHE_BYTES // max(arr.nbytes, 1), 16, 4096))
        self._noised_log_table = functools.lru_cache(maxsize=n_cached)(self._compute_noised_log_table)

    @property
    def vocab_size(self) -> int:
        return self.space.vocab_size

    @property
    def seq_len(self) -> int:
        return self.space.seq_len

    def __repr__(self):
        return f"TabularPrior(form={self.form!r}, N={self.vocab_size}, D={self.seq_len})"

    # -- constructors -------------------------------------------------
    @classmethod
    def uniform(cls, vocab_size: int, seq_len: int) -> "TabularPrior":
        return cls("factorized", np.full((seq_len, vocab_size), 1.0 / vocab_size))

    @classmethod
    def from_factors(cls, factors) -> "TabularPrior":
        return cls("factorized", factors)

    # -- probabilities ------------------------------------------------
    def joint_table(self, budget: int | None = None) -> np.ndarray:
        """Full ``(N,)*D`` probability table (outer product for factorized priors)."""
        if self.form == "joint":
            return self.tables
        self.space.num_states(budget or self.budget)
        out = np.ones(())
        for row in self.tables:
            out = np.multiply.outer(out, row)
        return out

    def as_joint(self, budget: int | None = None) -> "TabularPrior":
        if self.form == "joint":
            return self
        table = self.joint_table(budget)
        return TabularPrior("joint", table / table.sum(), budget=budget or self.budget)

    def log_prob(self, x) -> np.ndarray:
        x = as_batch(x, self.space).astype(np.intp)
        with np.errstate(divide="ignore"):
            if self.form == "factorized":
                D = self.seq_len
                return np.log(self.tables[np.arange(D), x]).sum(axis=1)
            return np.log(self.tables[tuple(x.T)])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact i.i.d. draws from the prior."""
        if self.form == "factorized":
            cdf = np.cumsum(self.tables, axis=1)
            u = rng.random((n, self.seq_len, 1))
            x = (u > cdf[None]).sum(axis=-1)
            return np.minimum(x, self.vocab_size - 1).astype(TOKEN_DTYPE)
        flat = rng.choice(self.tables.size, size=n, p=self.tables.ravel())
        return np.stack(np.unravel_index(flat, self.tables.shape), axis=1).astype(TOKEN_DTYPE)

    # -- diffusion ----------------------------------------------------
    def marginal_at_sigma(self, sigma: float) -> "TabularPrior":
        return marginal_at_sigma(self, sigma)

    def _compute_noised_log_table(self, sigma: float) -> np.ndarray:
        table = _noise_table(self, sigma)
        with np.errstate(divide="ignore"):
            out = np.log(table)
        out.setflags(write=False)
        return out

    def ratios(self, x, sigma: float) -> np.ndarray:
        return concrete_score(self, x, sigma)

    # -- serialization ------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "N": self.vocab_size,
            "D": self.seq_len,
            "tables": self.tables.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularPrior":
        prior = cls(data["form"], data["tables"])
        if prior.vocab_size != data["N"] or prior.seq_len != data["D"]:
            raise DimensionError("serialized N/D disagree with the tables")
        return prior

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TabularPrior":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _noise_table(prior: TabularPrior, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    decay = np.exp(-sigma)
    N = prior.vocab_size
    if prior.form == "factorized":
        return decay * prior.tables + (1 - decay) / N
    out = np.array(prior.tables)
    # The product kernel factorizes, so apply the one-position kernel axis by axis.
    for axis in range(out.ndim):
        out = decay * out + (1 - decay) / N * out.sum(axis=axis, keepdims=True)
    return out


def marginal_at_sigma(prior: TabularPrior, sigma: float) -> TabularPrior:
    """Distribution of ``x_sigma`` when ``x_0`` follows ``prior``."""
    table = _noise_table(prior, float(sigma))
    if prior.form == "factorized":
        table = table / table.sum(axis=1, keepdims=True)
    else:
        table = table / table.sum()
    return TabularPrior(prior.form, table, budget=prior.budget)


def concrete_score(prior: TabularPrior, x, sigma: float) -> np.ndarray:
    """Exact ratios ``p_sigma(x~)/p_sigma(x)`` over all single-position changes.

    Returns an array of shape ``(B, D, N)`` (or ``(D, N)`` for a single sequence)
    with ones at the current tokens, clamped to ``[1e-30, 1e30]``.
    """
    single = np.ndim(x) == 1
    xb = as_batch(x, prior.space).astype(np.intp)
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    N, D = prior.vocab_size, prior.seq_len
    log_table = prior._noised_log_table(float(sigma))
    if prior.form == "factorized" and np.all(np.isfinite(log_table)):
        table = np.exp(log_table)
        r = table[None, :, :] / table[np.arange(D), xb][:, :, None]
        np.clip(r, *RATIO_CLAMP, out=r)
        return r[0] if single else r
    if prior.form == "factorized":
        cur = log_table[np.arange(D), xb]  # (B, D)
        log_r = log_table[None, :, :] - cur[:, :, None]
    else:
        flat_table = log_table.ravel()
        strides = N ** np.arange(D - 1, -1, -1)
        flat = xb @ strides
        cur = flat_table[flat]
        if np.any(np.isneginf(cur)):
            raise DegenerateStateError("current state has zero probability under the prior")
        v = np.arange(N)
        nb = flat[:, None, None] + (v[None, None, :] - xb[:, :, None]) * strides[None, :, None]
        log_r = flat_table[nb] - cur[:, None, None]
    with np.errstate(over="ignore", under="ignore"):
        r = np.exp(np.clip(log_r, np.log(RATIO_CLAMP[0]), np.log(RATIO_CLAMP[1])))
    if np.isnan(r).any():
        raise DegenerateStateError("undefined ratio (0/0); current state has zero probability")
    return r[0] if single else r


def sigma_grid(sigma_start: float, steps: int, sigma_floor: float = SIGMA_FLOOR,
               spacing: str = "geometric") -> np.ndarray:
    """Decreasing noise levels ``sigma_start = s_0 > ... > s_steps`` used by the reverse sampler.

    The end point is ``sigma_floor``, or ``sigma_start / 10`` when the start is
    already at or below the floor.
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    if not sigma_start > 0:
        raise DomainError("sigma_start must be positive")
    end = sigma_floor if sigma_start > sigma_floor else sigma_start / 10
    if spacing == "geometric":
        return np.geomspace(sigma_start, end, steps + 1)
    if spacing == "linear":
        return np.linspace(sigma_start, end, steps + 1)
    raise DomainError(f"unknown spacing {spacing!r}")


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of the last axis of ``probs`` (rows must sum to ~1)."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def euler_step(score: ConcreteScoreProvider, x: np.ndarray, sigma: float, dsigma: float,
               rng: np.random.Generator, log_guidance: np.ndarray | None = None) -> np.ndarray:
    """One tau-leaping step of the reverse chain from ``sigma`` to ``sigma - dsigma``.

    Every position jumps independently to ``v != x_d`` with mass
    ``dsigma / N * ratio(d, v)`` (times ``exp(log_guidance)`` when given); when the
    masses of a position exceed one they are rescaled to sum to one.
    """
    N = score.vocab_size
    r = score.ratios(x, sigma)
    if log_guidance is not None:
        with np.errstate(over="ignore"):
            r = r * np.exp(np.clip(log_guidance, -690.0, 690.0))
    if not np.all(np.isfinite(r)):
        raise NumericError("non-finite concrete score ratio")
    xi = x.astype(np.intp)
    m = (dsigma / N) * r
    np.put_along_axis(m, xi[..., None], 0.0, axis=-1)
    total = m.sum(axis=-1)
    stay = 1.0 - np.minimum(total, 1.0)
    # inverse CDF with the stay mass first; only jumping positions need a CDF
    u = rng.random(total.shape)
    jump = u >= stay
    out = xi.copy()
    if np.any(jump):
        cdf = np.cumsum(m[jump], axis=-1) / np.maximum(total[jump], 1.0)[:, None]
        idx = (cdf <= (u[jump] - stay[jump])[:, None]).sum(axis=-1)
        out[jump] = np.minimum(idx, N - 1)
    return out.astype(TOKEN_DTYPE)


def reverse_euler_sample(score: ConcreteScoreProvider, start, sigma_start: float, steps: int,
                         rng: np.random.Generator, *, sigma_floor: float = SIGMA_FLOOR,
                         spacing: str = "geometric") -> np.ndarray:
    """Run the reverse chain from noise ``sigma_start`` to ~0 in ``steps`` Euler steps."""
    if steps < 1:
        raise DomainError("steps must be >= 1")
    single = np.ndim(start) == 1
    x = as_batch(start, StateSpace(score.vocab_size, score.seq_len)).copy()
    grid = sigma_grid(sigma_start, steps, sigma_floor, spacing)
    for hi, lo in zip(grid[:-1], grid[1:]):
        x = euler_step(score, x, hi, hi - lo, rng)
    return x[0] if single else x


def forward_noise_sample(x0, sigma: float, vocab_size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``x_sigma ~ p_sigma(. | x0)``: keep each token w.p. ``1 - beta``, else a uniform other token."""
    x0 = check_tokens(x0)
    beta = beta_of_sigma(sigma, vocab_size)
    move = rng.random(x0.shape) < beta
    shift = rng.integers(1, vocab_size, size=x0.shape)
    out = np.where(move, (x0.astype(np.int64) + shift) % vocab_size, x0)
    return out.astype(TOKEN_DTYPE)
