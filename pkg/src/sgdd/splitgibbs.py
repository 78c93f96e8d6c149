"""Split Gibbs posterior sampling with a discrete diffusion prior.

The sampler targets the augmented distribution

    pi(x, z; eta) ∝ p0(x) exp(-f(z)) exp(-c(eta) * d(x, z))

where ``d`` is the Hamming distance.  Each iteration draws ``z | x`` with
Metropolis-Hastings (likelihood step) and ``x | z`` by running the reverse
diffusion from noise level ``eta`` starting at ``z`` (prior step), while ``eta``
is annealed towards zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .base import PosteriorSampler
from .diffusion import SIGMA_FLOOR, ConcreteScoreProvider, reverse_euler_sample
from .statespace import (
    TOKEN_DTYPE,
    AnnealingSchedule,
    DomainError,
    StateSpace,
    as_batch,
    hamming_distance,
)

COUPLINGS = ("heat_kernel", "hamming")
PROPOSALS = ("single_site_uniform", "single_site_kernel")


class ConfigError(ValueError):
    pass


def potential_coefficient(eta: float, vocab_size: int) -> float:
    """``log[(1 + (N-1)e^-eta) / ((N-1)(1 - e^-eta))]``; diverges as ``eta -> 0+``.

    Negative for large ``eta`` when ``N > 2``.
    """
    if not eta > 0:
        raise DomainError("eta must be positive")
    n1 = vocab_size - 1
    return float(np.log1p(n1 * np.exp(-eta)) - np.log(n1) - np.log(-np.expm1(-eta)))


def heat_kernel_coefficient(eta: float, vocab_size: int) -> float:
    """``log[(1 + (N-1)e^-eta) / (1 - e^-eta)]``.

    ``exp(-coef * d(x, z))`` is proportional to the uniform-kernel transition
    probability ``p_eta(z | x)``, so the prior step of the reverse diffusion
    samples the exact conditional ``x | z``.  Equals
    :func:`potential_coefficient` when ``N = 2``.
    """
    if not eta > 0:
        raise DomainError("eta must be positive")
    n1 = vocab_size - 1
    return float(np.log1p(n1 * np.exp(-eta)) - np.log(-np.expm1(-eta)))


def coupling_coefficient(eta: float, vocab_size: int, coupling: str = "heat_kernel") -> float:
    if coupling == "heat_kernel":
        return heat_kernel_coefficient(eta, vocab_size)
    if coupling == "hamming":
        return potential_coefficient(eta, vocab_size)
    raise ConfigError(f"unknown coupling {coupling!r}")


def potential(x, z, eta: float, vocab_size: int):
    """Hamming potential ``d(x, z) * potential_coefficient(eta, N)``."""
    return hamming_distance(x, z) * potential_coefficient(eta, vocab_size)


class LikelihoodPotential:
    """Negative log-likelihood ``f(z; y)`` evaluated on token batches.

    Parameters
    ----------
    fn : callable
        Maps a ``(B, D)`` token array to ``(B,)`` real values.
    kind : {"inverse_problem", "reward", "flat"}
    sigma_y, beta : float, optional
        Metadata recorded with the potential.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], kind: str = "inverse_problem",
                 *, sigma_y: float | None = None, beta: float | None = None, name: str = ""):
        self.fn = fn
        self.kind = kind
        self.sigma_y = sigma_y
        self.beta = beta
        self.name = name

    def __call__(self, z) -> np.ndarray:
        zb = np.asarray(z)
        out = np.asarray(self.fn(zb if zb.ndim == 2 else zb[None]), dtype=float)
        return out if zb.ndim == 2 else out[0]

    def __repr__(self):
        return f"LikelihoodPotential(kind={self.kind!r}, name={self.name!r})"

    @classmethod
    def flat(cls, value: float = 0.0) -> "LikelihoodPotential":
        return cls(lambda z: np.full(len(z), float(value)), kind="flat", name="flat")


def likelihood_step(x, f: LikelihoodPotential, eta: float, n_sweeps: int,
                    rng: np.random.Generator, *, vocab_size: int,
                    proposal: str = "single_site_uniform", coupling: str = "heat_kernel"):
    """Metropolis-Hastings on ``z ∝ exp(-f(z) - c(eta) d(x, z))`` started at ``z = x``.

    A sweep is ``D`` single-site proposals at uniformly chosen positions.
    Proposals whose potential is not finite are rejected.

    Returns
    -------
    z : ndarray, same shape as ``x``
    accept_rate : ndarray of shape ``(B,)`` (a float for a single sequence)
    """
    c = coupling_coefficient(eta, vocab_size, coupling)
    return metropolis_sweeps(x, f, c, n_sweeps, rng, vocab_size=vocab_size, proposal=proposal)


def metropolis_sweeps(x, f: LikelihoodPotential, c: float, n_sweeps: int,
                      rng: np.random.Generator, *, vocab_size: int,
                      proposal: str = "single_site_uniform"):
    """MH on ``exp(-f(z) - c d(x, z))`` from ``z = x``; ``c = 0`` targets ``exp(-f)`` alone."""
    if n_sweeps < 1:
        raise ConfigError("n_sweeps must be >= 1")
    if proposal not in PROPOSALS:
        raise ConfigError(f"unknown proposal {proposal!r}")
    single = np.ndim(x) == 1
    xb = as_batch(x).astype(np.int64)
    B, D = xb.shape
    N = vocab_size
    z = xb.copy()
    fz = np.asarray(f(z.astype(TOKEN_DTYPE)), dtype=float)
    rows = np.arange(B)
    accepted = np.zeros(B)
    n_prop = n_sweeps * D
    if proposal == "single_site_kernel":
        # q(v) ∝ exp(-c [v != x_d]) at the chosen site
        p_keep = 1.0 / (1.0 + (N - 1) * np.exp(-c))
    for _ in range(n_prop):
        pos = rng.integers(0, D, size=B)
        old = z[rows, pos]
        anchor = xb[rows, pos]
        if proposal == "single_site_uniform":
            new = (old + rng.integers(1, N, size=B)) % N
        else:
            keep = rng.random(B) < p_keep
            new = np.where(keep, anchor, (anchor + rng.integers(1, N, size=B)) % N)
        z[rows, pos] = new
        fp = np.asarray(f(z.astype(TOKEN_DTYPE)), dtype=float)
        log_a = -(fp - fz)
        if proposal == "single_site_uniform":
            dd = (new != anchor).astype(float) - (old != anchor)
            log_a = log_a - c * dd
        ok = np.isfinite(fp) & (np.log(rng.random(B)) < log_a)
        ok |= np.isfinite(fp) & (new == old)
        z[rows[~ok], pos[~ok]] = old[~ok]
        fz = np.where(ok, fp, fz)
        accepted += ok
    rate = accepted / n_prop
    z = z.astype(TOKEN_DTYPE)
    if single:
        return z[0], float(rate[0])
    return z, rate


def prior_step(score: ConcreteScoreProvider, z, eta: float, H: int, rng: np.random.Generator,
               *, sigma_floor: float = SIGMA_FLOOR, spacing: str = "geometric") -> np.ndarray:
    """Sample ``x | z`` by treating ``z`` as a diffusion state at noise ``eta`` and denoising."""
    return reverse_euler_sample(score, z, eta, H, rng, sigma_floor=sigma_floor, spacing=spacing)


@dataclass(frozen=True)
class GibbsConfig:
    """Hyperparameters of one SGDD run.

    ``mh_sweeps`` counts full sweeps of ``D`` single-site proposals.  When
    ``fixed_eta`` is set the schedule is constant instead of annealed.
    """

    K: int = 10
    mh_sweeps: int = 5
    euler_steps: int = 20
    eta_min: float = 1e-4
    eta_max: float = 20.0
    fixed_eta: float | None = None
    proposal: str = "single_site_uniform"
    coupling: str = "heat_kernel"
    sigma_floor: float = SIGMA_FLOOR
    spacing: str = "geometric"

    def __post_init__(self):
        if self.K < 1 or self.mh_sweeps < 1 or self.euler_steps < 1:
            raise ConfigError("K, mh_sweeps and euler_steps must be >= 1")
        if self.proposal not in PROPOSALS:
            raise ConfigError(f"unknown proposal {self.proposal!r}")
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"unknown coupling {self.coupling!r}")
        if self.fixed_eta is not None and not self.fixed_eta > 0:
            raise ConfigError("fixed_eta must be positive")
        if not 0 < self.eta_min < self.eta_max:
            raise ConfigError("need 0 < eta_min < eta_max")

    @property
    def annealing(self) -> AnnealingSchedule:
        if self.fixed_eta is not None:
            return AnnealingSchedule.constant(self.K, self.fixed_eta)
        return AnnealingSchedule.geometric(self.K, self.eta_min, self.eta_max)


@dataclass
class GibbsTrace:
    """Per-iteration records for a batch of chains.

    ``f_value`` and ``accept_rate`` have shape ``(K, B)``; ``x`` and ``z`` (when
    recorded) have shape ``(K, B, D)`` with ``x[k]`` the state entering
    iteration ``k``.
    """

    eta: np.ndarray
    f_value: np.ndarray
    accept_rate: np.ndarray
    x: np.ndarray | None = None
    z: np.ndarray | None = None
    final: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.eta)

    @classmethod
    def concat(cls, traces: list["GibbsTrace"]) -> "GibbsTrace":
        def cat(name, axis):
            parts = [getattr(t, name) for t in traces]
            return None if any(p is None for p in parts) else np.concatenate(parts, axis=axis)

        return cls(eta=traces[0].eta, f_value=cat("f_value", 1), accept_rate=cat("accept_rate", 1),
                   x=cat("x", 1), z=cat("z", 1), final=cat("final", 0))

    def rows(self) -> list[dict]:
        return [
            {
                "k": k,
                "eta": float(self.eta[k]),
                "f_value": float(np.mean(self.f_value[k])),
                "f_median": float(np.median(self.f_value[k])),
                "accept_rate": float(np.mean(self.accept_rate[k])),
            }
            for k in range(self.K)
        ]

    def to_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_sgdd(score: ConcreteScoreProvider, f: LikelihoodPotential, cfg: GibbsConfig,
             rng: np.random.Generator, n_chains: int = 1, *, x_init=None,
             record_states: bool = False):
    """Run ``n_chains`` independent SGDD chains.

    Returns the final states ``x^(K)`` with shape ``(n_chains, D)`` and a
    :class:`GibbsTrace`.
    """
    space = StateSpace(score.vocab_size, score.seq_len)
    N = space.vocab_size
    eta = cfg.annealing.eta
    x = space.uniform(n_chains, rng) if x_init is None else as_batch(x_init, space).copy()
    K, B = cfg.K, len(x)
    f_vals = np.empty((K, B))
    rates = np.empty((K, B))
    xs = np.empty((K, B, space.seq_len), dtype=TOKEN_DTYPE) if record_states else None
    zs = np.empty_like(xs) if record_states else None
    for k in range(K):
        if record_states:
            xs[k] = x
        z, rates[k] = likelihood_step(x, f, eta[k], cfg.mh_sweeps, rng, vocab_size=N,
                                      proposal=cfg.proposal, coupling=cfg.coupling)
        f_vals[k] = f(z)
        if record_states:
            zs[k] = z
        x = prior_step(score, z, eta[k], cfg.euler_steps, rng,
                       sigma_floor=cfg.sigma_floor, spacing=cfg.spacing)
    trace = GibbsTrace(eta=np.array(eta), f_value=f_vals, accept_rate=rates, x=xs, z=zs, final=x)
    return x, trace


class SGDD(PosteriorSampler):
    """Split Gibbs discrete diffusion posterior sampler.

    Parameters
    ----------
    K : int
        Outer iterations.
    mh_sweeps : int
        Metropolis-Hastings sweeps per likelihood step.
    euler_steps : int
        Reverse-diffusion Euler steps per prior step.
    eta_min, eta_max : float
        End points of the geometric annealing schedule.
    fixed_eta : float or None
        Use a constant regularisation level instead of annealing.
    proposal : {"single_site_uniform", "single_site_kernel"}
    coupling : {"heat_kernel", "hamming"}
        Per-mismatch coupling strength between ``x`` and ``z``.
    record_states : bool
        Keep every ``x^(k)`` and ``z^(k)`` in ``trace_``.
    random_state, block_size, n_jobs
        See :class:`~sgdd.base.PosteriorSampler`.

    Examples
    --------
    >>> from sgdd.diffusion import TabularPrior
    >>> from sgdd.splitgibbs import SGDD, LikelihoodPotential
    >>> prior = TabularPrior.uniform(2, 4)
    >>> est = SGDD(K=5, random_state=0).fit(prior, LikelihoodPotential.flat())
    >>> est.sample(3).shape
    (3, 4)
    """

    def __init__(self, K=10, mh_sweeps=5, euler_steps=20, eta_min=1e-4, eta_max=20.0,
                 fixed_eta=None, proposal="single_site_uniform", coupling="heat_kernel",
                 sigma_floor=SIGMA_FLOOR, spacing="geometric", record_states=False,
                 random_state=0, block_size=1000, n_jobs=1):
        self.K = K
        self.mh_sweeps = mh_sweeps
        self.euler_steps = euler_steps
        self.eta_min = eta_min
        self.eta_max = eta_max
        self.fixed_eta = fixed_eta
        self.proposal = proposal
        self.coupling = coupling
        self.sigma_floor = sigma_floor
        self.spacing = spacing
        self.record_states = record_states
        self.random_state = random_state
        self.block_size = block_size
        self.n_jobs = n_jobs

    def config(self) -> GibbsConfig:
        return GibbsConfig(K=self.K, mh_sweeps=self.mh_sweeps, euler_steps=self.euler_steps,
                           eta_min=self.eta_min, eta_max=self.eta_max, fixed_eta=self.fixed_eta,
                           proposal=self.proposal, coupling=self.coupling,
                           sigma_floor=self.sigma_floor, spacing=self.spacing)

    def _validate_params_values(self):
        super()._validate_params_values()
        self.config()

    def _sample_block(self, n, rng):
        x, trace = run_sgdd(self.score_, self.likelihood_, self.config(), rng, n,
                            record_states=self.record_states)
        return x, trace

    def _collect(self, infos):
        self.trace_ = GibbsTrace.concat(infos)

    def nfe(self):
        return self.K * self.euler_steps, self.K * self.euler_steps
