"""Estimator base class shared by SGDD and the baseline samplers."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .statespace import DimensionError, DomainError, StateSpace, make_rng


def check_score_provider(score) -> StateSpace:
    for attr in ("vocab_size", "seq_len", "ratios"):
        if not hasattr(score, attr):
            raise TypeError(f"score provider is missing {attr!r}")
    return StateSpace(int(score.vocab_size), int(score.seq_len))


def check_likelihood(likelihood) -> None:
    if not callable(likelihood):
        raise TypeError("likelihood must be callable on a (B, D) token batch")


class PosteriorSampler(BaseEstimator):
    """Draws approximate samples from ``p0(x) exp(-f(x))``.

    ``fit(prior, likelihood)`` binds the problem; ``sample(n_samples)`` draws
    independent chains.  Chains are split into blocks of ``block_size``; block
    ``b`` uses the generator ``make_rng(random_state, b)``, so the output only
    depends on ``random_state`` and ``block_size``, never on ``n_jobs``.
    """

    def fit(self, prior, likelihood):
        self.space_ = check_score_provider(prior)
        check_likelihood(likelihood)
        self._validate_params_values()
        self.score_ = prior
        self.likelihood_ = likelihood
        return self

    def _validate_params_values(self) -> None:
        if self.block_size < 1:
            raise DomainError("block_size must be >= 1")
        if self.n_jobs < 1:
            raise DomainError("n_jobs must be >= 1")

    def sample(self, n_samples: int = 1) -> np.ndarray:
        check_is_fitted(self, "score_")
        if n_samples < 1:
            raise DomainError("n_samples must be >= 1")
        sizes = [self.block_size] * (n_samples // self.block_size)
        if n_samples % self.block_size:
            sizes.append(n_samples % self.block_size)

        def work(args):
            b, n = args
            return self._sample_block(n, make_rng(self.random_state, b))

        jobs = list(enumerate(sizes))
        if self.n_jobs == 1 or len(jobs) == 1:
            results = [work(j) for j in jobs]
        else:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                results = list(pool.map(work, jobs))
        samples = np.concatenate([r[0] for r in results], axis=0)
        if samples.shape[1] != self.space_.seq_len:
            raise DimensionError("sampler returned sequences of the wrong length")
        self._collect([r[1] for r in results])
        return samples

    def _collect(self, infos: list) -> None:
        self.block_info_ = infos

    def _sample_block(self, n: int, rng: np.random.Generator):
        raise NotImplementedError

    def nfe(self) -> tuple[int, int]:
        """Score evaluations per returned sample as ``(total, sequential)``."""
        raise NotImplementedError
