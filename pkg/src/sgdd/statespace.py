"""State spaces, token arrays, noise schedules and per-stream random generators.

Token sequences are stored as integer numpy arrays of shape ``(D,)`` or, for a
batch of independent chains, ``(B, D)``.  Every sampler in the package works
on batches; single sequences are promoted with :func:`as_batch`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOKEN_DTYPE = np.uint16
MAX_VOCAB = 2**16
DEFAULT_ENUMERATION_BUDGET = 2**24


class DimensionError(ValueError):
    """Sequences of mismatched length or vocabulary."""


class DomainError(ValueError):
    """An argument outside the mathematical domain of an operation."""


class BudgetError(RuntimeError):
    """An enumeration or compute budget would be exceeded."""


@dataclass(frozen=True)
class StateSpace:
    vocab_size: int
    seq_len: int

    def __post_init__(self):
        if not 2 <= self.vocab_size <= MAX_VOCAB:
            raise DomainError(f"vocab_size must lie in [2, {MAX_VOCAB}], got {self.vocab_size}")
        if self.seq_len < 1:
            raise DomainError(f"seq_len must be >= 1, got {self.seq_len}")

    @property
    def log_num_states(self) -> float:
        return self.seq_len * np.log(self.vocab_size)

    def num_states(self, budget: int = DEFAULT_ENUMERATION_BUDGET) -> int:
        """Exact state count ``N**D``; raises if it exceeds ``budget``."""
        if self.log_num_states > np.log(budget) + 1e-9:
            raise BudgetError(
                f"{self.vocab_size}^{self.seq_len} states exceed the enumeration budget {budget}"
            )
        return int(self.vocab_size) ** int(self.seq_len)

    def enumerate(self, budget: int = DEFAULT_ENUMERATION_BUDGET) -> np.ndarray:
        """All states in row-major (C) order, shape ``(N**D, D)``."""
        n = self.num_states(budget)
        idx = np.arange(n)
        return np.stack(np.unravel_index(idx, (self.vocab_size,) * self.seq_len), axis=1).astype(
            TOKEN_DTYPE
        )

    def ravel(self, x) -> np.ndarray:
        """Flat row-major index of each state in a batch."""
        x = as_batch(x, self)
        return np.ravel_multi_index(tuple(x.T.astype(np.int64)), (self.vocab_size,) * self.seq_len)

    def uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.vocab_size, size=(n, self.seq_len)).astype(TOKEN_DTYPE)


def check_tokens(x, space: StateSpace | None = None) -> np.ndarray:
    """Validate a sequence or batch of sequences and return it as a token array."""
    arr = np.asarray(x)
    if arr.ndim not in (1, 2):
        raise DimensionError(f"expected a (D,) or (B, D) token array, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise DomainError("tokens must be integers")
    if arr.size and arr.min() < 0:
        raise DomainError("tokens must be non-negative")
    if space is not None:
        if arr.shape[-1] != space.seq_len:
            raise DimensionError(f"expected length {space.seq_len}, got {arr.shape[-1]}")
        if arr.size and arr.max() >= space.vocab_size:
            raise DomainError(f"token {int(arr.max())} outside vocabulary of size {space.vocab_size}")
    return arr.astype(TOKEN_DTYPE, copy=False)


def as_batch(x, space: StateSpace | None = None) -> np.ndarray:
    arr = check_tokens(x, space)
    return arr[None, :] if arr.ndim == 1 else arr


def hamming_distance(a, b) -> np.ndarray | int:
    """Number of positions at which two sequences differ.

    Broadcasts over leading batch dimensions; returns a plain ``int`` for two
    single sequences.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    d = np.count_nonzero(a != b, axis=-1)
    return int(d) if np.ndim(d) == 0 else d


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric noise level ``sigma(t) = sigma_min**(1-t) * sigma_max**t`` on ``t in [0, 1]``."""

    sigma_min: float = 1e-4
    sigma_max: float = 20.0
    kind: str = "geometric"

    def __post_init__(self):
        if self.kind != "geometric":
            raise DomainError(f"unsupported schedule kind {self.kind!r}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise DomainError("need 0 < sigma_min < sigma_max")

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        if np.any((t_arr < 0) | (t_arr > 1)) or np.any(~np.isfinite(t_arr)):
            raise DomainError("t must lie in [0, 1]")
        out = np.exp((1 - t_arr) * np.log(self.sigma_min) + t_arr * np.log(self.sigma_max))
        return float(out) if out.ndim == 0 else out


def schedule_eval(schedule: NoiseSchedule, t):
    return schedule(t)


@dataclass(frozen=True)
class AnnealingSchedule:
    """Decreasing regularisation levels ``eta_k = eta_min**(k/K) * eta_max**(1-k/K)``."""

    eta: np.ndarray
    eta_min: float
    eta_max: float

    @classmethod
    def geometric(cls, K: int, eta_min: float = 1e-4, eta_max: float = 20.0) -> "AnnealingSchedule":
        if K < 1:
            raise DomainError("K must be >= 1")
        if not 0 < eta_min < eta_max:
            raise DomainError("need 0 < eta_min < eta_max")
        k = np.arange(K) / K
        eta = np.exp(k * np.log(eta_min) + (1 - k) * np.log(eta_max))
        eta.setflags(write=False)
        return cls(eta=eta, eta_min=float(eta_min), eta_max=float(eta_max))

    @classmethod
    def constant(cls, K: int, eta: float) -> "AnnealingSchedule":
        if K < 1 or eta <= 0:
            raise DomainError("need K >= 1 and eta > 0")
        arr = np.full(K, float(eta))
        arr.setflags(write=False)
        return cls(eta=arr, eta_min=float(eta), eta_max=float(eta))

    def __len__(self):
        return len(self.eta)


def make_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream_id)``.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys, so
    equal pairs give bit-identical draws and distinct ids are independent.
    """
    if seed < 0 or stream_id < 0:
        raise DomainError("seed and stream_id must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))
