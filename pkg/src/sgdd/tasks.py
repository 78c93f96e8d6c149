"""Priors, forward models, rewards and serialisable task instances."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import TabularPrior
from .splitgibbs import LikelihoodPotential
from .statespace import TOKEN_DTYPE, DimensionError, DomainError, StateSpace, as_batch, make_rng

TASK_KINDS = ("synthetic", "xor", "and", "inpaint", "reward")
BETA_FLOOR = 1e-9


def discretized_gaussian_prior(N: int = 50, D: int = 2, sigma_prior: float = 1.0,
                               width: float = 3.0) -> tuple[TabularPrior, np.ndarray]:
    """Factorized prior from a Gaussian evaluated on ``N`` equally spaced points.

    Returns the prior and the grid of coordinates on ``[-width*sigma, width*sigma]``.
    """
    if N < 2 or D < 1 or sigma_prior <= 0:
        raise DomainError("need N >= 2, D >= 1 and sigma_prior > 0")
    grid = np.linspace(-width * sigma_prior, width * sigma_prior, N)
    pmf = np.exp(-0.5 * (grid / sigma_prior) ** 2)
    pmf /= pmf.sum()
    # exact mirror symmetry regardless of rounding in linspace
    pmf = 0.5 * (pmf + pmf[::-1])
    pmf /= pmf.sum()
    return TabularPrior("factorized", np.tile(pmf, (D, 1))), grid


def binary_mixture_prior(D: int, n_components: int = 4, flip: float = 0.1,
                         rng: np.random.Generator | None = None) -> TabularPrior:
    """Joint binary prior: a mixture of product-Bernoulli components around random prototypes."""
    rng = rng or make_rng(0)
    StateSpace(2, D).num_states()
    protos = rng.integers(0, 2, size=(n_components, D))
    weights = rng.dirichlet(np.full(n_components, 5.0))
    table = np.zeros((2,) * D)
    for w, proto in zip(weights, protos):
        comp = np.ones(())
        for bit in proto:
            comp = np.multiply.outer(comp, np.array([1 - flip, flip]) if bit == 0
                                     else np.array([flip, 1 - flip]))
        table += w * comp
    return TabularPrior("joint", table / table.sum())


@dataclass(frozen=True)
class ForwardModel:
    """Measurement operator.

    ``l1_sum`` maps a sequence to ``sum_d |values[x_d]|``; ``xor_pairs`` and
    ``and_pairs`` return one bit per position pair; ``mask`` keeps the tokens at
    ``keep``.
    """

    kind: str
    values: np.ndarray | None = None
    lattice_step: float | None = None
    pairs: np.ndarray | None = None
    keep: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "l1_sum":
            if self.values is None:
                raise DomainError("l1_sum needs a value map")
        elif self.kind in ("xor_pairs", "and_pairs"):
            if self.pairs is None or np.ndim(self.pairs) != 2 or np.shape(self.pairs)[1] != 2:
                raise DomainError("pair models need a (P, 2) pair array")
        elif self.kind == "mask":
            if self.keep is None or len(set(np.asarray(self.keep).tolist())) != len(self.keep):
                raise DomainError("mask indices must be distinct")
        else:
            raise DomainError(f"unknown forward model {self.kind!r}")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.values is not None:
            out["values"] = np.asarray(self.values).tolist()
        if self.lattice_step is not None:
            out["lattice_step"] = self.lattice_step
        if self.pairs is not None:
            out["pairs"] = np.asarray(self.pairs).tolist()
        if self.keep is not None:
            out["keep"] = np.asarray(self.keep).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ForwardModel":
        return cls(
            kind=data["kind"],
            values=None if "values" not in data else np.asarray(data["values"], dtype=float),
            lattice_step=data.get("lattice_step"),
            pairs=None if "pairs" not in data else np.asarray(data["pairs"], dtype=np.int64),
            keep=None if "keep" not in data else np.asarray(data["keep"], dtype=np.int64),
        )


def random_pairs(D: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """``floor(gamma * D)`` pairs of distinct positions."""
    P = int(np.floor(gamma * D))
    if P < 1:
        raise DomainError("gamma * D must be at least 1")
    if D < 2:
        raise DomainError("pairs need D >= 2")
    return np.array([rng.choice(D, size=2, replace=False) for _ in range(P)], dtype=np.int64)


def apply_forward(model: ForwardModel, x) -> np.ndarray:
    """Noise-free measurement ``G(x)`` for a sequence or a batch."""
    single = np.ndim(x) == 1
    xb = as_batch(x).astype(np.intp)
    if model.kind == "l1_sum":
        values = np.asarray(model.values, dtype=float)
        if xb.size and xb.max() >= len(values):
            raise DomainError("token outside the value map")
        out = np.abs(values[xb]).sum(axis=1)
    elif model.kind in ("xor_pairs", "and_pairs"):
        if xb.size and xb.max() > 1:
            raise DomainError("logical forward models need binary tokens")
        a = xb[:, model.pairs[:, 0]]
        b = xb[:, model.pairs[:, 1]]
        out = (a ^ b) if model.kind == "xor_pairs" else (a & b)
        out = out.astype(np.uint8)
    else:
        out = xb[:, model.keep].astype(TOKEN_DTYPE)
    return out[0] if single else out


def make_likelihood(model: ForwardModel, y, sigma_y: float = 0.1) -> LikelihoodPotential:
    """``f(z) = ||G(z) - y|| / sigma_y`` with ``|.|`` for scalars and the mismatch count for vectors."""
    if sigma_y <= 0:
        raise DomainError("sigma_y must be positive")
    if model.kind == "l1_sum":
        if np.ndim(y) != 0:
            raise DimensionError("l1_sum measurements are scalars")
        y_val = float(y)

        def fn(z):
            return np.abs(apply_forward(model, z) - y_val) / sigma_y
    else:
        y_arr = np.asarray(y)
        expected = len(model.pairs) if model.pairs is not None else len(model.keep)
        if y_arr.shape != (expected,):
            raise DimensionError(f"measurement must have shape ({expected},), got {y_arr.shape}")

        def fn(z):
            return np.count_nonzero(apply_forward(model, z) != y_arr[None, :], axis=1) / sigma_y

    return LikelihoodPotential(fn, kind="inverse_problem", sigma_y=sigma_y, name=model.kind)


@dataclass(frozen=True)
class RewardFunction:
    """Bounded reward on token sequences.

    ``linear_token_score`` counts positions holding ``target``;
    ``motif_count`` counts (possibly overlapping) occurrences of ``motif``.
    """

    kind: str = "linear_token_score"
    target: int = 1
    motif: tuple = ()

    def __post_init__(self):
        if self.kind not in ("linear_token_score", "motif_count"):
            raise DomainError(f"unknown reward {self.kind!r}")
        if self.kind == "motif_count" and not self.motif:
            raise DomainError("motif_count needs a non-empty motif")

    def __call__(self, x) -> np.ndarray:
        single = np.ndim(x) == 1
        xb = as_batch(x).astype(np.int64)
        if self.kind == "linear_token_score":
            out = (xb == self.target).sum(axis=1).astype(float)
        else:
            L = len(self.motif)
            D = xb.shape[1]
            if L > D:
                out = np.zeros(len(xb))
            else:
                windows = np.lib.stride_tricks.sliding_window_view(xb, L, axis=1)
                out = np.all(windows == np.asarray(self.motif), axis=-1).sum(axis=1).astype(float)
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "target": self.target, "motif": list(self.motif)}

    @classmethod
    def from_dict(cls, data: dict) -> "RewardFunction":
        return cls(kind=data["kind"], target=data.get("target", 1), motif=tuple(data.get("motif", ())))


def make_reward_likelihood(r: RewardFunction, beta: float) -> LikelihoodPotential:
    """``f(z) = -beta * r(z)``, i.e. ``p(y | z) ∝ exp(beta r(z))``."""
    if beta <= 0:
        raise DomainError("beta must be positive (use the 1e-9 floor for a flat limit)")
    beta = max(float(beta), BETA_FLOOR)
    return LikelihoodPotential(lambda z: -beta * r(z), kind="reward", beta=beta, name=r.kind)


@dataclass(frozen=True)
class Task:
    """A complete posterior sampling problem, serialisable to JSON."""

    kind: str
    N: int
    D: int
    seed: int
    prior: TabularPrior
    model: ForwardModel | None = None
    y: object = None
    sigma_y: float | None = None
    reward: RewardFunction | None = None
    beta: float | None = None
    x_true: np.ndarray | None = None
    parameters: dict = field(default_factory=dict)

    @property
    def space(self) -> StateSpace:
        return StateSpace(self.N, self.D)

    def likelihood(self) -> LikelihoodPotential:
        if self.kind == "reward":
            return make_reward_likelihood(self.reward, self.beta)
        return make_likelihood(self.model, self.y, self.sigma_y)

    def to_dict(self) -> dict:
        y = self.y
        if y is not None:
            y = float(y) if np.ndim(y) == 0 else np.asarray(y).tolist()
        return {
            "kind": self.kind,
            "N": self.N,
            "D": self.D,
            "seed": self.seed,
            "parameters": dict(self.parameters),
            "prior": self.prior.to_dict(),
            "model": None if self.model is None else self.model.to_dict(),
            "y": y,
            "sigma_y": self.sigma_y,
            "reward": None if self.reward is None else self.reward.to_dict(),
            "beta": self.beta,
            "x_true": None if self.x_true is None else np.asarray(self.x_true).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Task":
        kind = data["kind"]
        if kind not in TASK_KINDS:
            raise DomainError(f"unknown task kind {kind!r}")
        y = data.get("y")
        if y is not None and not np.isscalar(y):
            y = np.asarray(y)
        return cls(
            kind=kind,
            N=int(data["N"]),
            D=int(data["D"]),
            seed=int(data["seed"]),
            prior=TabularPrior.from_dict(data["prior"]),
            model=None if data.get("model") is None else ForwardModel.from_dict(data["model"]),
            y=y,
            sigma_y=data.get("sigma_y"),
            reward=None if data.get("reward") is None else RewardFunction.from_dict(data["reward"]),
            beta=data.get("beta"),
            x_true=None if data.get("x_true") is None else np.asarray(data["x_true"], dtype=TOKEN_DTYPE),
            parameters=dict(data.get("parameters", {})),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def task_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "Task":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_task(kind: str, N: int, D: int, seed: int = 0, *, sigma_y: float | None = None,
              gamma: float = 2.0, beta: float = 1.0, sigma_prior: float = 1.0,
              n_components: int = 4, flip: float = 0.1, keep_fraction: float = 0.5,
              reward_kind: str = "linear_token_score", target: int = 1,
              motif: tuple = ()) -> Task:
    """Build a task instance; all randomness comes from ``make_rng(seed)``.

    ``synthetic`` uses a discretized Gaussian prior with an ``l1_sum`` model;
    ``xor``/``and``/``inpaint`` use a binary mixture prior; ``reward`` uses a
    uniform prior with a synthetic reward.
    """
    if kind not in TASK_KINDS:
        raise DomainError(f"unknown task kind {kind!r}")
    rng = make_rng(seed)
    StateSpace(N, D)
    params: dict = {}
    if kind == "synthetic":
        prior, grid = discretized_gaussian_prior(N, D, sigma_prior)
        model = ForwardModel("l1_sum", values=grid, lattice_step=float(grid[1] - grid[0]))
        x_true = prior.sample(1, rng)[0]
        sigma_y = 0.25 if sigma_y is None else sigma_y
        params = {"sigma_prior": sigma_prior}
        y = float(apply_forward(model, x_true))
        return Task(kind, N, D, seed, prior, model=model, y=y, sigma_y=sigma_y, x_true=x_true,
                    parameters=params)
    if kind in ("xor", "and", "inpaint"):
        if N != 2:
            raise DomainError(f"{kind} tasks are binary (N = 2)")
        prior = binary_mixture_prior(D, n_components, flip, rng)
        if kind == "inpaint":
            n_keep = max(1, int(round(keep_fraction * D)))
            model = ForwardModel("mask", keep=np.sort(rng.choice(D, size=n_keep, replace=False)))
            params = {"keep_fraction": keep_fraction}
        else:
            model = ForwardModel(f"{kind}_pairs", pairs=random_pairs(D, gamma, rng))
            params = {"gamma": gamma}
        params.update(n_components=n_components, flip=flip)
        x_true = prior.sample(1, rng)[0]
        y = apply_forward(model, x_true)
        sigma_y = 0.1 if sigma_y is None else sigma_y
        return Task(kind, N, D, seed, prior, model=model, y=y, sigma_y=sigma_y, x_true=x_true,
                    parameters=params)
    reward = RewardFunction(reward_kind, target=target, motif=tuple(motif))
    prior = TabularPrior.uniform(N, D)
    return Task(kind, N, D, seed, prior, reward=reward, beta=float(beta),
                parameters={"reward_kind": reward_kind})
