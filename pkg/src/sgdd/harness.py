"""Command line entry point, experiment configuration and run artifacts.

Subcommands: ``make-task``, ``run``, ``ablate-schedule``, ``ablate-nfe``,
``verify-theory`` and ``report``.  Configs are flat JSON objects; unknown keys
are rejected before any compute starts.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import platform
import sys
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    augmented_joint,
    augmented_marginal_x,
    augmented_sweep_kernel,
    empirical_pmf,
    exact_posterior_enumerate,
    exact_posterior_marginal_dp,
    hellinger,
    kl_divergence,
    mh_transition_matrix,
    psnr_binary,
    psnr_pooled,
    random_rate_matrix,
    total_variation,
    verify_kl_decay_identity,
    verify_mh_dpi,
)
from .baselines import SMC, SVDDPM, DiscreteDPS, MCMCNoPrior
from .diffusion import TabularPrior
from .splitgibbs import SGDD, ConfigError, coupling_coefficient
from .statespace import BudgetError, StateSpace, hamming_distance, make_rng
from .tasks import TASK_KINDS, Task, make_task

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_VERIFY = 0, 2, 3, 4
ORACLE_BUDGET = 2**22
METHODS = {
    "sgdd": SGDD,
    "svdd_pm": SVDDPM,
    "smc": SMC,
    "dps": DiscreteDPS,
    "mcmc_no_prior": MCMCNoPrior,
}
RUN_KEYS = {"task", "method", "n_samples", "seed", "threads", "out"}
NFE_CONFIGS = ((25, 2), (25, 4), (40, 5), (40, 10), (50, 20), (100, 20))
METRIC_TOL = 1e-12


class VerificationError(AssertionError):
    pass


# -- configuration ---------------------------------------------------------

def method_params(method: str) -> dict:
    """Tunable hyperparameters of ``method`` with their defaults."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    params = METHODS[method]().get_params()
    for key in ("random_state", "n_jobs"):
        params.pop(key)
    return params


@dataclass
class ExperimentConfig:
    task: str
    method: str = "sgdd"
    n_samples: int = 10000
    seed: int = 0
    threads: int = 1
    out: str = "run"
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "task" not in data:
            raise ConfigError("config needs a 'task' file")
        method = data.get("method", "sgdd")
        allowed = method_params(method)
        unknown = set(data) - RUN_KEYS - set(allowed)
        if unknown:
            raise ConfigError(f"unknown config keys for {method}: {sorted(unknown)}")
        params = {k: data.pop(k) for k in list(data) if k in allowed}
        cfg = cls(**data, params=params)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("n_samples", "threads"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        self.estimator()._validate_params_values()

    def estimator(self):
        est = METHODS[self.method](random_state=self.seed, n_jobs=self.threads)
        try:
            est.set_params(**self.params)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if isinstance(est, SGDD):
            est.config()
        return est

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in sorted(RUN_KEYS)}
        full = method_params(self.method)
        full.update(self.params)
        out.update(full)
        return out


def load_json_config(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a flat JSON object")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"config key {k!r} is nested; configs are flat")
    return data


# -- artifacts -------------------------------------------------------------

def write_atomic(path, text: str) -> None:
    """Write via a temporary file in the same directory followed by ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def samples_csv(samples: np.ndarray, task_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# task_hash={task_hash}\n")
    header = ",".join(f"x{d}" for d in range(samples.shape[1]))
    np.savetxt(buf, samples, fmt="%d", delimiter=",", header=header, comments="")
    return buf.getvalue()


def read_samples_csv(path) -> np.ndarray:
    x = np.loadtxt(path, delimiter=",", skiprows=2, dtype=np.int64, ndmin=2)
    return x.astype(np.uint16)


def rows_csv(rows: list[dict], task_hash: str | None = None) -> str:
    buf = io.StringIO()
    if task_hash is not None:
        buf.write(f"# task_hash={task_hash}\n")
    if not rows:
        return buf.getvalue()
    cols = list(rows[0])
    buf.write(",".join(cols) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(row[c]) for c in cols) + "\n")
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def fingerprint() -> dict:
    return {"package": __version__, "python": platform.python_version(), "numpy": np.__version__}


# -- metrics ---------------------------------------------------------------

def metric_dims(task: Task) -> tuple:
    return (0, 1) if task.D >= 2 else (0,)


def oracle_marginal(task: Task):
    """Exact posterior marginal on the first two positions, or ``None`` if infeasible."""
    dims = metric_dims(task)
    if task.kind == "synthetic" and task.D >= 2:
        return exact_posterior_marginal_dp(task.prior, task.model, task.y, task.sigma_y, dims)
    if task.N ** task.D <= ORACLE_BUDGET:
        return exact_posterior_enumerate(task.prior, task.likelihood(), ORACLE_BUDGET).marginal(dims)
    return None


def compute_metrics(task: Task, samples: np.ndarray, *, oracle=None) -> dict:
    """Oracle distances plus PSNR (binary inverse problems) and mean reward (reward tasks)."""
    out = {"task_hash": task.task_hash, "n_samples": int(len(samples))}
    ref = oracle_marginal(task) if oracle is None else oracle
    if ref is None:
        warnings.warn("no exact oracle at this size; reporting oracle-free metrics only")
        out["hellinger"] = out["tv"] = None
    else:
        emp = empirical_pmf(samples, task.N, metric_dims(task))
        out["hellinger"] = hellinger(emp, ref)
        out["tv"] = total_variation(emp, ref)
    if task.N == 2 and task.kind != "reward" and task.x_true is not None:
        out["psnr"] = float(np.mean(psnr_binary(samples, task.x_true)))
    if task.kind == "reward":
        out["mean_reward"] = float(np.mean(task.reward(samples)))
    return out


def _trace_rows(est) -> list[dict]:
    if isinstance(est, SGDD):
        return est.trace_.rows()
    if isinstance(est, SMC):
        return [{"run": i, "degenerate": int(d), "n_resample": int(r)}
                for i, (d, r) in enumerate(zip(est.degenerate_, est.n_resample_))]
    if isinstance(est, MCMCNoPrior):
        return [{"run": i, "accept_rate": float(a)} for i, a in enumerate(est.accept_rate_)]
    return []


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Sample, score and write ``samples.csv``, ``trace.csv``, ``config.echo`` and ``metrics.json``."""
    task = Task.load(cfg.task)
    est = cfg.estimator()
    t0 = time.perf_counter()
    est.fit(task.prior, task.likelihood())
    samples = est.sample(cfg.n_samples)
    runtime = time.perf_counter() - t0
    nfe_total, nfe_seq = est.nfe()
    metrics = {"method": cfg.method}
    metrics.update(compute_metrics(task, samples))
    metrics.update(runtime_s=runtime, nfe_total=int(nfe_total), nfe_sequential=int(nfe_seq))
    out = Path(cfg.out)
    write_atomic(out / "samples.csv", samples_csv(samples, task.task_hash))
    write_atomic(out / "trace.csv", rows_csv(_trace_rows(est), task.task_hash))
    echo = cfg.to_dict()
    echo.update(task_hash=task.task_hash, fingerprint=fingerprint())
    write_atomic(out / "config.echo", json.dumps(echo, indent=2, sort_keys=True) + "\n")
    write_atomic(out / "metrics.json", json.dumps(metrics, indent=2) + "\n")
    return metrics


def load_run(run_dir) -> tuple[dict, dict, np.ndarray]:
    run_dir = Path(run_dir)
    with open(run_dir / "metrics.json") as fh:
        metrics = json.load(fh)
    with open(run_dir / "config.echo") as fh:
        echo = json.load(fh)
    return metrics, echo, read_samples_csv(run_dir / "samples.csv")


def build_report(run_dirs, task_path=None) -> list[dict]:
    """Reload runs, check they share one task, and recompute every stored metric."""
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise ConfigError("report needs at least one run directory")
    hashes = {m["task_hash"] for m, _, _ in runs}
    if len(hashes) != 1:
        raise ConfigError(f"refusing to aggregate runs on different tasks: {sorted(hashes)}")
    task = Task.load(task_path or runs[0][1]["task"])
    if task.task_hash not in hashes:
        raise ConfigError("task file does not match the runs' task hash")
    ref = oracle_marginal(task)
    rows = []
    for d, (metrics, _, samples) in zip(run_dirs, runs):
        fresh = compute_metrics(task, samples, oracle=ref)
        for key, val in fresh.items():
            stored = metrics.get(key)
            if isinstance(val, float):
                if stored is None or abs(stored - val) > METRIC_TOL:
                    raise VerificationError(f"{d}: {key} stored {stored} recomputed {val}")
            elif stored != val:
                raise VerificationError(f"{d}: {key} stored {stored} recomputed {val}")
        rows.append({"run": str(d), **{k: metrics[k] for k in metrics if k != "task_hash"}})
    return rows


# -- ablations -------------------------------------------------------------

ABLATE_SCHEDULE_KEYS = {"task", "K", "mh_sweeps", "euler_steps", "etas", "seeds", "n_samples",
                        "threads", "out", "eta_min", "eta_max"}
ABLATE_NFE_KEYS = {"task", "configs", "mh_sweeps", "seeds", "n_samples", "threads", "out"}


def _check_keys(data: dict, allowed: set) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "task" not in data:
        raise ConfigError("config needs a 'task' file")


def _quality(task: Task, samples: np.ndarray, ref) -> dict:
    row = {}
    if ref is not None:
        emp = empirical_pmf(samples, task.N, metric_dims(task))
        row["hellinger"] = hellinger(emp, ref)
    if task.N == 2 and task.x_true is not None:
        row["psnr"] = psnr_pooled(samples, task.x_true)
    return row


def ablate_schedule(data: dict) -> list[dict]:
    """Per-iteration quality of SGDD with the annealed schedule and with each fixed eta."""
    _check_keys(data, ABLATE_SCHEDULE_KEYS)
    task = Task.load(data["task"])
    K = data.get("K", 10)
    etas = data.get("etas", [0.5, 0.1, 1e-3])
    seeds = data.get("seeds", [0])
    base = dict(K=K, mh_sweeps=data.get("mh_sweeps", 5), euler_steps=data.get("euler_steps", 20),
                eta_min=data.get("eta_min", 1e-4), eta_max=data.get("eta_max", 20.0),
                record_states=True, n_jobs=data.get("threads", 1))
    ref = oracle_marginal(task)
    rows = []
    for label, fixed in [("annealed", None)] + [(f"fixed_{e:g}", float(e)) for e in etas]:
        for seed in seeds:
            est = SGDD(fixed_eta=fixed, random_state=seed, **base).fit(task.prior, task.likelihood())
            est.sample(data.get("n_samples", 2000))
            tr = est.trace_
            for k in range(K):
                after = tr.x[k + 1] if k + 1 < K else tr.final
                rows.append({"schedule": label, "seed": seed, "k": k, "eta": float(tr.eta[k]),
                             **_quality(task, after, ref)})
    return rows


def ablate_nfe(data: dict) -> list[dict]:
    """Final quality of SGDD across ``(K, H)`` budgets; NFE per sample is ``K * H``."""
    _check_keys(data, ABLATE_NFE_KEYS)
    task = Task.load(data["task"])
    configs = [tuple(c) for c in data.get("configs", NFE_CONFIGS)]
    seeds = data.get("seeds", [0])
    ref = oracle_marginal(task)
    rows = []
    for K, H in configs:
        for seed in seeds:
            est = SGDD(K=K, euler_steps=H, mh_sweeps=data.get("mh_sweeps", 5), random_state=seed,
                       n_jobs=data.get("threads", 1))
            t0 = time.perf_counter()
            x = est.fit(task.prior, task.likelihood()).sample(data.get("n_samples", 2000))
            total, seq = est.nfe()
            rows.append({"config": f"SGDD-{total}", "K": K, "H": H, "nfe_total": total,
                         "nfe_sequential": seq, "seed": seed,
                         "runtime_s": time.perf_counter() - t0, **_quality(task, x, ref)})
    return rows


# -- theory battery --------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (threshold {self.threshold:.1e})"


def _random_binary_problem(D: int, rng) -> tuple[TabularPrior, object]:
    table = rng.dirichlet(np.ones(2**D)).reshape((2,) * D)
    prior = TabularPrior("joint", table)
    fvals = rng.normal(scale=1.5, size=2**D)
    strides = 2 ** np.arange(D - 1, -1, -1)

    def f(z):
        return fvals[np.asarray(z, dtype=np.int64) @ strides]

    return prior, f


def theory_battery(seed: int = 0, inject_bug: bool = False) -> list[Check]:
    """Exact checks of MH invariance, data processing, the KL decay identity and the eta -> 0 limit.

    ``inject_bug`` inverts the MH acceptance ratio; invariance and
    stationary-distance checks must then fail.
    """
    rng = make_rng(seed)
    checks = []

    worst = 0.0
    for D in (2, 3, 4):
        space = StateSpace(2, D)
        states = space.enumerate()
        for _ in range(5):
            fvals = rng.normal(scale=2.0, size=len(states))
            x = states[rng.integers(len(states))]
            eta = float(np.exp(rng.uniform(np.log(1e-2), np.log(5.0))))
            lt = -fvals - coupling_coefficient(eta, 2) * hamming_distance(states, x)
            pi = np.exp(lt - lt.max())
            pi /= pi.sum()
            T = mh_transition_matrix(lt, space, invert_acceptance=inject_bug)
            worst = max(worst, np.abs(pi @ T - pi).sum())
    checks.append(Check("mh_exact_invariance", worst <= 1e-12, worst, 1e-12))

    space = StateSpace(2, 4)
    states = space.enumerate()
    dpi_excess = -np.inf
    stat_excess = -np.inf
    for _ in range(100):
        lt = rng.normal(scale=2.0, size=16)
        target = np.exp(lt - lt.max())
        target /= target.sum()
        T = mh_transition_matrix(lt, space, invert_acceptance=inject_bug)
        pi = rng.dirichlet(np.ones(16))
        mu = rng.dirichlet(np.ones(16))
        before, after = verify_mh_dpi(pi, mu, T)
        dpi_excess = max(dpi_excess, after - before)
        # distance to the MH target itself may not grow
        before, after = kl_divergence(mu, target), kl_divergence(mu @ T, target)
        stat_excess = max(stat_excess, after - before)
    checks.append(Check("dpi_random_pairs", dpi_excess <= 1e-12, dpi_excess, 1e-12))
    checks.append(Check("dpi_towards_target", stat_excess <= 1e-12, stat_excess, 1e-12))

    prior, f = _random_binary_problem(2, rng)
    K = augmented_sweep_kernel(prior, f, 0.3, sweeps=1, invert_acceptance=inject_bug)
    joint = augmented_joint(prior, f, 0.3).ravel()
    err = float(np.abs(joint @ K - joint).sum())
    checks.append(Check("augmented_sweep_stationarity", err <= 1e-10, err, 1e-10))

    Q = random_rate_matrix(4, rng)
    Qt = random_rate_matrix(4, rng)
    pi0 = rng.dirichlet(np.ones(4))
    mu0 = rng.dirichlet(np.ones(4))
    grid = [0.2, 0.5, 1.0]
    r1 = verify_kl_decay_identity(Q, Qt, pi0, mu0, grid, dt=1e-2)
    r2 = verify_kl_decay_identity(Q, Qt, pi0, mu0, grid, dt=5e-3)
    ratio = r1 / r2
    checks.append(Check("kl_decay_second_order_ratio", 3.5 <= ratio <= 4.5, ratio, 3.5))
    r_same = verify_kl_decay_identity(Q, Q, pi0, mu0, grid, dt=1e-4)
    checks.append(Check("kl_decay_matched_generators", r_same <= 1e-6, r_same, 1e-6))

    prior, f = _random_binary_problem(3, rng)
    post = exact_posterior_enumerate(prior, f)
    tvs = [total_variation(augmented_marginal_x(prior, f, eta), post) for eta in (1.0, 0.1, 0.01)]
    decreasing = tvs[0] > tvs[1] > tvs[2]
    checks.append(Check("stationary_limit_tv_decreasing", decreasing, tvs[-1], tvs[1]))
    return checks


# -- command line ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgdd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out")

    p = sub.add_parser("make-task", help="write a task instance file")
    p.add_argument("--kind", required=True, choices=TASK_KINDS)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--D", type=int, required=True)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--sigma-y", type=float)
    p.add_argument("--sigma-prior", type=float, default=1.0)
    p.add_argument("--reward-kind", default="linear_token_score")
    common(p)

    for name, hlp in [("run", "sample with one method and write a run report"),
                      ("ablate-schedule", "annealed vs fixed-eta per-iteration quality"),
                      ("ablate-nfe", "quality against score-evaluation budget")]:
        p = sub.add_parser(name, help=hlp)
        common(p)
        p.add_argument("--task", help="task file (overrides the config)")
        if name == "run":
            p.add_argument("--method", choices=sorted(METHODS))
            p.add_argument("--n-samples", type=int)

    p = sub.add_parser("verify-theory", help="exact numerical checks of the sampler theory")
    common(p)
    p.add_argument("--inject-bug", action="store_true", help="invert MH acceptance (negative control)")

    p = sub.add_parser("report", help="aggregate run directories that share a task")
    p.add_argument("runs", nargs="+")
    common(p)
    p.add_argument("--task")
    return parser


def _merged_config(args, keys=("seed", "threads", "out", "task", "method", "n_samples")) -> dict:
    data = load_json_config(args.config) if args.config else {}
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    return data


def _main(args) -> int:
    if args.command == "make-task":
        task = make_task(args.kind, args.N, args.D, args.seed or 0, sigma_y=args.sigma_y,
                         gamma=args.gamma, beta=args.beta, sigma_prior=args.sigma_prior,
                         reward_kind=args.reward_kind)
        out = args.out or "task.json"
        write_atomic(out, task.canonical_json() + "\n")
        print(f"{out} {task.task_hash}")
        return EXIT_OK
    if args.command == "run":
        cfg = ExperimentConfig.from_dict(_merged_config(args))
        metrics = run_experiment(cfg)
        print(json.dumps(metrics, indent=2))
        return EXIT_OK
    if args.command in ("ablate-schedule", "ablate-nfe"):
        data = _merged_config(args, ("threads", "out", "task"))
        if args.seed is not None:
            data["seeds"] = [args.seed]
        out = Path(data.pop("out", args.command))
        fn = ablate_schedule if args.command == "ablate-schedule" else ablate_nfe
        rows = fn(data)
        task_hash = Task.load(data["task"]).task_hash
        name = "schedule.csv" if args.command == "ablate-schedule" else "nfe.csv"
        write_atomic(out / name, rows_csv(rows, task_hash))
        print(out / name)
        return EXIT_OK
    if args.command == "verify-theory":
        checks = theory_battery(args.seed or 0, inject_bug=args.inject_bug)
        for c in checks:
            print(c.line())
        if args.out:
            write_atomic(args.out, json.dumps([c.__dict__ for c in checks], indent=2, default=float))
        return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY
    if args.command == "report":
        rows = build_report(args.runs, args.task)
        text = rows_csv(rows)
        if args.out:
            write_atomic(args.out, text)
        print(text, end="")
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _main(args)
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
