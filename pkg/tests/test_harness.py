import json

import pytest

from sgdd.harness import (
    EXIT_BUDGET,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_VERIFY,
    ExperimentConfig,
    VerificationError,
    build_report,
    main,
    read_samples_csv,
    theory_battery,
)
from sgdd.splitgibbs import ConfigError
from sgdd.tasks import Task


@pytest.fixture()
def synthetic_task(tmp_path):
    path = tmp_path / "syn.json"
    assert main(["make-task", "--kind", "synthetic", "--N", "12", "--D", "2", "--seed", "7",
                 "--out", str(path)]) == EXIT_OK
    return path


def run_cli(tmp_path, task, name, *extra):
    out = tmp_path / name
    code = main(["run", "--task", str(task), "--out", str(out), "--n-samples", "300", *extra])
    return code, out


def test_make_task_files(tmp_path, synthetic_task):
    task = Task.load(synthetic_task)
    assert task.kind == "synthetic" and task.model.kind == "l1_sum" and task.seed == 7
    xor = tmp_path / "xor.json"
    assert main(["make-task", "--kind", "xor", "--N", "2", "--D", "16", "--gamma", "2.0", "--seed", "3",
                 "--out", str(xor)]) == EXIT_OK
    assert Task.load(xor).model.pairs.shape == (32, 2)
    rew = tmp_path / "rew.json"
    assert main(["make-task", "--kind", "reward", "--N", "2", "--D", "8", "--beta", "1.0",
                 "--out", str(rew)]) == EXIT_OK
    assert Task.load(rew).beta == 1.0
    assert main(["make-task", "--kind", "xor", "--N", "3", "--D", "4", "--out", str(tmp_path / "bad.json")]) \
        == EXIT_CONFIG


def test_run_writes_artifacts(tmp_path, synthetic_task):
    code, out = run_cli(tmp_path, synthetic_task, "a", "--seed", "1")
    assert code == EXIT_OK
    for name in ("samples.csv", "trace.csv", "metrics.json", "config.echo"):
        assert (out / name).exists()
    metrics = json.loads((out / "metrics.json").read_text())
    task = Task.load(synthetic_task)
    assert metrics["task_hash"] == task.task_hash
    assert metrics["nfe_total"] == 10 * 20 and metrics["nfe_sequential"] == 200
    assert (out / "samples.csv").read_text().startswith(f"# task_hash={task.task_hash}\nx0,x1\n")
    assert read_samples_csv(out / "samples.csv").shape == (300, 2)
    echo = json.loads((out / "config.echo").read_text())
    assert echo["K"] == 10 and echo["seed"] == 1 and "fingerprint" in echo


def test_seed_repeat_is_byte_identical(tmp_path, synthetic_task):
    _, a = run_cli(tmp_path, synthetic_task, "a", "--seed", "5")
    _, b = run_cli(tmp_path, synthetic_task, "b", "--seed", "5", "--threads", "3")
    _, c = run_cli(tmp_path, synthetic_task, "c", "--seed", "6")
    assert (a / "samples.csv").read_bytes() == (b / "samples.csv").read_bytes()
    assert (a / "samples.csv").read_bytes() != (c / "samples.csv").read_bytes()


def test_report_roundtrip_and_hash_refusal(tmp_path, synthetic_task):
    _, a = run_cli(tmp_path, synthetic_task, "a", "--method", "sgdd")
    _, b = run_cli(tmp_path, synthetic_task, "b", "--method", "mcmc_no_prior")
    rows = build_report([a, b])
    assert [r["method"] for r in rows] == ["sgdd", "mcmc_no_prior"]
    other = tmp_path / "other.json"
    main(["make-task", "--kind", "synthetic", "--N", "12", "--D", "2", "--seed", "8", "--out", str(other)])
    _, c = run_cli(tmp_path, other, "c")
    with pytest.raises(ConfigError):
        build_report([a, c])
    assert main(["report", str(a), str(c)]) == EXIT_CONFIG
    assert main(["report", str(a), str(b), "--out", str(tmp_path / "r.csv")]) == EXIT_OK


def test_report_detects_tampered_metrics(tmp_path, synthetic_task):
    _, a = run_cli(tmp_path, synthetic_task, "a")
    path = a / "metrics.json"
    metrics = json.loads(path.read_text())
    metrics["hellinger"] += 1e-6
    path.write_text(json.dumps(metrics))
    with pytest.raises(VerificationError):
        build_report([a])
    assert main(["report", str(a)]) == EXIT_VERIFY


def test_config_validation(tmp_path, synthetic_task):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"task": str(synthetic_task), "temperature": 2})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"task": str(synthetic_task), "method": "smc", "K": 5})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"task": str(synthetic_task), "K": 0})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"task": str(synthetic_task), "method": "langevin"})
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"task": str(synthetic_task), "method": "sgdd", "K": 3, "euler_steps": 4,
                               "n_samples": 50, "out": str(tmp_path / "cfgrun")}))
    assert main(["run", "--config", str(cfg)]) == EXIT_OK
    assert json.loads((tmp_path / "cfgrun" / "config.echo").read_text())["K"] == 3
    cfg.write_text(json.dumps({"task": str(synthetic_task), "nested": {"K": 3}}))
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_budget_exit_code(tmp_path):
    big = tmp_path / "big.json"
    assert main(["make-task", "--kind", "reward", "--N", "50", "--D", "100", "--out", str(big)]) == EXIT_OK
    code = main(["run", "--task", str(big), "--method", "dps", "--n-samples", "2", "--out", str(tmp_path / "r")])
    assert code == EXIT_BUDGET


def test_oracle_free_metrics_warn(tmp_path):
    big = tmp_path / "big.json"
    main(["make-task", "--kind", "reward", "--N", "4", "--D", "20", "--out", str(big)])
    with pytest.warns(UserWarning, match="oracle"):
        code, out = run_cli(tmp_path, big, "r", "--method", "mcmc_no_prior")
    assert code == EXIT_OK
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["hellinger"] is None and "mean_reward" in metrics


def test_verify_theory_battery(tmp_path, capsys):
    checks = theory_battery(0)
    assert all(c.passed for c in checks), [c.line() for c in checks]
    assert main(["verify-theory", "--out", str(tmp_path / "t.json")]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    bad = {c.name: c.passed for c in theory_battery(0, inject_bug=True)}
    assert not bad["mh_exact_invariance"] and not bad["dpi_towards_target"]
    assert main(["verify-theory", "--inject-bug"]) == EXIT_VERIFY


def test_ablation_commands(tmp_path):
    task = tmp_path / "and.json"
    main(["make-task", "--kind", "and", "--N", "2", "--D", "8", "--seed", "1", "--out", str(task)])
    cfg = tmp_path / "ab.json"
    cfg.write_text(json.dumps({"task": str(task), "K": 4, "euler_steps": 3, "n_samples": 100}))
    assert main(["ablate-schedule", "--config", str(cfg), "--out", str(tmp_path / "s")]) == EXIT_OK
    lines = (tmp_path / "s" / "schedule.csv").read_text().splitlines()
    assert lines[0].startswith("# task_hash=") and lines[1].startswith("schedule,seed,k,eta")
    assert len(lines) == 2 + 4 * 4
    cfg.write_text(json.dumps({"task": str(task), "configs": [[2, 2], [4, 3]], "n_samples": 100}))
    assert main(["ablate-nfe", "--config", str(cfg), "--out", str(tmp_path / "n")]) == EXIT_OK
    rows = (tmp_path / "n" / "nfe.csv").read_text().splitlines()
    assert "SGDD-4" in rows[2] and "SGDD-12" in rows[3]
    cfg.write_text(json.dumps({"task": str(task), "bogus": 1}))
    assert main(["ablate-nfe", "--config", str(cfg)]) == EXIT_CONFIG


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--method", "nope"])
    assert exc.value.code == 2
