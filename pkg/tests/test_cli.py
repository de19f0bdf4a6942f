import json
import os
import signal
import subprocess
import sys
import time

import pytest

from tactobench import cli
from tactobench.config import ConfigError, get_preset, load_config, parse_config, presets

TINY = """\
preset: desk_paddle_bounce
seed: 2
env: {{n_train: 8, n_eval: 4}}
ppo: {{rollout_horizon: 8, n_minibatches: 2, n_epochs: 2}}
network: {{hidden: [16, 16]}}
total_env_steps: {steps}
eval_interval: 128
eval_episodes: 4
checkpoint_interval: 128
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def metrics(path):
    with open(os.path.join(path, "metrics.jsonl")) as f:
        rows = [json.loads(l) for l in f]
    for r in rows:
        r.pop("wall_time_s")
    return rows


# -- config ------------------------------------------------------------------------
def test_config_errors_carry_line_numbers():
    with pytest.raises(ConfigError) as e:
        parse_config("preset: desk_paddle_bounce\nppo:\n  gamma: fast\n", "run.yaml")
    assert e.value.line == 3 and e.value.field_name == "ppo.gamma"
    assert str(e.value).startswith("run.yaml:3: field 'ppo.gamma'")
    with pytest.raises(ConfigError) as e:
        parse_config("env:\n  n_train: 4\n  colour: red\n")
    assert e.value.line == 3 and e.value.field_name == "env.colour"
    with pytest.raises(ConfigError) as e:
        parse_config("env:\n  morphology: octopus\n")
    assert e.value.field_name == "env.morphology" and e.value.line == 2
    with pytest.raises(ConfigError) as e:
        parse_config("preset: nope\n")
    assert e.value.field_name == "preset"
    with pytest.raises(ConfigError) as e:
        parse_config("env: {morphology: paddle, task: baoding}\n")
    assert "Baoding" in str(e.value)
    with pytest.raises(ConfigError):
        parse_config("ppo: {n_minibatches: 3}\nenv: {n_train: 8}\n")


def test_preset_merge_and_roundtrip():
    cfg = parse_config("preset: desk_paddle_bounce\nseed: 9\nppo: {learning_rate: 5.0e-4}\n")
    base = get_preset("desk_paddle_bounce")
    assert cfg.ppo.learning_rate == 5e-4 and cfg.ppo.rollout_horizon == base.ppo.rollout_horizon
    assert cfg.seed == 9 and cfg.network == base.network
    again = parse_config(cli.dump_config(cfg))
    assert again.to_dict() | {"name": None} == cfg.to_dict() | {"name": None}


def test_presets_all_valid():
    table = presets()
    assert "desk_paddle_bounce" in table and "full_shadow_bounce_blind" in table
    assert len(table) == 1 + 4 * 2 * 2 * 2
    for name, cfg in table.items():
        assert cfg.validate() == [], name
    assert table["full_orca_baoding_state"].env.n_train == 8092


def test_unknown_morphology_exit_code(tmp_path, capsys):
    path = write(tmp_path, "env:\n  morphology: octopus\n")
    assert cli.main(["train", "--config", path, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "env.morphology" in err and "cfg.yaml:2" in err


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["train", "--preset", "desk_paddle_bounce", "--config", "x.yaml"]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["train", "--threads", "0"]) == 2
    assert cli.main(["presets"]) == 0
    assert "desk_paddle_bounce" in capsys.readouterr().out


# -- train / eval ---------------------------------------------------------------------
def test_train_writes_metrics_and_is_reproducible(tmp_path):
    cfg = write(tmp_path, TINY.format(steps=256))
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["train", "--config", cfg, "--out", a]) == 0
    assert cli.main(["train", "--config", cfg, "--out", b]) == 0
    ra, rb = metrics(a), metrics(b)
    assert len(ra) == 4 and [r["env_steps"] for r in ra] == [64, 128, 192, 256]
    assert [r["eval_return"] is not None for r in ra] == [False, True, False, True]
    assert ra == rb
    for f in ("config.yaml", "checkpoint_latest.tbck", "checkpoint_final.tbck"):
        assert os.path.exists(os.path.join(a, f))
    assert not os.path.exists(os.path.join(a, ".lock"))
    assert load_config(os.path.join(a, "config.yaml")).seed == 2


def test_resume_matches_uninterrupted(tmp_path):
    cfg = parse_config(TINY.format(steps=384))
    full, part = str(tmp_path / "full"), str(tmp_path / "part")
    assert cli.train_run(cfg, full, quiet=True) == 0
    assert cli.train_run(cfg, part, max_iterations=3, quiet=True) == 0
    assert not os.path.exists(os.path.join(part, "checkpoint_final.tbck"))
    with open(os.path.join(part, "metrics.jsonl"), "a") as f:
        f.write('{"iteration": 4, "env')  # torn line from a crash
    assert cli.train_run(cfg, part, resume=True, quiet=True) == 0
    assert metrics(part) == metrics(full)
    ea = cli.eval_checkpoint(os.path.join(full, "checkpoint_final.tbck"), 4)
    eb = cli.eval_checkpoint(os.path.join(part, "checkpoint_final.tbck"), 4)
    assert ea == eb


def test_eval_oracle_checkpoint(tmp_path, capsys):
    path = str(tmp_path / "oracle.tbck")
    cli.write_oracle_checkpoint(path)
    assert cli.main(["eval", path, "--episodes", "100", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["mean_return"] == 1000.0 and rep["std_return"] == 0.0 and rep["n_episodes"] == 100
    assert cli.main(["eval", path, "--episodes", "0"]) == 2
    assert cli.main(["eval", str(tmp_path / "missing.tbck")]) == 1


def test_eval_report_fields(tmp_path, capsys):
    cfg = parse_config("preset: desk_shadow_lite_baoding_blind\nenv: {n_train: 4, n_eval: 2}\n"
                       "ppo: {rollout_horizon: 4, n_minibatches: 2}\nnetwork: {hidden: [8]}\n")
    tr = cli.build_trainer(cfg)
    path = str(tmp_path / "b.tbck")
    cli.checkpoint_trainer(tr, cfg, path)
    assert cli.main(["eval", path, "--episodes", "2"]) == 0
    out = capsys.readouterr().out
    assert "switches:" in out and "rotations:" in out and "bounces" not in out
    cli.write_oracle_checkpoint(path)
    cli.main(["eval", path, "--episodes", "1"])
    assert "bounces:" in capsys.readouterr().out


def test_lock_blocks_concurrent_runs(tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    holder = subprocess.Popen([sys.executable, "-c", "import time; time.sleep(60)"])
    try:
        (out / ".lock").write_text(str(holder.pid))
        cfg = write(tmp_path, TINY.format(steps=64))
        assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 1
        assert "locked" in capsys.readouterr().err
    finally:
        holder.kill()
        holder.wait()
    # the holder is gone, so the lock is stale and gets taken over
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0


def test_signal_flushes_checkpoint_then_resumes(tmp_path):
    cfg = write(tmp_path, TINY.format(steps=64 * 4000))
    out = tmp_path / "run"
    proc = subprocess.Popen([sys.executable, "-m", "tactobench", "train", "--config", cfg, "--out", str(out)],
                            stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, text=True)
    mpath = out / "metrics.jsonl"
    deadline = time.time() + 120
    while time.time() < deadline:
        if mpath.exists() and len(mpath.read_text().splitlines()) >= 3:
            break
        time.sleep(0.05)
    proc.send_signal(signal.SIGINT)
    _, err = proc.communicate(timeout=120)
    assert proc.returncode == 1
    assert "interrupted" in err
    n = len(mpath.read_text().splitlines())
    cp = cli.load_checkpoint(str(out / "checkpoint_latest.tbck"))[1]
    assert cp["iteration"] == n
    assert not (out / ".lock").exists()


# -- bench / sweep ---------------------------------------------------------------------
def test_bench_digests_agree(capsys):
    code = cli.main(["bench", "--preset", "desk_shadow_bounce_blind", "--thread-list", "1,2,4",
                     "--envs", "12", "--steps", "6"])
    out = capsys.readouterr().out
    assert code == 0
    rows = [l for l in out.splitlines()[1:] if l.strip()]
    assert len(rows) == 3 * len(cli.available_backends())
    assert all(l.rstrip().endswith("yes") for l in rows)


def test_sweep_runs_and_resumes(tmp_path, capsys):
    text = TINY.format(steps=64) + "sweep: {n_trials: 3, n_warmup: 2, budget_env_steps: 64}\n"
    cfg = write(tmp_path, text)
    out = str(tmp_path / "sw")
    assert cli.main(["sweep", "--config", cfg, "--out", out]) == 0
    hist = open(os.path.join(out, "sweep_history.jsonl")).read().splitlines()
    assert len(hist) == 3
    assert "best trial" in capsys.readouterr().out
    assert cli.main(["sweep", "--config", cfg, "--out", out]) == 0
    assert open(os.path.join(out, "sweep_history.jsonl")).read().splitlines() == hist


def test_eval_objective():
    rows = [{"env_steps": s, "eval_return": r} for s, r in [(100, 1.0), (900, 2.0), (1000, 4.0)]]
    assert cli.eval_objective(rows, 1000) == 3.0
    assert cli.eval_objective(rows[:1], 1000) == 1.0
    with pytest.raises(RuntimeError):
        cli.eval_objective([{"env_steps": 5, "eval_return": None}], 10)
