import csv

import pytest

from ners.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main

CHAIN = """
[run]
total_steps = 300
eval_interval = 100
eval_episodes = 1
initial_random_steps = 50
batch_size = 16
seeds = 0, 1
[env]
name = chain
[sampler]
name = {sampler}
"""


@pytest.fixture
def chain_config(tmp_path):
    def make(sampler="random", extra=""):
        path = tmp_path / f"{sampler}.ini"
        path.write_text(CHAIN.format(sampler=sampler) + extra)
        return path

    return make


def test_run_writes_logs(chain_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(chain_config()), "--seed", "3", "--out", str(out)]) == EXIT_OK
    assert (out / "curves.csv").exists() and (out / "samples.csv").exists()
    assert "random seed 3" in capsys.readouterr().out


def test_run_sampler_override(chain_config, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", str(chain_config()), "--sampler", "per", "--out", str(out)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("per seed 0")


def test_missing_config(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.ini")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_bad_config(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\ntotal_steps = 10\neval_interval = 50\n")
    assert main(["run", str(path)]) == EXIT_CONFIG


def test_unknown_sampler_is_config_error(chain_config, tmp_path):
    assert main(["run", str(chain_config("magic")), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_divergence_exit(chain_config, tmp_path):
    path = chain_config(extra="[agent]\nlr = 1e200\n")
    out = tmp_path / "div"
    assert main(["run", str(path), "--out", str(out)]) == EXIT_DIVERGED
    assert (out / "curves.csv").exists()


def test_sweep_and_compare(chain_config, tmp_path, capsys):
    root = tmp_path / "runs"
    assert main(["sweep", str(chain_config()), "--out", str(root)]) == EXIT_OK
    assert main(["sweep", str(chain_config("per")), "--out", str(root), "--seeds", "0,1"]) == EXIT_OK
    assert sorted(p.name for p in (root / "random").iterdir()) == ["seed_0", "seed_1"]
    capsys.readouterr()
    assert main(["compare", str(root)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "random" in printed and "per" in printed
    with open(root / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sampler", "final_mean", "final_std", "auc_mean", "auc_std"]
    assert {r[0] for r in rows[1:]} == {"per", "random"}


def test_compare_runs_configs(chain_config, tmp_path):
    root = tmp_path / "cmp"
    summary = tmp_path / "s.csv"
    code = main(["compare", str(root), "--run", str(chain_config()), str(chain_config("ners")), "--seeds", "0", "--summary", str(summary)])
    assert code == EXIT_OK and summary.exists()


def test_compare_empty_root(tmp_path):
    assert main(["compare", str(tmp_path)]) == EXIT_CONFIG


def test_bad_seed_list(chain_config):
    with pytest.raises(SystemExit):
        main(["sweep", str(chain_config()), "--seeds", "a,b"])


@pytest.mark.parametrize("name", ["pendulum_ners.ini", "chain_random.ini"])
def test_shipped_configs_parse(name):
    from pathlib import Path

    from ners.harness import load_config

    cfg = load_config(Path(__file__).parent.parent / "configs" / name)
    cfg.validate()
