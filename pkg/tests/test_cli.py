import re
import subprocess
import sys

import pytest

from streamevo import cli
from streamevo.baselines import BASELINES, TABLE5_TEXT
from streamevo.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, RunConfig, load_config, main, render_config
from streamevo.evolution import checkpoint_load, read_history_csv
from streamevo.graph import decode_table

from tiny import tiny_config


@pytest.fixture
def tiny_toml(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(render_config(RunConfig(tiny_config(), seed=3)))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# ---------------------------------------------------------------- configuration


def test_print_config_round_trip(tmp_path, capsys):
    code, text, _ = run(capsys, "--print-config")
    assert code == EXIT_OK
    assert "full-scale reference value" in text
    path = tmp_path / "printed.toml"
    path.write_text(text)
    assert load_config(path) == load_config(None)
    code, again, _ = run(capsys, "--print-config", "--config", path)
    assert again == text


def test_shipped_desk_config_round_trip(tmp_path, capsys):
    desk = cli.shipped_config_path()
    code, text, _ = run(capsys, "--print-config", "--config", desk)
    path = tmp_path / "desk.toml"
    path.write_text(text)
    assert load_config(path) == load_config(desk)
    cfg = load_config(desk).search
    assert (cfg.population_size, cfg.tournament_size, cfg.init_rounds, cfg.rounds) == (20, 5, 30, 40)


def test_every_default_is_annotated(capsys):
    _, text, _ = run(capsys, "--print-config")
    for key in ("population_size", "tournament_size", "batch_size", "base_lr", "weight_decay", "label_smoothing",
                "iterations", "max_ops_per_child"):
        lines = text.splitlines()
        i = next(n for n, line in enumerate(lines) if line.startswith(f"{key} ="))
        assert lines[i - 1].startswith("# full-scale reference value:")


def test_unknown_keys_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[search]\npopulation = 20\n")
    code, _, err = run(capsys, "--print-config", "--config", bad)
    assert code == EXIT_INVALID and "unknown key(s) in [search]: population" in err
    bad.write_text("colour = 1\n")
    assert run(capsys, "--print-config", "--config", bad)[0] == EXIT_INVALID
    bad.write_text("[search]\ntournament_size = 30\n")
    assert run(capsys, "--print-config", "--config", bad)[0] == EXIT_INVALID
    bad.write_text("[search\n")
    assert run(capsys, "--print-config", "--config", bad)[0] == EXIT_INVALID
    assert run(capsys, "--print-config", "--config", tmp_path / "missing.toml")[0] == EXIT_INVALID
    code, _, err = run(capsys, "evolve", "--init-rounds", 3, "--output-dir", tmp_path)
    assert code == EXIT_INVALID and "tournament_size" in err


def test_usage_errors(capsys):
    assert run(capsys)[0] == EXIT_USAGE
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE
    assert run(capsys, "evolve", "--rounds", "many")[0] == EXIT_USAGE
    assert run(capsys, "--help")[0] == EXIT_OK


# ---------------------------------------------------------------- build and validate


@pytest.mark.parametrize("name", BASELINES)
def test_build_baselines(name, capsys):
    code, out, _ = run(capsys, "build", name)
    assert code == EXIT_OK and f"{name}: valid" in out and "parameters:" in out


def test_build_table5(tmp_path, capsys):
    code, out, _ = run(capsys, "build", "--table5", "--dot", "--write", "--compile", "--output-dir", tmp_path)
    assert code == EXIT_OK
    assert "nodes: 15 (4 stems)" in out
    rows = {int(m.group(1)): m.group(2) for m in re.finditer(r"node +(\d+):.*inputs \[([^\]]*)\]", out)}
    expected = {}
    for line in TABLE5_TEXT.splitlines():
        m = re.match(r"(\d+): (\d), \[([^\]]*)\]", line)
        if m and m.group(2) != "0":
            expected[int(m.group(1))] = m.group(3).replace(" ", "")
    assert {k: v for k, v in rows.items() if k in expected} == expected
    assert (tmp_path / "table5.dot").read_text().startswith("digraph table5")
    assert decode_table((tmp_path / "table5.arch").read_text()) == decode_table(TABLE5_TEXT)
    assert re.search(r"compiled: \d+ parameters", out)


def test_build_reports_bad_row(tmp_path, capsys):
    bad = tmp_path / "bad.arch"
    bad.write_text("0: 0, [RGB], 8, 1, 4\n1: 0, [Flow], 8, 1, 4\n2: 1, [0, 3], 16, 1, 1\n3: 2, [2], 32, 1, 2\n")
    code, _, err = run(capsys, "build", bad)
    assert code == EXIT_INVALID and "row 2" in err and "earlier row" in err


def test_build_reports_invalid_graph(tmp_path, capsys):
    shallow = tmp_path / "shallow.arch"
    shallow.write_text("0: 0, [RGB], 8, 1, 4\n1: 0, [Flow], 8, 1, 4\n2: 4, [0, 1], 16, 1, 1\n")
    code, _, err = run(capsys, "build", shallow)
    assert code == EXIT_INVALID and "invalid" in err
    assert run(capsys, "validate", shallow)[0] == EXIT_INVALID
    assert run(capsys, "build", "no_such_model")[0] == EXIT_INVALID
    assert run(capsys, "build")[0] == EXIT_INVALID


def test_validate_ok(tmp_path, capsys):
    path = tmp_path / "t5.arch"
    path.write_text(TABLE5_TEXT)
    code, out, _ = run(capsys, "validate", path)
    assert code == EXIT_OK and "15 nodes" in out


# ---------------------------------------------------------------- evolve and compare


def test_evolve_artifacts_and_byte_identical_rerun(tmp_path, tiny_toml, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "evolve", "--config", tiny_toml, "--rounds", 4, "--output-dir", a, "--quiet")[0] == EXIT_OK
    assert run(capsys, "evolve", "--config", tiny_toml, "--rounds", 4, "--output-dir", b, "--quiet")[0] == EXIT_OK
    for f in ("history.csv", "best.arch", "best.dot", "checkpoint.json", "config.toml"):
        assert (a / f).exists()
    assert len(read_history_csv(a / "history.csv")) == 5 + 4
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
    assert (a / "best.arch").read_bytes() == (b / "best.arch").read_bytes()
    # nothing written outside the chosen output directories
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a", "b", "tiny.toml"]
    # the written config reproduces the run
    c = tmp_path / "c"
    assert run(capsys, "evolve", "--config", a / "config.toml", "--output-dir", c, "--quiet")[0] == EXIT_OK
    assert (c / "history.csv").read_bytes() == (a / "history.csv").read_bytes()


def test_evolve_resume_matches_uninterrupted(tmp_path, tiny_toml, capsys):
    short, full = tmp_path / "short", tmp_path / "full"
    run(capsys, "evolve", "--config", tiny_toml, "--rounds", 2, "--output-dir", short, "--quiet")
    run(capsys, "evolve", "--config", tiny_toml, "--rounds", 5, "--output-dir", full, "--quiet")
    resumed = tmp_path / "resumed"
    code, _, _ = run(capsys, "evolve", "--resume", short / "checkpoint.json", "--rounds", 5,
                     "--output-dir", resumed, "--quiet")
    assert code == EXIT_OK
    assert (resumed / "history.csv").read_bytes() == (full / "history.csv").read_bytes()
    s1, _ = checkpoint_load(resumed / "checkpoint.json")
    s2, _ = checkpoint_load(full / "checkpoint.json")
    assert s1.history == s2.history and s1.rng.bit_generator.state == s2.rng.bit_generator.state
    code, _, err = run(capsys, "evolve", "--resume", short / "checkpoint.json", "--seed", 9, "--output-dir", resumed)
    assert code == EXIT_INVALID and "--seed" in err
    assert run(capsys, "evolve", "--resume", tmp_path / "nope.json", "--output-dir", resumed)[0] == EXIT_INVALID


def test_compare_csv_and_summary(tmp_path, tiny_toml, capsys):
    code, out, _ = run(capsys, "compare", "--config", tiny_toml, "--seeds", "0,1", "--rounds", 2,
                       "--init-rounds", 4, "--output-dir", tmp_path, "--quiet")
    assert code == EXIT_OK
    rows = read_history_csv(tmp_path / "comparison.csv")
    assert len(rows) == 3 * 2 * (4 + 2)
    assert len({(r["strategy"], r["seed"]) for r in rows}) == 6
    for s in ("guided", "standard_random_edges", "pure_random_search"):
        assert re.search(rf"^{s}\s+\d\.\d{{4}}\s+\d\.\d{{4}}\s+2$", out, re.M)
    assert (tmp_path / "summary.txt").exists()


def test_compare_single_strategy_and_bad_name(tmp_path, tiny_toml, capsys):
    code, _, _ = run(capsys, "compare", "--config", tiny_toml, "--strategies", "pure_random_search", "--seeds", "0",
                     "--rounds", 1, "--init-rounds", 4, "--output-dir", tmp_path, "--quiet")
    assert code == EXIT_OK and len(read_history_csv(tmp_path / "comparison.csv")) == 5
    code, _, err = run(capsys, "compare", "--config", tiny_toml, "--strategies", "guided,annealing",
                       "--output-dir", tmp_path)
    assert code == EXIT_INVALID and "annealing" in err
    assert run(capsys, "compare", "--config", tiny_toml, "--seeds", "a-b", "--output-dir", tmp_path)[0] == EXIT_INVALID


# ---------------------------------------------------------------- train


def test_train_zero_iterations(tmp_path, tiny_toml, capsys):
    arch = tmp_path / "in.arch"
    run(capsys, "evolve", "--config", tiny_toml, "--rounds", 0, "--output-dir", tmp_path / "ev", "--quiet")
    arch.write_text((tmp_path / "ev" / "best.arch").read_text())
    code, out, _ = run(capsys, "train", arch, "--config", tiny_toml, "--iterations", 0, "--output-dir", tmp_path)
    assert code == EXIT_OK and "no training steps" in out
    assert re.search(r"top1 [\d.]+  top5 [\d.]+  fitness [\d.]+", out)
    assert decode_table((tmp_path / "in.trained.arch").read_text()) == decode_table(arch.read_text())


def test_train_changes_only_logits(tmp_path, tiny_toml, capsys):
    arch = tmp_path / "m.arch"
    run(capsys, "evolve", "--config", tiny_toml, "--rounds", 0, "--output-dir", tmp_path / "ev", "--quiet")
    arch.write_text((tmp_path / "ev" / "best.arch").read_text())
    code, _, _ = run(capsys, "train", arch, "--config", tiny_toml, "--iterations", 4, "--output-dir", tmp_path)
    assert code == EXIT_OK
    before, after = decode_table(arch.read_text()), decode_table((tmp_path / "m.trained.arch").read_text())
    assert after.nodes == before.nodes and after.edges.keys() == before.edges.keys()
    assert after.edges != before.edges
    first = (tmp_path / "m.trained.arch").read_bytes()
    run(capsys, "train", arch, "--config", tiny_toml, "--iterations", 4, "--output-dir", tmp_path)
    assert (tmp_path / "m.trained.arch").read_bytes() == first


def test_train_divergence_exit_code(tmp_path, capsys):
    cfg = tmp_path / "hot.toml"
    cfg.write_text(render_config(RunConfig(tiny_config(), seed=0)).replace("base_lr = 0.05", "base_lr = 1e200")
                   .replace("# warmup_iterations unset (derived default)", "warmup_iterations = 0"))
    with pytest.warns(RuntimeWarning):
        code, _, err = run(capsys, "train", "two_stream_late_fusion", "--config", cfg, "--iterations", 5,
                           "--output-dir", tmp_path)
    assert code == EXIT_RUNTIME and re.search(r"step \d+", err)


def test_output_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env-out"))
    monkeypatch.chdir(tmp_path)
    assert run(capsys, "build", "two_stream_fully", "--dot")[0] == EXIT_OK
    assert (tmp_path / "env-out" / "two_stream_fully.dot").exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["env-out"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "streamevo", "validate", "two_stream_late_fusion"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "valid" in proc.stdout


@pytest.mark.slow
def test_retraining_the_evolved_best_reproduces_its_fitness(tmp_path, capsys):
    desk = cli.shipped_config_path()
    out = tmp_path / "ev"
    assert run(capsys, "evolve", "--config", desk, "--init-rounds", 5, "--rounds", 2, "--output-dir", out,
               "--quiet")[0] == EXIT_OK
    recorded = float(re.match(r"# fitness (\S+),", (out / "best.arch").read_text()).group(1))
    code, text, _ = run(capsys, "train", out / "best.arch", "--config", desk, "--iterations", 300,
                        "--output-dir", out)
    assert code == EXIT_OK
    fit = float(re.search(r"fitness ([\d.]+)", text).group(1))
    assert fit >= recorded - 0.02
