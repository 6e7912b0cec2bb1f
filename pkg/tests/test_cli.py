import json
from pathlib import Path

import pytest

from latact import store
from latact.cli import main


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    code = main(["gen-data", "--out", str(root), "--episodes", "6", "--seed", "3",
                 "--failure-rate", "0"])
    assert code == 0
    return root


# ---------------------------------------------------------------------------
# Exit-code contract


def test_help_exits_zero(capsys):
    for args in (["--help"], ["gen-data", "--help"], ["train", "--help"],
                 ["train", "lam", "--help"], ["eval", "--help"],
                 ["scale-study", "--help"], ["ablate-quality", "--help"]):
        assert main(args) == 0, args
        assert "Usage" in capsys.readouterr().out


def test_unknown_command_exits_one(capsys):
    assert main(["frobnicate"]) == 1


def test_unknown_flag_exits_one(capsys):
    assert main(["gen-data", "--out", "x", "--bogus"]) == 1


def test_missing_required_option_exits_one(capsys):
    assert main(["gen-data"]) == 1
    err = capsys.readouterr().err
    assert "--out" in err or "out" in err


def test_bad_option_value_exits_one(capsys):
    assert main(["gen-data", "--out", "x", "--episodes", "many"]) == 1


def test_corrupt_checkpoint_is_runtime_failure(tmp_path, capsys):
    bad = tmp_path / "policy.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["rollout", "--policy", str(bad), "--rollouts", "1"]) == 2


# ---------------------------------------------------------------------------
# Data toolchain commands


def test_gen_data_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for dest in (a, b):
        assert main(["gen-data", "--out", str(dest), "--episodes", "4",
                     "--seed", "11"]) == 0
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b and files_a
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_gen_data_refuses_overwrite_without_flag(data_root, capsys):
    assert main(["gen-data", "--out", str(data_root), "--episodes", "2",
                 "--seed", "3"]) == 1
    assert main(["gen-data", "--out", str(data_root), "--episodes", "6",
                 "--seed", "3", "--failure-rate", "0", "--overwrite"]) == 0


def test_config_json_echoed(data_root):
    cfg = json.loads((data_root / "config.json").read_text())
    assert cfg["command"] == "gen-data"
    assert cfg["episodes"] == 6 and cfg["seed"] == 3
    assert "out" not in cfg  # destination-independent so trees stay identical


def test_config_file_supplies_defaults(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"gen-data": {"episodes": 3, "seed": 7}}))
    dest = tmp_path / "d"
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(dest)]) == 0
    assert len(store.list_manifests(dest)) == 3


def test_validate_clean_store(data_root, capsys):
    assert main(["validate", str(data_root)]) == 0
    assert "6 episodes ok" in capsys.readouterr().out


def test_validate_corrupted_store(data_root, tmp_path, capsys):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(data_root, bad)
    blob = sorted(bad.rglob("*.blob"))[0]
    raw = bytearray(blob.read_bytes())
    raw[-20] ^= 0xFF
    blob.write_bytes(bytes(raw))
    assert main(["validate", str(bad)]) == 1
    out = capsys.readouterr().out
    assert "checksum" in out.lower() or "corrupt" in out.lower()


def test_trim_writes_new_store(data_root, tmp_path):
    out = tmp_path / "trimmed"
    assert main(["trim", str(data_root), "--out", str(out)]) == 0
    src = store.list_manifests(data_root)
    dst = store.list_manifests(out)
    assert len(dst) == len(src)
    total_src = sum(store.read_manifest(m)["n_frames"] for m in src)
    total_dst = sum(store.read_manifest(m)["n_frames"] for m in dst)
    assert total_dst <= total_src


def test_stats_reports_totals(data_root, tmp_path, capsys):
    out = tmp_path / "stats.json"
    assert main(["stats", str(data_root), "--out", str(out)]) == 0
    stats = json.loads(out.read_text())
    assert stats["trajectory_count"] == 6
    assert stats["total_duration_s"] > 0
    assert sum(stats["skill_histogram"].values()) == 6


# ---------------------------------------------------------------------------
# Training and evaluation commands (micro budgets)


@pytest.fixture(scope="session")
def trained(tmp_path_factory, data_root):
    out = tmp_path_factory.mktemp("cli-train")
    assert main(["train", "lam", "--data", str(data_root), "--out", str(out / "lam"),
                 "--epochs", "1", "--max-steps", "2", "--batch-size", "8",
                 "--seed", "0"]) == 0
    assert main(["train", "joint", "--data", str(data_root),
                 "--lam", str(out / "lam" / "lam.ckpt"), "--out", str(out / "joint"),
                 "--epochs", "1", "--max-steps", "2", "--batch-size", "8",
                 "--seed", "0"]) == 0
    return out


def test_train_outputs(trained):
    for sub, ckpt in (("lam", "lam.ckpt"), ("joint", "policy.ckpt")):
        d = trained / sub
        assert (d / ckpt).exists()
        assert (d / "config.json").exists()
        hist = json.loads((d / "history.json").read_text())
        assert hist  # non-empty training record


def test_train_planner_standalone(trained, data_root, tmp_path):
    out = tmp_path / "planner"
    assert main(["train", "planner", "--data", str(data_root),
                 "--lam", str(trained / "lam" / "lam.ckpt"), "--out", str(out),
                 "--epochs", "1", "--max-steps", "2", "--batch-size", "8"]) == 0
    assert (out / "planner.ckpt").exists()


def test_rollout_prints_scores(trained, capsys):
    assert main(["rollout", "--policy", str(trained / "joint" / "policy.ckpt"),
                 "--skill", "pick", "--rollouts", "2", "--seed", "5"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l]
    assert len(lines) == 2
    for i, line in enumerate(lines):
        skill, scenario, method, seed, score = line.split(",")
        assert (skill, scenario, method) == ("pick", "seen", "full")
        assert int(seed) == 5 + i
        assert 0.0 <= float(score) <= 1.0


def test_eval_writes_report(trained, tmp_path):
    out = tmp_path / "eval"
    assert main(["eval", "--policy", str(trained / "joint" / "policy.ckpt"),
                 "--out", str(out), "--rollouts", "1", "--skills", "pick",
                 "--scenarios", "seen", "--no-baselines"]) == 0
    assert (out / "scores.csv").exists()
    assert (out / "scores.png").exists()
    assert (out / "config.json").exists()
    csv_lines = (out / "scores.csv").read_text().splitlines()
    assert csv_lines[0] == "task,scenario,method,seed,score"
    assert len(csv_lines) == 1 + 2  # full + no-planner


def test_eval_rejects_unknown_skill(trained, tmp_path, capsys):
    assert main(["eval", "--policy", str(trained / "joint" / "policy.ckpt"),
                 "--out", str(tmp_path / "x"), "--skills", "juggle"]) == 1


def test_plot_round_trip(trained, tmp_path):
    out = tmp_path / "eval2"
    assert main(["eval", "--policy", str(trained / "joint" / "policy.ckpt"),
                 "--out", str(out), "--rollouts", "1", "--skills", "pick",
                 "--scenarios", "seen", "--no-baselines"]) == 0
    replot = tmp_path / "replot"
    assert main(["plot", "--report", str(out / "scores.csv"),
                 "--out", str(replot)]) == 0
    assert ((out / "scores.csv").read_bytes()
            == (replot / "scores.csv").read_bytes())
