"""CLI contract: subcommands, exit codes, output files, reproducibility."""
import csv
import json

import pytest

from skillroute.cli import main

SMALL = ["--set", "backbone.model_dim=8", "--set", "backbone.num_layers=1",
         "--set", "strategy.num_skills=2", "--set", "strategy.num_heads=2",
         "--set", "strategy.rank=2",
         "--set", "tasks.num_generator_skills=2",
         "--set", "tasks.num_train_tasks=2",
         "--set", "tasks.num_test_tasks=1",
         "--set", "tasks.skills_per_task=1",
         "--set", "tasks.examples_per_task=24",
         "--set", "tasks.seq_len=4",
         "--set", "trainer.steps=6", "--set", "trainer.eval_every=3",
         "--set", "trainer.adapt_steps=3", "--set", "trainer.k_shots=8"]


def run_pretrain(out):
    return main(["pretrain", *SMALL, "--output-dir", str(out)])


def test_missing_config_file(tmp_path, capsys):
    code = main(["pretrain", "--config", str(tmp_path / "no.toml")])
    assert code == 2
    assert "no.toml" in capsys.readouterr().err


def test_bad_override(capsys):
    assert main(["pretrain", "--set", "nonsense"]) == 2
    assert main(["pretrain", "--set", "bogus.key=1"]) == 2


def test_pretrain_writes_checkpoint_and_logs(tmp_path):
    out = tmp_path / "run"
    assert run_pretrain(out) == 0
    for name in ("trainlog.csv", "trainlog.json", "config.toml"):
        assert (out / name).exists()
    for name in ("backbone.bin", "inventory.bin", "routing.json",
                 "manifest.json"):
        assert (out / "checkpoint" / name).exists()


def test_dry_run_trains_nothing(tmp_path, capsys):
    out = tmp_path / "dry"
    code = main(["pretrain", *SMALL, "--output-dir", str(out), "--dry-run"])
    assert code == 0
    blob = json.loads(capsys.readouterr().out)
    assert set(blob["budget"]) == {"pretrain", "finetune", "inference"}
    assert not (out / "checkpoint").exists()


def test_adapt_eval_rows_per_seed(tmp_path):
    out = tmp_path / "run"
    assert run_pretrain(out) == 0
    code = main(["adapt-eval", *SMALL, "--output-dir", str(out),
                 "--checkpoint", str(out / "checkpoint"),
                 "--set", "trainer.seeds=1,2,3"])
    assert code == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    # 1 test task x 3 seeds
    assert len(rows) == 3
    assert sorted(r["seed"] for r in rows) == ["1", "2", "3"]
    with open(out / "results.json") as fh:
        blob = json.load(fh)
    assert len(blob["rows"]) == 3
    assert "poly" in blob["aggregates"]


def test_adapt_eval_no_test_tasks(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_pretrain(out) == 0
    code = main(["adapt-eval", *SMALL, "--output-dir", str(out),
                 "--checkpoint", str(out / "checkpoint"),
                 "--set", "tasks.num_test_tasks=0"])
    assert code == 0
    assert "no test tasks" in capsys.readouterr().err


def test_adapt_eval_missing_checkpoint(tmp_path):
    code = main(["adapt-eval", *SMALL, "--output-dir", str(tmp_path),
                 "--checkpoint", str(tmp_path / "nowhere")])
    assert code == 3


def test_count_poly_s(capsys):
    code = main(["count", "--method", "poly-s", "--d", "16", "--r", "4",
                 "--skills", "8", "--tasks", "10", "--heads", "8"])
    assert code == 0
    blob = json.loads(capsys.readouterr().out)
    assert blob["budget"]["pretrain"]["per_layer"] == 1664


def test_count_shared_all_phases(capsys):
    code = main(["count", "--method", "shared", "--d", "16", "--r", "4"])
    assert code == 0
    blob = json.loads(capsys.readouterr().out)
    assert all(blob["budget"][p]["per_layer"] == 128
               for p in ("pretrain", "finetune", "inference"))


def test_count_unknown_method(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["count", "--method", "bogus", "--d", "16", "--r", "4"])
    assert exc.value.code != 0
    assert "poly-s" in capsys.readouterr().err


def test_align_command(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_pretrain(out) == 0
    code = main(["align", *SMALL, "--output-dir", str(out),
                 "--checkpoint", str(out / "checkpoint")])
    assert code == 0
    assert (out / "alignment.csv").exists()
    assert "alignment" in capsys.readouterr().out


def test_suite_table_and_determinism(tmp_path, capsys):
    args = ["suite", *SMALL, "--set", "suite.strategies=shared,poly"]
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    assert main([*args, "--output-dir", str(out1)]) == 0
    table1 = capsys.readouterr().out
    assert main([*args, "--output-dir", str(out2)]) == 0
    table2 = capsys.readouterr().out
    assert "shared" in table1 and "poly" in table1
    assert table1.replace(str(out1), "") == table2.replace(str(out2), "")
    with open(out1 / "results.csv") as f1, open(out2 / "results.csv") as f2:
        assert f1.read() == f2.read()
    with open(out1 / "results.json") as f1, open(out2 / "results.json") as f2:
        assert f1.read() == f2.read()


def test_output_dir_env_var(tmp_path, monkeypatch):
    target = tmp_path / "from-env"
    monkeypatch.setenv("SKILLROUTE_OUTPUT_DIR", str(target))
    assert main(["pretrain", *SMALL]) == 0
    assert (target / "trainlog.csv").exists()


def test_config_file_roundtrip(tmp_path):
    out = tmp_path / "run"
    assert run_pretrain(out) == 0
    # the persisted canonical config reproduces the run
    out2 = tmp_path / "run2"
    code = main(["pretrain", "--config", str(out / "config.toml"),
                 "--output-dir", str(out2)])
    assert code == 0
    with open(out / "trainlog.csv") as f1, open(out2 / "trainlog.csv") as f2:
        assert f1.read() == f2.read()
