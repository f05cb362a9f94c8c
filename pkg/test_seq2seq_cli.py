import json

import numpy as np
import pandas as pd
import pytest

import seq2seq_cli
from config import ModelConfig, TrainConfig, write_json_config
from experts import load_templates
from seq2seq_cli import build_parser, main, resolve_config
from seq2seq_models import load_model


def _run_dir(out, command):
    dirs = sorted(out.glob(f"*-{command}"))
    assert len(dirs) == 1
    return dirs[0]


def _summary(out, command):
    return json.loads((_run_dir(out, command) / "summary.json").read_text())


@pytest.fixture
def templates_file(tmp_path):
    out = tmp_path / "templates-run"
    assert main(["collect-templates", "--seed", "0", "--noise", "off", "--out", str(out)]) == 0
    return _run_dir(out, "collect-templates") / "templates.json"


@pytest.fixture
def dataset_file(tmp_path, templates_file):
    out = tmp_path / "demos-run"
    code = main(["collect-demos", "--seed", "1", "--episodes", "3", "--noise", "off",
                 "--templates", str(templates_file), "--out", str(out)])
    assert code == 0
    return _run_dir(out, "collect-demos") / "dataset.jsonl"


def test_every_command_is_registered():
    parser = build_parser()
    args = parser.parse_args(["eval", "--policy", "expert", "--demo-counts", "1,2"])
    assert args.command == "eval"
    assert args.demo_counts == [1, 2]
    with pytest.raises(SystemExit):
        parser.parse_args(["collect-demos", "--demo-counts", "a,b"])


def test_incompatible_flags_exit_with_config_error(tmp_path):
    assert main(["train", "--arch", "bc", "--oracle", "--out", str(tmp_path)]) == 2
    record = json.loads((tmp_path / "error.json").read_text())
    assert record["status"] == "error"
    assert record["error_type"] == "ConfigError"
    assert record["command"] == "train"
    assert record["fix_suggestion"]


def test_invalid_config_file(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"dagger": {"budget": "many"}}))
    assert main(["dagger", "--config", str(config), "--out", str(tmp_path)]) == 2
    assert "dagger.budget" in json.loads((tmp_path / "error.json").read_text())["error"]


def test_missing_checkpoint_is_reported(tmp_path, templates_file):
    code = main(["eval", "--templates", str(templates_file), "--out", str(tmp_path)])
    assert code == 2
    run_dir = _run_dir(tmp_path, "eval")
    assert "--checkpoint" in json.loads((run_dir / "error.json").read_text())["error"]


def test_collect_templates_writes_resolved_config(templates_file):
    templates = load_templates(templates_file)
    assert len(templates) == 5
    resolved = json.loads((templates_file.parent / "resolved_config.json").read_text())
    assert resolved["seed"] == 0
    assert resolved["env"]["noise"] is False


def test_collect_demos(dataset_file):
    lines = dataset_file.read_text().splitlines()
    assert json.loads(lines[0])["count"] == 3
    assert len(lines) == 4
    assert json.loads((dataset_file.parent / "summary.json").read_text())["records"] == 3


def test_replay_matches_recorded_demos(tmp_path, templates_file, dataset_file):
    out = tmp_path / "replay-run"
    code = main(["replay", "--noise", "off", "--dataset", str(dataset_file),
                 "--templates", str(templates_file), "--out", str(out)])
    assert code == 0
    summary = _summary(out, "replay")
    assert summary == {"replayed": 3, "mismatched": 0, "run_dir": summary["run_dir"]}


def test_expert_evaluation_is_reproducible(tmp_path, templates_file):
    tables = []
    for name in ("first", "second"):
        out = tmp_path / name
        code = main(["eval", "--policy", "expert", "--episodes", "4", "--seed", "2",
                     "--templates", str(templates_file), "--out", str(out)])
        assert code == 0
        tables.append(pd.read_csv(_run_dir(out, "eval") / "eval_report.csv"))
        assert _summary(out, "eval")["n_episodes"] == 4
    pd.testing.assert_frame_equal(tables[0], tables[1])


def test_train_writes_checkpoint(tmp_path, dataset_file):
    model_config = ModelConfig(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, n_components=2)
    model_path = write_json_config(model_config, tmp_path / "model.config.json")
    out = tmp_path / "train-run"
    code = main(["train", "--epochs", "1", "--model-config", str(model_path),
                 "--dataset", str(dataset_file), "--out", str(out)])
    assert code == 0
    summary = _summary(out, "train")
    model = load_model(summary["checkpoint"], model_config)
    assert model.config.d_model == 8
    assert (_run_dir(out, "train") / "training.csv").exists()


def test_epochs_flag_targets_the_commands_training_loop(tmp_path):
    parser = build_parser()
    dagger = resolve_config(parser.parse_args(["dagger", "--epochs", "5", "--out", str(tmp_path)]))
    assert dagger.train.finetune_epochs == 5
    assert dagger.train.train_epochs == TrainConfig().train_epochs

    train = resolve_config(parser.parse_args(["train", "--epochs", "7", "--out", str(tmp_path)]))
    assert train.train.train_epochs == 7
    assert train.train.finetune_epochs == TrainConfig().finetune_epochs


def test_unexpected_failure_still_writes_error_record(tmp_path, monkeypatch):
    def broken(args, config, env, run_dir):
        raise np.linalg.LinAlgError("singular matrix")

    monkeypatch.setitem(seq2seq_cli.COMMANDS, "eval", broken)
    assert main(["eval", "--policy", "expert", "--out", str(tmp_path)]) == 1
    record = json.loads((_run_dir(tmp_path, "eval") / "error.json").read_text())
    assert record["error_type"] == "LinAlgError"
    assert record["status"] == "error"


def _dagger_run(out, templates_file, model_path):
    code = main(["dagger", "--seed", "0", "--noise", "off", "--budget", "2", "--epochs", "1",
                 "--model-config", str(model_path), "--templates", str(templates_file), "--out", str(out)])
    assert code == 0
    return _run_dir(out, "dagger")


def test_dagger_run_is_reproducible(tmp_path, templates_file):
    model_config = ModelConfig(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, n_components=2)
    model_path = write_json_config(model_config, tmp_path / "model.config.json")
    first = _dagger_run(tmp_path / "a", templates_file, model_path)
    second = _dagger_run(tmp_path / "b", templates_file, model_path)

    summary = json.loads((first / "summary.json").read_text())
    assert summary["records"] <= 2
    assert summary["stopped_by"] == "budget"
    assert (first / "model.ckpt").exists()
    assert (first / "run_log.jsonl").exists()
    assert (first / "dataset.jsonl").read_text() == (second / "dataset.jsonl").read_text()
    assert (first / "model.ckpt").read_bytes() == (second / "model.ckpt").read_bytes()
