import json

import pytest

from fedbayes import __version__
from fedbayes.cli import csv_header, main, metrics_csv
from fedbayes.config import ConfigError, parse_config, parse_text
from fedbayes.federation import MetricsRecord

TINY = """
[experiment:tiny]
strategy = {strategy}
rounds = 1
local_epochs = 1
client_count = 2
hidden_sizes = 8
pretrain_epochs = 1
image_size = 8
class_count = 4
per_client_examples = 24
test_per_class = 5
{extra}
"""

BACKDOOR_BLOCK = """
[experiment:tiny:evil]
clients = 0
kind = backdoor
fraction = 0.7
target_label = 2
weight_multiplier = 2
trigger = cross
"""


def write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def tiny(strategy="fedbayes", extra="", attack=""):
    return TINY.format(strategy=strategy, extra=extra) + attack


def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, "[experiment:base]\nstrategy = fedbayes\ndata = synthetic\n"))
    (spec,) = cfg.experiments
    assert (spec.rounds, spec.local_epochs, spec.client_count) == (100, 5, 8)
    assert spec.data.kind == "synthetic"
    assert spec.data.per_client_examples == 2000
    assert spec.attacks == {}


def test_unknown_strategy_lists_choices():
    with pytest.raises(ConfigError, match="fedmedian.*fedavg, fedbayes, fedadagrad, fedadam, fedyogi"):
        parse_text("[experiment:x]\nstrategy = fedmedian\n")


def test_fraction_out_of_range_names_key():
    text = "[experiment:x]\nstrategy = fedavg\n[experiment:x:a]\nclients = 0\nkind = label_flip\nfraction = 1.3\n"
    with pytest.raises(ConfigError, match=r"fraction = '1.3'.*range"):
        parse_text(text)


def test_backdoor_requires_trigger():
    text = "[experiment:x]\nstrategy = fedavg\n[experiment:x:a]\nclients = 0\nkind = backdoor\nfraction = 0.7\n"
    with pytest.raises(ConfigError, match="trigger"):
        parse_text(text)


@pytest.mark.parametrize("text, needle", [
    ("[experiment:x]\nstrategy = fedavg\nrounds = 0\n", "rounds"),
    ("[experiment:x]\nstrategy = fedavg\nroundz = 3\n", "roundz"),
    ("[experiments]\nstrategy = fedavg\n", "experiments"),
    ("[experiment:x]\n", "strategy"),
    ("[experiment:x]\nstrategy = fedavg\n[experiment:y:a]\nclients = 0\n", "undefined"),
    ("[experiment:x]\nstrategy = fedavg\nclient_count = 2\n[experiment:x:a]\nclients = 5\nkind = label_flip\nfraction = 0.1\n", "client_count"),
    ("[experiment:x]\nstrategy = fedavg\n[experiment:x:a]\nclients = 0\nkind = backdoor\nfraction = 0.7\ntrigger = 40,40\n", "outside"),
])
def test_validation_errors_name_the_problem(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_text(text)


def test_matrix_expansion_and_attack_ranges():
    text = ("[experiment:m]\nstrategy = fedavg, fedbayes\nmaster_seed = 0,1\nclient_count = 10\n"
            "[experiment:m:bad]\nclients = 0-2, 7\nkind = label_flip\nfraction = 0.85\nweight_multiplier = 3\n")
    specs = parse_text(text).experiments
    assert [s.name for s in specs] == ["m-fedavg-s0", "m-fedavg-s1", "m-fedbayes-s0", "m-fedbayes-s1"]
    assert sorted(specs[0].attacks) == [0, 1, 2, 7]
    assert specs[0].attacks[7].weight_multiplier == 3.0


def test_csv_header_and_empty_optionals():
    assert ",".join(csv_header(2)) == (
        "round,strategy,clean_accuracy,clean_loss,triggered_accuracy,attack_success_rate,"
        "client_0_acc,client_1_acc"
    )
    rec = MetricsRecord(3, "fedavg", 0.5, 1 / 3, per_client_accuracy=[0.25, 1.0])
    lines = metrics_csv([rec], 2).splitlines()
    assert lines[1] == "3,fedavg,0.5,0.333333333,,,0.25,1"


def test_version_and_validate(tmp_path, capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == __version__
    assert main(["validate", str(write(tmp_path, tiny()))]) == 0
    echoed = json.loads(capsys.readouterr().out)
    assert echoed[0]["name"] == "tiny" and echoed[0]["batch_size"] == 128


def test_validate_reports_config_errors(tmp_path, capsys):
    assert main(["validate", str(write(tmp_path, tiny(strategy="fedmedian")))]) == 2
    assert "fedmedian" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.ini")]) == 2


def test_empty_experiment_list(tmp_path, caplog):
    out = tmp_path / "out"
    assert main(["run", str(write(tmp_path, "[run]\noutput_dir = x\n")), "--output-dir", str(out)]) == 0
    assert not out.exists()
    assert "no experiments" in caplog.text


def test_run_writes_one_csv_and_json_and_is_reproducible(tmp_path):
    cfg = write(tmp_path, tiny(attack=BACKDOOR_BLOCK))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(cfg), "--output-dir", str(a)]) == 0
    assert sorted(p.name for p in a.iterdir()) == ["run.log", "tiny.csv", "tiny.json"]
    assert main(["run", str(cfg), "--output-dir", str(b)]) == 0
    assert (a / "tiny.csv").read_bytes() == (b / "tiny.csv").read_bytes()
    rows = (a / "tiny.csv").read_text().splitlines()
    assert rows[0].startswith("round,strategy,clean_accuracy")
    assert len(rows) == 3
    summary = json.loads((a / "tiny.json").read_text())
    assert summary["version"] == __version__
    assert summary["config"]["rounds"] == 1
    assert summary["config"]["attacks"]["0"]["kind"] == "backdoor"
    assert summary["peak_attack_success_rate"] is not None


def test_seed_override_changes_results(tmp_path):
    cfg = write(tmp_path, tiny())
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "s0")]) == 0
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "s9"), "--seed", "9"]) == 0
    s9 = json.loads((tmp_path / "s9" / "tiny.json").read_text())
    assert s9["config"]["master_seed"] == 9


def test_missing_idx_file_is_named(tmp_path, caplog):
    extra = f"data = idx\ndata_dir = {tmp_path}\n"
    cfg = write(tmp_path, tiny(extra=extra).replace("image_size = 8\n", ""))
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "o")]) == 1
    assert "train-images-idx3-ubyte.gz" in caplog.text


def test_unwritable_output_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", str(write(tmp_path, tiny())), "--output-dir", str(blocker / "sub")]) == 1


def test_data_dir_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDBAYES_DATA_DIR", str(tmp_path / "mnist"))
    spec = parse_text(tiny(extra="data = idx")).experiments[0]
    assert spec.data.resolve("a.gz") == tmp_path / "mnist" / "a.gz"
