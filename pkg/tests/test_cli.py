import csv
import json
import subprocess
import sys

import pytest

from pointca import cli
from pointca.attack import AttackConfig

TINY_DATA = ["--objects_per_class", "3", "--views_per_object", "2", "--test_objects_per_class", "2",
             "--complete_size", "128", "--partial_size", "32", "--raster", "32",
             "--sources_per_class", "1", "--targets_topN", "1", "--pair_limit", "3"]
TINY_MODEL = ["--enc_hidden", "8", "--feat", "16", "--dec_hidden", "16", "--epochs", "2", "--batch_size", "8"]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


class TestHelp:
    @pytest.mark.parametrize("command", sorted(cli.COMMANDS))
    def test_every_key_listed(self, command, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main([command, "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for key in cli.COMMANDS[command][1]:
            assert f"--{key}" in text

    def test_attack_exposes_every_config_field(self):
        opts = cli.COMMANDS["attack"][1]
        assert set(AttackConfig.__dataclass_fields__) <= set(opts)
        assert all(opts[k].default == getattr(AttackConfig(), k) for k in AttackConfig.__dataclass_fields__)

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "pointca.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        assert "gen-data" in res.stdout


class TestConfigResolution:
    def test_precedence(self, tmp_path, monkeypatch):
        (tmp_path / "c.json").write_text(json.dumps({"eta": 2.5, "iterations": 50, "output_dir": "from_file"}))
        args = cli.build_parser().parse_args(["attack", "--config", str(tmp_path / "c.json"), "--eta", "1.5"])
        monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)
        cfg = cli.resolve_config("attack", args)
        assert cfg["eta"] == 1.5 and cfg["iterations"] == 50 and cfg["output_dir"] == "from_file"
        assert cfg["k"] == 8

    def test_env_overrides_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        args = cli.build_parser().parse_args(["gen-data"])
        assert cli.resolve_config("gen-data", args)["output_dir"] == str(tmp_path / "env")
        args = cli.build_parser().parse_args(["gen-data", "--output_dir", "flag"])
        assert cli.resolve_config("gen-data", args)["output_dir"] == "flag"

    def test_list_and_bool_flags(self):
        args = cli.build_parser().parse_args(["defend", "--srs_drop_rates", "0.1,0.5", "--sor_ks", "[2, 4]"])
        cfg = cli.resolve_config("defend", args)
        assert cfg["srs_drop_rates"] == [0.1, 0.5] and cfg["sor_ks"] == [2, 4]
        args = cli.build_parser().parse_args(["attack", "--with_emd", "yes"])
        assert cli.resolve_config("attack", args)["with_emd"] is True

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"etaa": 1.0}))
        code, _, err = run(["attack", "--config", str(tmp_path / "c.json")], capsys)
        assert code == cli.EXIT_CONFIG
        assert "etaa" in err

    @pytest.mark.parametrize("argv", [["attack", "--eta", "-1"], ["attack", "--iterations", "1.5"],
                                      ["attack", "--with_emd", "maybe"], ["attack", "--method", "bogus"],
                                      ["attack", "--budget_kind", "linf"], ["transfer", "--models", "{}"],
                                      ["report"]])
    def test_bad_values_exit_2(self, argv, capsys, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        code, _, _ = run(argv, capsys)
        assert code == cli.EXIT_CONFIG

    def test_missing_files_exit_3(self, tmp_path, capsys, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert run(["train", "--dataset", "nowhere"], capsys)[0] == cli.EXIT_DATA
        (tmp_path / "m.bin").write_bytes(b"garbage")
        assert run(["attack", "--model", "m.bin"], capsys)[0] == cli.EXIT_DATA
        assert run(["report", "--campaigns", "missing.csv"], capsys)[0] == cli.EXIT_DATA


def test_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)

    code, out, _ = run(["gen-data", *TINY_DATA], capsys)
    assert code == 0 and out["pairs"] == 3
    code, out, _ = run(["train", *TINY_MODEL], capsys)
    assert code == 0 and (tmp_path / "models" / "completion.bin").exists()
    code, _, _ = run(["train", *TINY_MODEL, "--name", "other", "--model_seed", "1"], capsys)
    assert code == 0
    code, out, _ = run(["train-classifier", "--enc_hidden", "8", "--feat", "8", "--head_hidden", "8",
                        "--epochs", "1"], capsys)
    assert code == 0 and 0 <= out["test_partial_accuracy"] <= 1

    code, out, _ = run(["attack", "--iterations", "3"], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "runs" / "attack" / "campaign.csv")))
    assert len(rows) == 3 and len(list((tmp_path / "runs" / "attack" / "adv").glob("*.xyz"))) == 3
    saved = json.loads((tmp_path / "runs" / "attack" / "manifest.json").read_text())
    assert all(e["t_nre_denominator"] > 0 for e in saved["entries"])

    code, out, _ = run(["attack", "--iterations", "2", "--sweep_field", "eta", "--sweep_values", "1.5,5",
                        "--output_dir", "runs/sweep"], capsys)
    assert code == 0 and len(out["campaigns"]) == 2

    code, out, _ = run(["defend", "--srs_drop_rates", "0.2", "--or_thresholds", "0.2", "--sor_ks", "2",
                        "--sor_alphas", "1.1"], capsys)
    assert code == 0 and out["rows"] == 3 * 2 * 5

    code, out, _ = run(["report", "--campaigns", "runs/attack/campaign.csv,runs/sweep/pointca_eta1.5.csv",
                        "--defense_csv", "runs/defend/defense.csv", "--manifest", "data/manifest.json",
                        "--model", "models/completion.bin", "--classifier", "models/classifier.bin",
                        "--adversarial_dir", "runs/attack/adv"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "runs" / "report" / "report.json").read_text())
    assert {"aggregates", "defenses", "semantic"} <= set(report)
    assert (tmp_path / "runs" / "report" / "relative_asr.csv").exists()

    code, _, err = run(["report", "--campaigns", "runs/attack/campaign.csv", "--model", "models/completion.bin"],
                       capsys)
    assert code == cli.EXIT_CONFIG and "semantic" in err

    models = json.dumps({"a": "models/completion.bin", "b": "models/other.bin"})
    code, out, _ = run(["transfer", "--models", models, "--iterations", "2"], capsys)
    assert code == 0
    matrix = json.loads((tmp_path / "runs" / "transfer" / "transfer.json").read_text())
    assert set(matrix) == {"a", "b"} and all(set(r) == {"a", "b"} for r in matrix.values())

    # a classifier file where a completion model is expected
    code, _, _ = run(["attack", "--model", "models/classifier.bin"], capsys)
    assert code == cli.EXIT_CONFIG
