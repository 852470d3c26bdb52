import json

import pytest

from funmixed.cli import main
from funmixed.pipeline import FITS_FILE, MANIFEST_FILE, TESTS_FILE


def test_simulate_then_all(tmp_path, capsys):
    data = tmp_path / "in.csv"
    assert main(["simulate", "--output", str(data), "--n-genes", "4", "--n-planted", "1", "--seed", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["status"] == "ok" and out["summary"]["planted"] == ["G00000"]
    code = main(
        ["all", "--input", str(data), "--output-dir", str(tmp_path / "o"), "--permutations", "4", "--simplex-budget", "5", "--n-grid", "40"]
    )
    assert code == 0
    summary = json.loads(capsys.readouterr().out)["summary"]
    assert summary["fit"]["genes"] == 4
    for name in (FITS_FILE, TESTS_FILE, MANIFEST_FILE):
        assert (tmp_path / "o" / name).exists()


def test_config_file_with_flag_override(tmp_path, capsys):
    data = tmp_path / "in.csv"
    main(["simulate", "--output", str(data), "--n-genes", "3"])
    ini = tmp_path / "run.ini"
    ini.write_text(f"[run]\ninput = {data}\noutput_dir = {tmp_path / 'o'}\nsimplex_budget = 3\npermutations = 2\nn_grid = 20\nseed = 4\n")
    capsys.readouterr()
    assert main(["fit", "--config", str(ini), "--seed", "9"]) == 0
    manifest = json.loads((tmp_path / "o" / MANIFEST_FILE).read_text())
    assert manifest["seed"] == 9 and manifest["config"]["simplex_budget"] == 3
    assert main(["fpca", "--config", str(ini)]) == 0


def test_errors_are_reported_as_json(tmp_path, capsys):
    assert main(["fit", "--input", str(tmp_path / "missing.csv"), "--output-dir", str(tmp_path / "o")]) != 0
    err = json.loads(capsys.readouterr().err)
    assert err["status"] == "error" and err["command"] == "fit"
    assert main(["fit"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ValueError"
    bad = tmp_path / "bad.csv"
    bad.write_text("")
    assert main(["all", "--input", str(bad), "--output-dir", str(tmp_path / "o")]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "SchemaError"


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--no-such-flag"])
    assert exc.value.code == 2
