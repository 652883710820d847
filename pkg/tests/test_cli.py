import pytest

from alnmil.cli import main

from conftest import write_config


def test_synth_and_full_run(tmp_path, small_dataset, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--n-patients", "6", "--seed", "1"]) == 0
    assert len(list((tmp_path / "d" / "slides").glob("*.png"))) == 6
    cfg = write_config(tmp_path / "c.toml", small_dataset, epochs=2)
    out = str(tmp_path / "run")
    for cmd in ("tile", "bags", "train", "eval"):
        assert main([cmd, "--config", str(cfg), "--out", out]) == 0
    assert "auroc" in capsys.readouterr().out
    assert main(["report", out, "--out", str(tmp_path / "r.md")]) == 0
    assert "| AUROC |" in (tmp_path / "r.md").read_text()


def test_error_line(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "none")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: MissingInputError: ") and err.count("\n") == 1


def test_config_error(tmp_path, capsys):
    assert main(["tile", "--set", "mode=dlcnbc-ws", "--set", "masks_dir=m"]) == 1
    assert capsys.readouterr().err.startswith("error: ConfigurationError: ")


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2
