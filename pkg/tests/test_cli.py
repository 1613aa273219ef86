"""Command-line interface: subcommands, flags, exit codes."""

import os

import pytest

from steerlab.cli import main

from helpers import GAMES_DIR

PENALTY = f"{GAMES_DIR}/penalty_k0"
COORDINATION = f"{GAMES_DIR}/coordination"


def test_oracle_prints_unique_se(capsys):
    code = main(["oracle", COORDINATION])
    out = capsys.readouterr().out
    assert code == 0
    assert "SE joint: (a1,a3)" in out
    assert "PASS" in out


def test_oracle_exit_nonzero_on_failed_claim(tmp_path, capsys):
    doc = open(PENALTY).read() + "\nclaim unique_se\n"
    bad = tmp_path / "two_se_game"
    bad.write_text(doc)
    code = main(["oracle", str(bad)])
    captured = capsys.readouterr()
    assert code == 1
    assert "FAIL" in captured.out


def test_missing_game_document_exit_1(capsys):
    assert main(["train", "--game", "missing.doc"]) == 1
    assert "not found" in capsys.readouterr().err


def test_unknown_flag_exit_1(capsys):
    assert main(["oracle", COORDINATION, "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exit_1(capsys):
    assert main(["transmogrify"]) == 1


def test_no_command_prints_help(capsys):
    assert main([]) == 1
    assert "COMMAND" in capsys.readouterr().out


def test_help_documents_flags(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for cmd in ("train", "sweep", "ablate", "oracle", "eval"):
        assert cmd in out


def test_subcommand_help_lists_all_flags(capsys):
    code = main(["sweep", "--help"])
    out = capsys.readouterr().out
    assert code == 0
    for flag in ("--game", "--variant", "--seeds", "--steps", "--obs-mode",
                 "--priority", "--out", "--lr", "--clip", "--entropy-coef",
                 "--gamma", "--gae-lambda"):
        assert flag in out, flag


def test_train_and_eval_roundtrip(tmp_path, capsys):
    out = str(tmp_path / "run")
    code = main([
        "train", PENALTY, "--steps", "512", "--seed", "3", "--out", out,
    ])
    captured = capsys.readouterr()
    assert code == 0
    assert "greedy trajectory" in captured.out
    assert os.path.isfile(os.path.join(out, "checkpoint"))
    assert os.path.isfile(os.path.join(out, "metrics.csv"))

    code = main(["eval", PENALTY, "--checkpoint", os.path.join(out, "checkpoint")])
    captured = capsys.readouterr()
    assert code == 0
    assert "matches oracle equilibrium path" in captured.out


def test_sweep_cli_writes_outputs(tmp_path, capsys):
    out = str(tmp_path / "sw")
    code = main([
        "sweep", PENALTY, "--seeds", "2", "--steps", "512", "--out", out,
        "--workers", "1",
    ])
    captured = capsys.readouterr()
    assert code == 0
    assert "convergence:" in captured.out
    assert os.path.isfile(os.path.join(out, "result"))
    assert os.path.isfile(os.path.join(out, "curve.csv"))

    rerun_out = str(tmp_path / "sw2")
    code = main(["sweep", "--from-manifest", os.path.join(out, "manifest"),
                 "--out", rerun_out])
    assert code == 0
    a = open(os.path.join(out, "result"), "rb").read()
    b = open(os.path.join(rerun_out, "result"), "rb").read()
    assert a == b


def test_sweep_requires_out(capsys):
    assert main(["sweep", PENALTY, "--seeds", "1"]) == 1


def test_ablate_cli(tmp_path, capsys):
    out = str(tmp_path / "abl")
    code = main([
        "ablate", PENALTY, "--seeds", "1", "--steps", "512", "--out", out,
        "--variants", "full,itb_only", "--workers", "1",
    ])
    captured = capsys.readouterr()
    assert code == 0
    assert "convergence by variant" in captured.out
    assert os.path.isfile(os.path.join(out, "comparison"))


def test_bad_priority_exit_1(capsys):
    assert main(["oracle", COORDINATION, "--priority", "nope"]) == 1
