import json

import pytest

from cplbc.checkpoint import file_checksum
from cplbc.cli import main

FAST = ["--T0", "1", "--T1", "2", "--batch-size", "8"]


def run_cli(args, capsys):
    code = main(["--quiet"] + args)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    assert main(["--quiet", "gen", "--out", str(path), "--scenes", "16", "--test-scenes", "8",
                 "--seed", "3", "--preset", "hard-mix"]) == 0
    return path


def test_gen_easy_writes_scenes_and_manifest(tmp_path, capsys):
    code, out, _ = run_cli(["gen", "--out", str(tmp_path / "a"), "--scenes", "10", "--test-scenes", "0",
                            "--preset", "easy"], capsys)
    assert code == 0
    images = sorted((tmp_path / "a" / "train").glob("*.img"))
    assert len(images) == 10
    assert len(list((tmp_path / "a" / "train").glob("*.json"))) == 10
    first = json.loads(out)["checksum"]
    run_cli(["gen", "--out", str(tmp_path / "b"), "--scenes", "10", "--test-scenes", "0",
             "--preset", "easy"], capsys)
    assert file_checksum(tmp_path / "b" / "manifest.json") == first


def test_gen_hard_mix_records_hard_fraction(data_dir):
    assert json.loads((data_dir / "manifest.json").read_text())["hard_fraction"] == 0.2


def test_gen_rejects_unknown_preset(tmp_path, capsys):
    code, _, err = run_cli(["gen", "--out", str(tmp_path), "--scenes", "2", "--preset", "nope"], capsys)
    assert code == 2 and json.loads(err)["error"] == "invalid"


def test_train_as_writes_one_checkpoint(data_dir, tmp_path, capsys):
    code, out, _ = run_cli(["train", "--data", str(data_dir), "--strategy", "as", "--out", str(tmp_path)] + FAST,
                           capsys)
    assert code == 0
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["model_f.ckpt"]
    rows = (tmp_path / "trace.csv").read_text().strip().splitlines()
    assert len(rows) - 1 == 1 + 2
    assert json.loads((tmp_path / "report.json").read_text())["strategy"] == "as"


def test_train_cpl_writes_two_checkpoints_deterministically(data_dir, tmp_path, capsys):
    sums = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        code, _, _ = run_cli(["train", "--data", str(data_dir), "--strategy", "cpl-bc", "--prior", "esp",
                              "--seed", "1", "--out", str(out)] + FAST, capsys)
        assert code == 0
        assert sorted(p.name for p in out.glob("*.ckpt")) == ["model_f.ckpt", "model_g.ckpt"]
        sums.append([file_checksum(out / n) for n in ("model_f.ckpt", "model_g.ckpt")])
    assert sums[0] == sums[1]
    assert sums[0][0] != sums[0][1]


def test_eval_fresh_checkpoint_is_near_zero_and_repeatable(data_dir, tmp_path, capsys):
    run_cli(["train", "--data", str(data_dir), "--strategy", "as", "--out", str(tmp_path),
             "--T0", "1", "--T1", "1", "--lr", "0"], capsys)
    args = ["eval", "--checkpoint", str(tmp_path), "--data", str(data_dir)]
    code, first, _ = run_cli(args, capsys)
    assert code == 0
    assert json.loads(first)["ap50"] < 0.2
    _, second, _ = run_cli(args, capsys)
    assert first == second


def test_eval_missing_checkpoint_is_structured_error(data_dir, tmp_path, capsys):
    code, _, err = run_cli(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(data_dir)], capsys)
    assert code != 0 and json.loads(err)["error"] == "missing-checkpoint"


def test_eval_corrupt_checkpoint_is_structured_error(data_dir, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    code, _, err = run_cli(["eval", "--checkpoint", str(bad), "--data", str(data_dir)], capsys)
    assert code == 2 and json.loads(err)["error"] == "bad-magic"


def test_compare_two_strategies_two_seeds(data_dir, tmp_path, capsys):
    code, out, _ = run_cli(["compare", "--data", str(data_dir), "--strategies", "es,as", "--seeds", "0,1",
                            "--out", str(tmp_path), "--plot"] + FAST, capsys)
    assert code == 0
    comp = json.loads((tmp_path / "comparison.json").read_text())
    assert sum(len(r["seeds"]) for r in comp["reports"]) == 4
    rows = (tmp_path / "table.md").read_text().strip().splitlines()[2:]
    assert [r.split("|")[1].strip() for r in rows] == ["AS", "ES"]
    assert len((tmp_path / "per_seed.csv").read_text().strip().splitlines()) == 1 + 4
    assert (tmp_path / "schedule.svg").exists()


def test_compare_rejects_unknown_strategy(data_dir, tmp_path, capsys):
    code, _, err = run_cli(["compare", "--data", str(data_dir), "--strategies", "xyz", "--out", str(tmp_path)],
                           capsys)
    assert code == 2 and json.loads(err)["error"] == "bad-flag"


def test_settings_echo_on_stderr(tmp_path, capsys):
    main(["gen", "--out", str(tmp_path), "--scenes", "1", "--test-scenes", "0", "--preset", "easy"])
    err = capsys.readouterr().err
    assert err.startswith("settings: ") and '"preset": "easy"' in err
