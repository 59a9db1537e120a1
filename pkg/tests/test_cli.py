import json

import numpy as np
import pytest

from flowshift.checkpoint import load_checkpoint
from flowshift.cli import load_config, main
from flowshift.toydata import load_dataset, read_pgm

TINY = {
    "micro_batch": 4, "accumulation": 1, "disc_hidden": 8, "lr_glow": 1e-3, "lr_ictm": 1e-3,
    "glow": {"levels": 3, "steps": 1, "hidden": 4},
    "ictm": {"flows": 2, "hidden": 4},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["data", "gen", "--count", "48", "--seed", "2", "--out", str(root / "data")]) == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "glow", "--config", str(cfg), "--data", str(root / "data"), "--iters", "1",
                 "--out", str(root / "g.flck"), "--log", str(root / "g.csv")]) == 0
    assert main(["train", "ictm", "--config", str(cfg), "--data", str(root / "data"), "--iters", "1",
                 "--ckpt", str(root / "g.flck"), "--out", str(root / "t.flck")]) == 0
    return root


@pytest.mark.parametrize("argv", [[], ["fly"], ["data", "gen"], ["eval", "--bogus", "1"],
                                  ["translate", "--ckpt", "x", "--input", "y", "--target", "1", "--out", "z",
                                   "--mode", "warp"]])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1


def test_bad_config_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 1}))
    assert main(["train", "glow", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_unknown_preset_exits_1(tmp_path):
    assert main(["train", "glow", "--preset", "nope", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1


def test_eval_without_checkpoint_exits_2(workspace, capsys):
    assert main(["eval", "--data", str(workspace / "data")]) == 2
    assert main(["eval", "--ckpt", str(workspace / "missing.flck"), "--data", str(workspace / "data")]) == 2
    assert "not found" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_2(workspace, tmp_path):
    bad = tmp_path / "bad.flck"
    bad.write_bytes(b"junk")
    assert main(["inspect", "ckpt", str(bad)]) == 2


def test_data_gen_is_deterministic(workspace, tmp_path):
    assert main(["data", "gen", "--count", "48", "--seed", "2", "--out", str(tmp_path)]) == 0
    a, b = load_dataset(workspace / "data"), load_dataset(tmp_path)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.files == b.files


def test_preset_merges_with_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"glow": {"steps": 2}}))
    merged = load_config(cfg, "desk", seed=9)
    desk = load_config(None, "desk")
    assert merged.glow.steps == 2 and merged.glow.levels == desk.glow.levels
    assert merged.seed == 9


def test_training_outputs(workspace):
    assert (workspace / "g.csv").read_text().splitlines()[0] == "iter,loss,nll,bpd"
    ckpt = load_checkpoint(workspace / "t.flck")
    assert ckpt.has("glow") and ckpt.has("proto") and ckpt.has("ictm") and ckpt.has("disc")
    assert ckpt.meta["ictm_iter"] == 1


def test_inspect(workspace, capsys):
    assert main(["inspect", "ckpt", str(workspace / "t.flck")]) == 0
    out = capsys.readouterr().out
    assert '"ictm_iter": 1' in out and "glow/" in out and "tensors," in out


def test_translate_zero_strength_reproduces_input(workspace, tmp_path):
    src = sorted((workspace / "data").glob("*.pgm"))[0]
    out = tmp_path / "o.pgm"
    assert main(["translate", "--ckpt", str(workspace / "t.flck"), "--input", str(src), "--target", "3",
                 "--mode", "glow-manip", "--s", "0", "--out", str(out)]) == 0
    np.testing.assert_array_equal(read_pgm(out), read_pgm(src))


def test_translate_ictm_reports_condition(workspace, tmp_path, capsys):
    src = sorted((workspace / "data").glob("*.pgm"))[0]
    assert main(["translate", "--ckpt", str(workspace / "t.flck"), "--input", str(src), "--target", "1",
                 "--out", str(tmp_path / "o.pgm")]) == 0
    assert "recovered condition" in capsys.readouterr().out


def test_missing_translator_exits_2(workspace, tmp_path):
    src = sorted((workspace / "data").glob("*.pgm"))[0]
    assert main(["translate", "--ckpt", str(workspace / "g.flck"), "--input", str(src), "--target", "1",
                 "--out", str(tmp_path / "o.pgm")]) == 2


def test_eval_and_sample(workspace, tmp_path, capsys):
    csv_path = tmp_path / "r.csv"
    assert main(["eval", "--ckpt", str(workspace / "t.flck"), "--data", str(workspace / "data"),
                 "--mode", "glow-attr-manip", "--out", str(csv_path)]) == 0
    assert csv_path.read_text().startswith("source,target,count,")
    assert main(["sample", "--ckpt", str(workspace / "g.flck"), "--n", "2", "--out", str(tmp_path / "s")]) == 0
    assert len(list((tmp_path / "s").glob("*.pgm"))) == 2
