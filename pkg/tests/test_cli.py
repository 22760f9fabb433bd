import json

import numpy as np
import pytest

from xmoco import gradcheck
from xmoco.cli import EXIT_CHECK, EXIT_INVALID, EXIT_OK, build_parser, main
from xmoco.matrix import load_xmc1, save_xmc1
from xmoco.training import FIELD_TYPES, TrainConfig

from reference import flipped_reg_sign

TINY = ["--classes", "3", "--per-class", "20", "--d-in", "6", "--hidden", "8", "--out-dim", "4",
        "--K", "16", "--batch-size", "8", "--epochs", "2"]


def test_gen_data_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert main(["gen-data", "--seed", "7", "--per-class", "30", "--out", str(p)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().startswith("# blobs classes=3")


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", *TINY, "--out", str(out)]) == EXIT_OK
    assert (out / "metrics.jsonl").exists() and (out / "config.txt").exists()
    report = tmp_path / "knn.json"
    capsys.readouterr()
    assert main(["eval-knn", "--checkpoint", str(out / "checkpoint.xmck"), "--k", "3", "--out", str(report)]) == EXIT_OK
    data = json.loads(report.read_text())
    assert data["k"] == 3 and 0 <= data["knn_accuracy"] <= 1
    assert json.loads(capsys.readouterr().out) == data
    lin = tmp_path / "lin.json"
    assert main(["eval-linear", "--checkpoint", str(out / "checkpoint.xmck"), "--steps", "20", "--out", str(lin)]) == EXIT_OK
    assert 0 <= json.loads(lin.read_text())["linear_accuracy"] <= 1


def test_train_on_external_csv(tmp_path):
    data = tmp_path / "d.csv"
    main(["gen-data", "--per-class", "20", "--d-in", "5", "--out", str(data)])
    out = tmp_path / "run"
    args = ["train", "--data-path", str(data), "--hidden", "8", "--out-dim", "4", "--K", "16",
            "--batch-size", "8", "--epochs", "1", "--out", str(out)]
    assert main(args) == EXIT_OK


def test_sinkhorn_command(tmp_path):
    p = np.random.default_rng(0).dirichlet(np.ones(5), size=3).T
    src, dst = tmp_path / "p.xmc", tmp_path / "y.xmc"
    save_xmc1(src, p)
    assert main(["sinkhorn", "--in", str(src), "--out", str(dst), "--xi", "0.8", "--lambda", "2"]) == EXIT_OK
    y = load_xmc1(dst)
    assert y.shape == (5, 3)
    np.testing.assert_allclose(y.sum(axis=0), 1.0, atol=1e-15)
    assert main(["sinkhorn", "--in", str(src), "--out", str(dst), "--xi", "0.01"]) == EXIT_INVALID


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--instances", "4"]) == EXIT_OK
    assert "gradcheck PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--instances", "3", "--k", "1"]) == EXIT_OK


def test_gradcheck_mutation_fails(monkeypatch):
    original = gradcheck.run_all
    monkeypatch.setattr(gradcheck, "run_all", lambda **kw: original(loss_fn=flipped_reg_sign, **kw))
    assert main(["gradcheck", "--instances", "4"]) == EXIT_CHECK


def test_validation_errors(tmp_path, capsys):
    assert main(["train", "--bogus", "1", "--out", str(tmp_path)]) == EXIT_INVALID
    assert main(["train", "--tau", "0", "--out", str(tmp_path / "x")]) == EXIT_INVALID
    assert not (tmp_path / "x").exists()
    assert main(["nope"]) == EXIT_INVALID
    conf = tmp_path / "bad.conf"
    conf.write_text("xi = 0.9\nfoo = 2\n")
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "y")]) == EXIT_INVALID
    assert "bad.conf:2" in capsys.readouterr().err


def test_missing_input_is_runtime_failure(tmp_path):
    assert main(["sinkhorn", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2


def test_ablate_loss_switches(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["ablate", "--axis", "loss-switches", *TINY, "--out", str(out)]) == EXIT_OK
    lines = [x for x in out.read_text().splitlines() if not x.startswith("#")]
    assert lines[0] == "value,knn_accuracy,wall_time,per_seed,error"
    assert [x.split(",")[0] for x in lines[1:]] == ["full", "labels_only", "xsim_only", "classical"]
    assert "# xi = 0.9" in out.read_text()


def test_ablate_xi_single_value(tmp_path):
    out = tmp_path / "xi.csv"
    assert main(["ablate", "--axis", "xi", "--values", "1.0", *TINY, "--out", str(out)]) == EXIT_OK
    rows = [x for x in out.read_text().splitlines() if not x.startswith("#")][1:]
    assert len(rows) == 1 and rows[0].startswith("1.0,")
    assert main(["ablate", "--axis", "xi", *TINY, "--out", str(out)]) == EXIT_INVALID


def test_help_lists_flags_with_defaults():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"gen-data", "train", "eval-knn", "eval-linear", "sinkhorn", "gradcheck", "ablate"}
    for name, p in sub.items():
        text = p.format_help()
        assert "--" in text
        if name in ("train", "ablate"):
            defaults = TrainConfig()
            for field in FIELD_TYPES:
                flag = "--" + field.replace("_", "-")
                assert flag in text
            assert f"(default: {defaults.tau!r})" in text
            assert "(default: 256)" in text


@pytest.mark.parametrize("cmd", ["gen-data", "train", "eval-knn", "eval-linear", "sinkhorn", "gradcheck", "ablate"])
def test_help_exits_cleanly(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    assert "default" in capsys.readouterr().out
