import csv
import json

import numpy as np
import pytest

from egopose.cli import load_run_config, main
from egopose.metrics import MetricsReport

TINY = ["--set", "data.num_samples=12", "--set", "data.num_joints=4",
        "--set", "data.image_size=[16, 16]",
        "--set", "model.feature_channels=8", "--set", "model.token_dim=16",
        "--set", "model.num_layers=1", "--set", "model.num_heads=2",
        "--set", "model.num_points=2", "--set", "model.ppn_hidden=16",
        "--set", "model.encoder_channels=[4, 8, 8]",
        "--set", "train.epochs=1", "--set", "train.decay_epochs=[]",
        "--set", "train.batch_size=4"]


def run(cmd, out, *extra):
    return main([cmd, "--out", str(out), *TINY, *extra])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("generate", out) == 0
    assert run("train", out) == 0
    return out


def test_overrides_and_seed():
    cfg = load_run_config(None, ["train.epochs=3", "model.norm_placement=post", "data.prefix=x"],
                          seed=7)
    assert cfg["train"]["epochs"] == 3
    assert cfg["model"]["norm_placement"] == "post"
    assert cfg["data"]["prefix"] == "x" and cfg["seed"] == 7


def test_config_file_merged(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"epochs": 5}, "sigmas": [1.0]}))
    cfg = load_run_config(path, ["train.batch_size=2"])
    assert cfg["train"] == {"epochs": 5, "batch_size": 2}
    assert cfg["sigmas"] == [1.0] and cfg["data"]["views"] == 2


def test_train_then_eval_writes_report(pipeline, capsys):
    assert run("eval", pipeline) == 0
    report = MetricsReport.from_json(pipeline / "report.json")
    assert report.num_samples == 12 and report.mpjpe >= 0
    rows = list(csv.reader(open(pipeline / "cdf.csv")))
    assert rows[0] == ["threshold_mm", "fraction"] and len(rows) == len(report.cdf) + 1
    log = [json.loads(x) for x in (pipeline / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 1 and {"step", "epoch", "lr", "loss", "val_mpjpe"} <= set(log[0])
    assert "MPJPE" in capsys.readouterr().out


def test_eval_is_idempotent(pipeline):
    run("eval", pipeline)
    first = (pipeline / "report.json").read_bytes()
    run("eval", pipeline)
    assert (pipeline / "report.json").read_bytes() == first


def test_train_is_idempotent(pipeline, tmp_path):
    other = tmp_path / "again"
    assert run("generate", other) == 0
    assert run("train", other) == 0
    assert (other / "model.ckpt").read_bytes() == (pipeline / "model.ckpt").read_bytes()
    assert (other / "train_log.jsonl").read_bytes() == (pipeline / "train_log.jsonl").read_bytes()


def test_ablate_noise_csv(pipeline):
    assert run("ablate-noise", pipeline, "--set", "sigmas=[0, 20]") == 0
    rows = list(csv.DictReader(open(pipeline / "ablation_noise.csv")))
    assert [float(r["sigma_mm"]) for r in rows] == [0.0, 20.0]
    assert float(rows[0]["proposal_mpjpe"]) == 0.0


def test_export_attention_csv(pipeline):
    assert run("export-attn", pipeline) == 0
    rows = list(csv.reader(open(pipeline / "attention.csv")))
    assert len(rows) == 5 and len(rows[0]) == 5
    mat = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    np.testing.assert_allclose(mat.sum(1), 1.0, atol=1e-9)


def test_pretrain_then_train_from_encoder(pipeline, tmp_path):
    out = tmp_path / "pre"
    ds = ["--set", f"dataset={pipeline / 'dataset'}"]
    assert run("pretrain", out, *ds) == 0
    assert (out / "encoder_stripped.ckpt").stat().st_size < (out / "encoder.ckpt").stat().st_size
    assert run("train", out, *ds, "--set", f"init_encoder={out / 'encoder_stripped.ckpt'}") == 0
    assert (out / "model.ckpt").exists()


def test_eval_on_empty_dir_reports_no_manifest(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    (tmp_path / "model.ckpt").write_bytes(b"")
    code = main(["eval", "--out", str(tmp_path), "--set", f"dataset={empty}",
                 "--set", f"checkpoint={tmp_path / 'model.ckpt'}"])
    assert code != 0
    assert "no manifest" in capsys.readouterr().err


def test_missing_checkpoint_named(pipeline, tmp_path, capsys):
    missing = tmp_path / "absent.ckpt"
    code = main(["eval", "--out", str(tmp_path), "--set", f"dataset={pipeline / 'dataset'}",
                 "--set", f"checkpoint={missing}"])
    assert code != 0
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("bad", [["--set", "train.epochs=0"], ["--set", "model.num_layers=-1"],
                                 ["--set", "model.bogus=1"], ["--set", "noequals"]])
def test_invalid_config_prints_usage(pipeline, capsys, bad):
    code = main(["train", "--out", str(pipeline), *bad])
    assert code == 2
    assert "usage:" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path), "--config", str(tmp_path / "nope.json")])
    assert code != 0 and "nope.json" in capsys.readouterr().err


def test_unknown_command_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["dance"])
    assert exc.value.code != 0


def test_gradcheck_command(tmp_path, capsys):
    code = main(["gradcheck", "--out", str(tmp_path), "--set", "gradcheck.max_coords=3"])
    err = json.loads((tmp_path / "gradcheck.json").read_text())["max_rel_error"]
    assert code == 0 and err < 1e-4
    assert "max relative error" in capsys.readouterr().out
