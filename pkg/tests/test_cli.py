"""Tests for the `progtrans` command line."""

import json

import pytest

from builders import TINY_WORLD
from progtrans import cli
from progtrans.cli import EXIT_FAILURE, EXIT_INVALID, EXIT_OK, main
from progtrans.data_model import Detection, load_dataset, save_detections
from progtrans.pipeline import RunReport
from progtrans.synthworld import WorldConfig, load_world_config

RUN_CFG = "N = 0\ntau = 0.5\nocud_steps = 24\nmil_steps = 16\nseed = 7\nworld = world.cfg\n"


@pytest.fixture
def world_dir(tmp_path):
    cfg = tmp_path / "world.cfg"
    cfg.write_text("".join(f"{k} = {v}\n" for k, v in TINY_WORLD.items()))
    assert main(["gen-world", str(cfg), str(tmp_path / "data")]) == EXIT_OK
    return tmp_path


def truth_as_detections(ds, score=0.9):
    return {
        img.id: [Detection(bbox=a.bbox, category=a.category, score=score) for a in img.hidden_gt]
        for img in ds.images
    }


def test_gen_world_writes_datasets(world_dir):
    data = world_dir / "data"
    assert sorted(p.name for p in data.iterdir()) == [
        "source_train.json",
        "target_test.json",
        "target_train.json",
        "world.cfg",
    ]
    assert load_world_config(data / "world.cfg") == WorldConfig(**TINY_WORLD)
    assert len(load_dataset(data / "target_test.json").images) == 8


def test_run_then_report(world_dir, capsys):
    cfg = world_dir / "run.cfg"
    cfg.write_text(RUN_CFG)
    out = world_dir / "report.json"
    assert main(["run", str(cfg), "--out", str(out), "--checkpoints", str(world_dir / "w")]) == 0
    report = RunReport.from_json(out.read_text())
    assert len(report.iterations) == 1
    assert (world_dir / "w" / "mil_0.json").exists()

    assert main(["report", str(out)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("iteration,map,corloc")
    assert lines[1].startswith("0,")

    md = world_dir / "report.md"
    assert main(["report", str(out), "--format", "md", "--out", str(md)]) == EXIT_OK
    assert md.read_text().startswith("| iteration |")


def test_ablate_writes_one_report_per_value(world_dir):
    cfg = world_dir / "run.cfg"
    cfg.write_text(RUN_CFG)
    out = world_dir / "ablation.json"
    args = ["ablate", str(cfg), "--axis", "eta", "--values", "0, 1", "--out", str(out)]
    assert main(args) == EXIT_OK
    payload = json.loads(out.read_text())
    assert [(p["axis"], p["value"]) for p in payload] == [("eta", "0"), ("eta", "1")]
    assert [p["report"]["config"]["eta"] for p in payload] == [0.0, 1.0]


def test_eval_perfect_detections(world_dir, capsys):
    gt = world_dir / "data" / "target_train.json"
    dets = world_dir / "dets.json"
    save_detections(truth_as_detections(load_dataset(gt)), dets)
    assert main(["eval", "--dets", str(dets), "--gt", str(gt)]) == EXIT_OK
    rows = json.loads(capsys.readouterr().out)
    assert rows[-1] == {"category": "mean", "ap": 1.0, "corloc": 1.0}


def test_eval_test_split_has_no_corloc(world_dir):
    gt = world_dir / "data" / "target_test.json"
    dets = world_dir / "dets.json"
    save_detections(truth_as_detections(load_dataset(gt)), dets)
    out = world_dir / "metrics.csv"
    args = ["eval", "--dets", str(dets), "--gt", str(gt), "--method", "all_points"]
    assert main(args + ["--out", str(out)]) == EXIT_OK
    assert out.read_text().splitlines()[-1] == "mean,1.0,"


def test_eval_rejects_iou_out_of_range(world_dir, capsys):
    gt = world_dir / "data" / "target_test.json"
    assert main(["eval", "--dets", str(gt), "--gt", str(gt), "--iou", "1.5"]) == EXIT_INVALID
    assert "usage: progtrans eval" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["ablate", "run.cfg", "--axis", "mu", "--values", "1"],
        ["ablate", "run.cfg", "--values", "1"],
        ["eval", "--gt", "gt.json"],
        ["mine", "--dets", "d.json", "--ds", "ds.json", "--tau", "high"],
        ["fly"],
        [],
    ],
)
def test_usage_errors_exit_one(argv):
    assert main(argv) == EXIT_INVALID


def test_mine_target_from_detections(world_dir, capsys):
    ds_path = world_dir / "data" / "target_train.json"
    dets = world_dir / "dets.json"
    save_detections(truth_as_detections(load_dataset(ds_path)), dets)
    out = world_dir / "mined.json"
    assert main(["mine", "--dets", str(dets), "--ds", str(ds_path), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["domain"] == "target"
    assert (summary["precision"], summary["recall"]) == (1.0, 1.0)
    rows = json.loads(out.read_text())
    assert rows and all(r["origin"] == "pseudo" for r in rows)


def test_mine_source_never_returns_annotated_boxes(world_dir, capsys):
    ds_path = world_dir / "data" / "source_train.json"
    dets = world_dir / "dets.json"
    save_detections(truth_as_detections(load_dataset(ds_path)), dets)
    assert main(["mine", "--dets", str(dets), "--ds", str(ds_path), "--tau", "0.5"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["domain"] == "source"
    assert summary["precision"] == 1.0


def test_invalid_inputs_exit_one(world_dir):
    bad = world_dir / "bad.cfg"
    bad.write_text("mu = 3\n")
    assert main(["run", str(bad)]) == EXIT_INVALID
    assert main(["gen-world", str(world_dir / "missing.cfg"), str(world_dir)]) == EXIT_INVALID
    gt = world_dir / "data" / "target_test.json"
    missing = str(world_dir / "missing.json")
    assert main(["eval", "--dets", missing, "--gt", str(gt)]) == EXIT_INVALID
    assert main(["report", missing]) == EXIT_INVALID
    cfg = world_dir / "run.cfg"
    cfg.write_text(RUN_CFG)
    assert main(["ablate", str(cfg), "--axis", "tau", "--values", "1.5"]) == EXIT_INVALID
    assert main(["ablate", str(cfg), "--axis", "tau", "--values", " , "]) == EXIT_INVALID


def test_runtime_failure_exits_two(world_dir, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "run", broken)
    cfg = world_dir / "run.cfg"
    cfg.write_text(RUN_CFG)
    assert main(["run", str(cfg)]) == EXIT_FAILURE
