import csv
import json

import pytest

from mpdf.cli import main
from mpdf.evaluation import write_proposals
from mpdf.synthdata import load_manifest

GEN_YAML = """\
generator:
  T_v: 32
  D_v: 6
  B: 5
  r: 2
  latent_dim: 4
  private_dim: 2
dataset:
  n_per_category: 2
  split: [0.5, 0.5]
model:
  f: 8
  T_v: 32
  D_v: 6
  B: 5
  r: 2
  w: 3
  N: 1
  L: 1
  n_layers: 1
  groupnorm_groups: 2
  n_heads: 2
train:
  epochs: 1
  batch_size: 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.yaml"
    cfg.write_text(GEN_YAML)
    assert main(["generate-data", "--config", str(cfg), "--out", str(root / "data"), "--seed", "4"]) == 0
    return root, cfg


def test_generate_data_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "again"), "--seed", "4"]) == 0
    assert (root / "data" / "manifest.jsonl").read_bytes() == (tmp_path / "again" / "manifest.jsonl").read_bytes()


def test_generate_data_counts(tmp_path, workspace):
    _, cfg = workspace
    rc = main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "d"), "--counts", "PARTIAL=3,RVRA=2"])
    assert rc == 0
    cats = sorted(e.category_tag for e in load_manifest(tmp_path / "d").entries)
    assert cats == ["PARTIAL"] * 3 + ["RVRA"] * 2


def test_eval_perfect_proposals(workspace, tmp_path, capsys):
    root, _ = workspace
    m = load_manifest(root / "data")
    test = m.split("test")
    props = {e.sample_id: [(s, e2, 0.9) for s, e2 in e.segments] for e in test}
    write_proposals(tmp_path / "p.jsonl", props)
    rc = main(["eval", "--data", str(root / "data"), "--proposals", str(tmp_path / "p.jsonl"), "--out", str(tmp_path / "r.json")])
    assert rc == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["AP@0.5"] == 1.0


def test_eval_unknown_sample_fails(workspace, tmp_path, capsys):
    root, _ = workspace
    (tmp_path / "p.jsonl").write_text(json.dumps({"sample_id": "nope", "start": 0, "end": 1, "score": 0.5}) + "\n")
    rc = main(["eval", "--data", str(root / "data"), "--proposals", str(tmp_path / "p.jsonl")])
    err = capsys.readouterr().err
    assert rc != 0 and err.count("\n") == 1 and "error" in err


def test_missing_dataset_fails(tmp_path, capsys):
    assert main(["eval", "--data", str(tmp_path / "none"), "--proposals", "x"]) != 0
    assert "error" in capsys.readouterr().err


def test_train_eval_and_heatmaps(workspace, tmp_path):
    root, cfg = workspace
    data = str(root / "data")
    assert main(["train-cls", "--data", data, "--out", str(tmp_path / "cls"), "--config", str(cfg)]) == 0
    assert (tmp_path / "cls" / "metrics.csv").exists()
    assert main(["eval", "--data", data, "--checkpoint", str(tmp_path / "cls" / "model.ckpt"),
                 "--out", str(tmp_path / "r.json")]) == 0
    assert set(json.loads((tmp_path / "r.json").read_text())) == {"task", "ACC", "AP", "AUC"}

    sid = load_manifest(root / "data").split("test")[0].sample_id
    out = tmp_path / "hm"
    assert main(["export-heatmaps", "--checkpoint", str(tmp_path / "cls" / "model.ckpt"), "--data", data,
                 "--sample", sid, "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / sid / "visual.csv")))
    assert len(rows) == 32 and len(rows[0]) == 8
    assert len(list(csv.reader(open(out / sid / "cross.csv")))[0]) == 16
    assert (out / sid / "heatmap.png").exists()
    assert sid in json.loads((out / "summary.json").read_text())["samples"]


def test_train_loc_writes_proposals(workspace, tmp_path):
    root, cfg = workspace
    data = str(root / "data")
    assert main(["train-loc", "--data", data, "--out", str(tmp_path / "loc"), "--config", str(cfg),
                 "--score-threshold", "0.05"]) == 0
    assert (tmp_path / "loc" / "proposals.jsonl").exists()
    rc = main(["eval", "--data", data, "--proposals", str(tmp_path / "loc" / "proposals.jsonl")])
    assert rc == 0


def test_config_mismatch_fails(workspace, tmp_path, capsys):
    root, cfg = workspace
    rc = main(["train-cls", "--data", str(root / "data"), "--out", str(tmp_path / "x"), "--config", str(cfg),
               "--D-v", "7"])
    assert rc != 0
    assert "D_v" in capsys.readouterr().err


def test_ablate_kernel_grid(workspace, tmp_path, monkeypatch):
    import mpdf.trainer as trainer

    # one cheap cell per grid entry is enough to check the report shape
    root, cfg = workspace
    calls = []

    def fake_fit(task, config, train, held, **kw):
        calls.append(config.w)
        return trainer.TrainResult(model=None, config=config, task=task,
                                   best_metrics={"ACC": 0.5, "AP": 0.5, "AUC": 0.5})

    monkeypatch.setattr(trainer, "fit", fake_fit)
    rc = main(["ablate", "--data", str(root / "data"), "--grid", "kernel", "--out", str(tmp_path / "k.csv"),
               "--config", str(cfg)])
    assert rc == 0
    rows = list(csv.DictReader(open(tmp_path / "k.csv")))
    assert [r["w"] for r in rows] == ["1", "3", "5", "7", "9", "11", "13", "15"]
    assert calls == [1, 3, 5, 7, 9, 11, 13, 15]


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train-cls", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--w", "--feature-set", "--no-contrastive-enabled", "--epochs", "--seed"):
        assert flag in out
