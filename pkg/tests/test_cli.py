import numpy as np
import pytest

from ctan import benchmark
from ctan.backbone import extract_features, init_model
from ctan.cli import main
from ctan.config import load_config
from ctan.data import build_clipset, clip_loader, load_manifest
from ctan.serialization import load_checkpoint
from ctan.tensor import Tensor

TINY = """
run.size = 16
backbone.channels = (4, 4, 4)
backbone.hidden_action = 8
backbone.hidden_domain = 8
train.stage1_epochs = 1
train.stage2_epochs = 1
train.batch_size = 8
synthetic.clips_per_class_per_domain = 5
synthetic.spatial = (16, 16)
synthetic.pattern_size = 2.0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["synth-data", "--config", str(root / "tiny.cfg"), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "tiny.cfg"), "--out", str(root / "run")]) == 0
    return root


def test_init_config_round_trips(tmp_path, capsys):
    assert main(["init-config"]) == 0
    text = capsys.readouterr().out
    assert main(["init-config", "--out", str(tmp_path / "d.cfg")]) == 0
    assert (tmp_path / "d.cfg").read_text() == text
    load_config(tmp_path / "d.cfg")


def test_synth_data_outputs(workspace):
    data = workspace / "data"
    for domain in ("source", "target"):
        for split in ("train", "val", "test"):
            assert (data / f"{domain}_{split}.csv").exists() and (data / f"{domain}_{split}.header").exists()
    assert len(list((data / "clips").glob("*.ctan"))) == 2 * 4 * 5


def test_train_outputs(workspace):
    run = workspace / "run"
    assert sorted(p.name for p in run.iterdir()) == ["config.cfg", "metrics.csv", "stage1.ckpt", "stage2.ckpt"]
    lines = (run / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,stage,lambda,l_task,l_domain,source_acc,target_val_acc" and len(lines) == 3


def test_train_is_byte_deterministic(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "tiny.cfg"), "--out", str(tmp_path)]) == 0
    for name in ("metrics.csv", "stage1.ckpt", "stage2.ckpt", "config.cfg"):
        if name == "config.cfg":
            continue  # records its own output_dir
        assert (tmp_path / name).read_bytes() == (workspace / "run" / name).read_bytes()


def test_source_only_writes_one_checkpoint(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "tiny.cfg"), "--out", str(tmp_path), "--source-only"]) == 0
    assert not (tmp_path / "stage2.ckpt").exists()
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 2


def test_eval_matches_in_process_accuracy(workspace, capsys):
    assert main(["train", "--config", str(workspace / "tiny.cfg"), "--out", str(workspace / "run2")]) == 0
    expected = capsys.readouterr().out.strip().splitlines()[-1].split("=")[1]
    assert main(["eval", "--checkpoint", str(workspace / "run2" / "stage2.ckpt"),
                 "--manifest", str(workspace / "data" / "target_test.csv")]) == 0
    assert capsys.readouterr().out.strip() == f"accuracy={expected}"


def test_export_embeddings(workspace, tmp_path):
    out = tmp_path / "emb.csv"
    ckpt = workspace / "run" / "stage2.ckpt"
    manifest_path = workspace / "data" / "target_val.csv"
    assert main(["export-embeddings", "--checkpoint", str(ckpt), "--manifest", str(manifest_path),
                 "--out", str(out)]) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()]
    manifest = load_manifest(manifest_path)
    assert len(rows) == len(manifest.records) and all(len(r) == 4 + 2 for r in rows)
    assert [int(r[-2]) for r in rows] == [rec.label for rec in manifest.records]
    # cross-check against the extractor run in-process
    cfg = load_config(workspace / "run" / "config.cfg", check_paths=False)
    clips = build_clipset(manifest.records, clip_loader(workspace / "data" / "clips"), cfg.size)
    bundle = init_model(benchmark.fit_backbone(cfg.backbone, clips), 4, 0)
    bundle.load_arrays(load_checkpoint(ckpt))
    emb = extract_features(clips.batch(range(len(clips)), False), bundle).data
    np.testing.assert_allclose(np.array([[float(v) for v in r[:-2]] for r in rows]), emb, atol=1e-6)
    again = tmp_path / "again.csv"
    main(["export-embeddings", "--checkpoint", str(ckpt), "--manifest", str(manifest_path), "--out", str(again)])
    assert again.read_bytes() == out.read_bytes()


def test_user_errors_exit_1(workspace, tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 1
    (tmp_path / "bad.cfg").write_text("train.lr_stage1 = fast\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg")]) == 1
    assert "strings need quotes" in capsys.readouterr().err
    assert main(["no-such-command"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--manifest", str(workspace / "data" / "target_test.csv"),
                 "--config", str(workspace / "run" / "config.cfg")]) == 1
    (tmp_path / "other.cfg").write_text(TINY.replace("(4, 4, 4)", "(4, 4, 8)"))
    assert main(["eval", "--checkpoint", str(workspace / "run" / "stage1.ckpt"), "--config", str(tmp_path / "other.cfg"),
                 "--manifest", str(workspace / "data" / "target_test.csv")]) == 1
    assert "does not fit" in capsys.readouterr().err


def test_internal_errors_exit_2(monkeypatch, capsys):
    def boom(**_):
        raise RuntimeError("invariant broken")

    monkeypatch.setattr("ctan.gradcheck.run_gradcheck", boom)
    assert main(["gradcheck"]) == 2
    assert "internal error" in capsys.readouterr().err


def test_gradcheck_exit_code_tracks_failures(monkeypatch, capsys):
    from ctan import ops

    assert main(["gradcheck"]) == 0
    report = capsys.readouterr().out
    assert "cta_block+heads" in report
    monkeypatch.setattr(ops.Sigmoid, "backward", staticmethod(lambda ctx, g: (g,)))
    assert main(["gradcheck"]) == 2


def test_ablate_writes_table(tmp_path, capsys):
    cfg = tmp_path / "a.cfg"
    cfg.write_text(TINY.replace("stage1_epochs = 1", "stage1_epochs = 0") + "run.ablation_seeds = (0,)\n")
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "ab")]) == 0
    table = (tmp_path / "ab" / "ablation.txt").read_text()
    for method in benchmark.METHODS:
        assert method in table
    csv_lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert csv_lines[0] == "method,seed0,mean,gain" and len(csv_lines) == 7
