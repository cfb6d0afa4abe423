import json
import subprocess
import sys

import numpy as np
import pytest

from vmrec.cli import run
from vmrec.features import FrameFeatureSequence, ingest_dataset, read_feature_table, write_frame_file
from vmrec.model import load_checkpoint
from vmrec.retrieval import read_recall_csv

from conftest import CONFIGS


@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "data"
    assert run(["synth", "--pairs", "160", "--seed", "3", "--out-dir", str(d)]) == 0
    split = tmp_path / "split" / "manifest.json"
    split.parent.mkdir()
    assert run(["split", "--manifest", str(d / "manifest.json"), "--val", "20", "--test", "40", "--seed", "1", "--out", str(split)]) == 0
    return split


def train_args(manifest, out, *extra):
    return [
        "train", "--manifest", str(manifest), "--seed", "0",
        "--config", str(CONFIGS / "desk_tl.json"), "--arch", str(CONFIGS / "desk_arch.json"),
        "--epochs", "2", "--batch", "25",
        "--checkpoint", str(out / "model.json"), "--history", str(out / "history.csv"), *extra,
    ]


def test_synth_writes_three_files(tmp_path):
    assert run(["synth", "--pairs", "10", "--seed", "0", "--out-dir", str(tmp_path)]) == 0
    assert {p.name for p in tmp_path.iterdir()} == {"manifest.json", "music.csv", "video.csv"}
    ids, X = read_feature_table(tmp_path / "music.csv")
    assert len(ids) == 10 and X.shape == (10, 64)


def test_split_rebases_references(dataset):
    ds = ingest_dataset(dataset)
    assert [len(ds.indices(p)) for p in ("train", "val", "test")] == [100, 20, 40]
    assert json.loads(dataset.read_text())["pairs"][0]["music_path_ref"] == "../data/music.csv"


def test_train_eval_recommend(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    assert run(train_args(dataset, out)) == 0
    model, cfg = load_checkpoint(out / "model.json")
    assert cfg["mode"] == "TL" and cfg["batch_size"] == 25 and cfg["max_epochs"] == 2
    assert model.music_spec.layer_widths == (256, 128, 64)

    rc = run(["eval", "--checkpoint", str(out / "model.json"), "--manifest", str(dataset),
              "--out", str(out / "recall.csv"), "--dispersion-out", str(out / "disp.csv")])
    assert rc == 0
    rows = read_recall_csv(out / "recall.csv")
    assert {r["direction"] for r in rows} == {"music_to_video", "video_to_music"} and rows[0]["n"] == 40
    assert (out / "disp.csv").read_text().startswith("modality,dispersion\nmusic,")
    assert "R@10=" in capsys.readouterr().out

    test_ids = [c for c, s in json.loads(dataset.read_text())["split"].items() if s == "test"]
    rc = run(["recommend", "--checkpoint", str(out / "model.json"), "--manifest", str(dataset),
              "--query", test_ids[0], "--out-dir", str(out / "rep")])
    assert rc == 0
    rep = json.loads((out / "rep" / f"{test_ids[0]}.json").read_text())
    assert len(rep["top"]) == 3 and 1 <= rep["gt_rank"] <= 40


def test_bce_checkpoint_evaluates_with_fusion(dataset, tmp_path):
    out = tmp_path / "bce"
    out.mkdir()
    assert run(train_args(dataset, out, "--loss", "bce")) == 0
    model, cfg = load_checkpoint(out / "model.json")
    assert cfg["mode"] == "BCE" and model.head_widths == (128, 16, 1)
    assert run(["eval", "--checkpoint", str(out / "model.json"), "--manifest", str(dataset), "--out", str(out / "r.csv")]) == 0


def test_flag_overrides_config(dataset, tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    rc = run(train_args(dataset, out, "--margin", "0.3", "--lambdas", "1,1,0,0", "--music-widths", "32,16", "--video-widths", "16"))
    assert rc == 0
    model, cfg = load_checkpoint(out / "model.json")
    assert cfg["loss"]["margin"] == 0.3 and cfg["loss"]["weights"] == [1.0, 1.0, 0.0, 0.0]
    assert model.embedding_dim == 16


def test_aggregate_command(tmp_path):
    r = np.random.default_rng(0)
    seqs = [FrameFeatureSequence(f"c{i}", "music", r.normal(size=(30, 3)), 1.0) for i in range(3)]
    write_frame_file(tmp_path / "frames.csv", seqs)
    assert run(["aggregate", "--frames", str(tmp_path / "frames.csv"), "--out", str(tmp_path / "t.csv")]) == 0
    ids, X = read_feature_table(tmp_path / "t.csv")
    assert ids == ["c0", "c1", "c2"] and X.shape == (3, 9)
    assert np.allclose(X[0, :3], seqs[0].frames.mean(axis=0))
    args = ["aggregate", "--frames", str(tmp_path / "frames.csv"), "--segments", "4", "--seed", "2"]
    assert run(args + ["--out", str(tmp_path / "s1.csv")]) == 0
    assert run(args + ["--out", str(tmp_path / "s2.csv")]) == 0
    assert (tmp_path / "s1.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()


@pytest.mark.parametrize(
    "argv,msg",
    [
        (["synth", "--seed", "-1", "--out-dir", "x"], "unsigned"),
        (["eval", "--checkpoint", "nope.json", "--manifest", "nope.json", "--out", "r.csv"], "No such file"),
        (["train"], "required"),
        (["bogus"], "invalid choice"),
    ],
)
def test_errors_exit_nonzero_with_one_line(argv, msg, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(argv) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error:") and msg in err[0]


def test_unknown_arch_key(dataset, tmp_path, capsys):
    (tmp_path / "arch.json").write_text('{"music_width": [4]}')
    out = tmp_path / "u"
    out.mkdir()
    args = train_args(dataset, out)
    args[args.index("--arch") + 1] = str(tmp_path / "arch.json")
    assert run(args) == 2
    assert "music_width" in capsys.readouterr().err


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "vmrec", "train", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--epochs" in proc.stdout and "reference defaults" in proc.stdout
