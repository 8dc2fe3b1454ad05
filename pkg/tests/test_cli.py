import csv
import filecmp
import json

import numpy as np
import pytest

from cycledeform.cli import main, read_config_file
from cycledeform.dataio import load_labels, load_points
from cycledeform.geometry import chamfer_asym


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    # metadata records wall-clock-free facts only, so it must match too
    return not mismatch and not errors and all(tree_equal(a / d, b / d) for d in cmp.common_dirs)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


TRAIN_FLAGS = ["--epochs", "3", "--lr-drop-epoch", "2", "--sr-cutoff-epoch", "1", "--knn-k", "4",
               "--points-per-cloud", "32", "--triplets-per-batch", "4", "--enc-widths", "8", "16",
               "--pred-hidden", "16", "--deform-width", "8", "--num-modules", "3", "--precision", "f64"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "tables"
    assert main(["synth", "--family", "table", "--count", "10", "--points", "96", "--seed", "2",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--manifest", str(dataset / "manifest.tsv"), "--out", str(out), "--seed", "1"]
                + TRAIN_FLAGS) == 0
    return out


def test_synth_is_reproducible(dataset, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", "--family", "table", "--count", "10", "--points", "96", "--seed", "2",
                 "--out", str(again)]) == 0
    assert tree_equal(dataset, again)
    man = rows(dataset / "manifest.tsv")
    assert len(man) == 10 and sum(r[0].split("\t")[4] == "train" for r in man) == 8


def test_synth_binary(tmp_path):
    assert main(["synth", "--family", "lamp", "--count", "3", "--points", "50", "--binary",
                 "--out", str(tmp_path)]) == 0
    files = sorted((tmp_path / "points").iterdir())
    assert all(f.suffix == ".xyzb" for f in files) and load_points(files[0]).shape == (50, 3)


def test_train_outputs(trained):
    table = rows(trained / "losses.csv")
    assert table[0] == ["epoch", "lCh", "lCy2", "lCy3", "lSR", "lTotal", "lr"]
    assert [int(r[0]) for r in table[1:]] == [0, 1, 2]
    for r in table[1:]:
        assert all(np.isfinite(float(v)) for v in r[1:])
    meta = json.loads((trained / "metadata.json").read_text())
    assert meta["command"] == "train" and meta["status"] == "done" and meta["config"]["epochs"] == 3
    assert meta["train_shapes"] == 8
    assert (trained / "checkpoint.cydf").exists()


def test_train_rerun_identical_and_resume(dataset, trained, tmp_path):
    manifest = str(dataset / "manifest.tsv")
    assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "b"), "--seed", "1"] + TRAIN_FLAGS) == 0
    assert (tmp_path / "b" / "losses.csv").read_bytes() == (trained / "losses.csv").read_bytes()
    short = [f if f != "3" else "2" for f in TRAIN_FLAGS]
    short[short.index("--lr-drop-epoch") + 1] = "1"
    assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "c"), "--seed", "1"] + short) == 0
    # resuming under the full schedule continues where the short run left off
    assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "c"), "--seed", "1",
                 "--resume", str(tmp_path / "c" / "checkpoint.cydf"), "--epochs", "3",
                 "--lr-drop-epoch", "2"]) == 0
    assert len(rows(tmp_path / "c" / "losses.csv")) == 4


def test_resume_matches_uninterrupted(dataset, trained, tmp_path):
    manifest = str(dataset / "manifest.tsv")
    # stop after 2 epochs of the 3-epoch schedule by resuming a copy of epoch-2 state
    from cycledeform.checkpoint import load_checkpoint, save_checkpoint
    from cycledeform.cli import resolve_train_config, build_parser
    from cycledeform.dataio import read_manifest
    from cycledeform.training import build_knn_graph, init_state, normalized_shapes, train_epoch

    args = build_parser().parse_args(["train", "--manifest", manifest, "--out", "x", "--seed", "1"] + TRAIN_FLAGS)
    cfg = resolve_train_config(args, {})
    shapes = normalized_shapes(read_manifest(manifest).select(split="train").load())
    state = init_state(cfg)
    graph = build_knn_graph([s.points for s in shapes], cfg.knn_k)
    for _ in range(2):
        train_epoch(state, shapes, graph)
    save_checkpoint(tmp_path / "e2.cydf", state)
    assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "r"),
                 "--resume", str(tmp_path / "e2.cydf")]) == 0
    assert (tmp_path / "r" / "losses.csv").read_bytes() == (trained / "losses.csv").read_bytes()
    assert (tmp_path / "r" / "checkpoint.cydf").read_bytes() == (trained / "checkpoint.cydf").read_bytes()
    assert load_checkpoint(tmp_path / "r" / "checkpoint.cydf").epoch == 3


def test_deform(dataset, trained, tmp_path):
    src, tgt = sorted((dataset / "points").iterdir())[:2]
    out = tmp_path / "moved.xyz"
    assert main(["deform", "--checkpoint", str(trained / "checkpoint.cydf"), "--source", str(src),
                 "--target", str(tgt), "--out", str(out), "--color"]) == 0
    moved = load_points(out)
    assert moved.shape == load_points(src).shape
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["chamfer_to_target"] == pytest.approx(chamfer_asym(moved, load_points(tgt)), rel=1e-7)
    np.testing.assert_array_equal(load_labels(out.with_suffix(".tag")), np.arange(len(moved)) % 2)


def _self_pool_manifest(dataset, path):
    lines = []
    for line in (dataset / "manifest.tsv").read_text().splitlines():
        rid, cat, pts, seg, _ = line.split("\t")
        pts, seg = str(dataset / pts), str(dataset / seg)
        lines.append("\t".join([f"src_{rid}", cat, pts, seg, "train"]))
        lines.append("\t".join([f"tgt_{rid}", cat, pts, seg, "test"]))
    path.write_text("\n".join(lines) + "\n")
    return path


def test_transfer_identity_with_targets_in_pool(dataset, tmp_path):
    man = _self_pool_manifest(dataset, tmp_path / "self.tsv")
    out = tmp_path / "t"
    assert main(["transfer", "--manifest", str(man), "--out", str(out), "--method", "identity",
                 "--criterion", "nn", "--shots", "10", "--repeats", "2"]) == 0
    summary = dict(rows(out / "summary.csv")[1:])
    assert float(summary["mean"]) == 1.0 and float(summary["std"]) == 0.0
    assert len(list((out / "run01").glob("*.seg"))) == 10


def test_transfer_summary_recomputes(dataset, trained, tmp_path):
    out = tmp_path / "t"
    assert main(["transfer", "--manifest", str(dataset / "manifest.tsv"), "--out", str(out),
                 "--checkpoint", str(trained / "checkpoint.cydf"), "--shots", "3", "--repeats", "3",
                 "--k", "2", "--seed", "4"]) == 0
    means = np.array([float(r[2]) for r in rows(out / "runs.csv")[1:]])
    summary = dict(rows(out / "summary.csv")[1:])
    assert float(summary["mean"]) == pytest.approx(means.mean(), rel=1e-12)
    assert float(summary["std"]) == pytest.approx(means.std(ddof=1), rel=1e-12)
    per = rows(out / "per_shape.csv")[1:]
    for r in range(3):
        vals = [float(x[3]) for x in per if x[0] == str(r)]
        assert np.mean(vals) == pytest.approx(means[r], rel=1e-12)
    # oracle selection is never worse than nn selection on the same shots
    oracle = tmp_path / "o"
    assert main(["transfer", "--manifest", str(dataset / "manifest.tsv"), "--out", str(oracle),
                 "--checkpoint", str(trained / "checkpoint.cydf"), "--shots", "3", "--repeats", "3",
                 "--criterion", "oracle", "--seed", "4"]) == 0
    nn = tmp_path / "n"
    assert main(["transfer", "--manifest", str(dataset / "manifest.tsv"), "--out", str(nn),
                 "--checkpoint", str(trained / "checkpoint.cydf"), "--shots", "3", "--repeats", "3",
                 "--seed", "4"]) == 0
    o_rows = {(x[0], x[2]): float(x[3]) for x in rows(oracle / "per_shape.csv")[1:]}
    n_rows = {(x[0], x[2]): float(x[3]) for x in rows(nn / "per_shape.csv")[1:]}
    assert all(o_rows[key] >= n_rows[key] for key in n_rows)


def test_eval(dataset, tmp_path):
    labels = dataset / "labels"
    out = tmp_path / "e.csv"
    assert main(["eval", "--pred", str(labels), "--gt", str(labels), "--out", str(out)]) == 0
    table = rows(out)
    assert table[-1] == ["mean", "1.0"] and len(table) == 12


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--points", "16", "--width", "8", "--max-entries", "20"]) == 0
    assert "PASS overall" in capsys.readouterr().out


def test_exit_codes(dataset, trained, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 1
    assert main(["train", "--manifest", str(tmp_path / "missing.tsv"), "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--manifest", str(dataset / "manifest.tsv"), "--out", str(tmp_path / "x"),
                 "--epochs", "2", "--lr-drop-epoch", "5"]) == 1
    bad = tmp_path / "bad.cydf"
    bad.write_bytes(b"CYDF" + b"\0" * 10)
    src = sorted((dataset / "points").iterdir())[0]
    assert main(["deform", "--checkpoint", str(bad), "--source", str(src), "--target", str(src),
                 "--out", str(tmp_path / "o.xyz")]) == 2
    assert main(["transfer", "--manifest", str(dataset / "manifest.tsv"), "--out", str(tmp_path / "t"),
                 "--method", "ours"]) == 1


def test_config_file_and_flag_precedence(dataset, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# training overrides\nepochs = 2\nlr-drop-epoch = 1\nlr = 0.005\nseed = 9\n")
    assert read_config_file(cfg) == {"epochs": "2", "lr_drop_epoch": "1", "lr": "0.005", "seed": "9"}
    flags = [f for f in TRAIN_FLAGS]
    for name in ("--epochs", "--lr-drop-epoch"):
        i = flags.index(name)
        del flags[i:i + 2]
    out = tmp_path / "c"
    assert main(["train", "--manifest", str(dataset / "manifest.tsv"), "--out", str(out),
                 "--config", str(cfg), "--lr", "0.002"] + flags) == 0
    meta = json.loads((out / "metadata.json").read_text())["config"]
    assert meta["epochs"] == 2 and meta["seed"] == 9 and meta["lr"] == 0.002
    assert len(rows(out / "losses.csv")) == 3
    (tmp_path / "broken.cfg").write_text("epochs 2\n")
    assert main(["train", "--manifest", str(dataset / "manifest.tsv"), "--out", str(out),
                 "--config", str(tmp_path / "broken.cfg")]) == 1
