import json
import warnings

import numpy as np
import pytest

from subic.cli import run
from subic.data import load_features, save_features, save_labels
from subic.network import load_model, read_log
from subic.search import load_index, read_results


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run(["gen-data", "--out", str(data), "--n", "620", "--d", "8", "--classes", "5",
                "--split", "0.5,0.4,0.1", "--seed", "1"]) == 0
    model = root / "model.subm"
    assert run(["train", "--in", str(data / "train.subf"), "--labels", str(data / "train.subl"),
                "--out", str(model), "--m", "2", "--k", "4", "--batch-size", "20",
                "--num-batches", "60", "--seed", "2"]) == 0
    return root, data, model


def test_gen_data_outputs(workspace):
    _, data, _ = workspace
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["result"]["sizes"] == {"all": 620, "train": 310, "db": 248, "query": 62}
    assert load_features(data / "db.subf").shape == (248, 8)


def test_train_writes_log_and_manifest(workspace):
    _, _, model = workspace
    log = read_log(str(model) + ".log.csv")
    assert len(log) == 60
    manifest = json.loads(open(str(model) + ".manifest.json").read())
    assert manifest["command"] == "train" and manifest["seed"] == 2
    assert set(manifest["versions"]) == {"subic", "numpy", "python"}
    assert load_model(model).shape.M == 2


def test_retrieval_pipeline(workspace, capsys):
    root, data, model = workspace
    idx, res, ap = root / "db.subc", root / "res.csv", root / "ap.csv"
    assert run(["index", "--in", str(data / "db.subf"), "--model", str(model),
                "--labels", str(data / "db.subl"), "--out", str(idx)]) == 0
    assert load_index(idx).count == 248
    assert run(["search", "--in", str(data / "query.subf"), "--model", str(model),
                "--index", str(idx), "--top-k", "1000", "--out", str(res)]) == 0
    ranked = read_results(res)
    assert len(ranked) == 62 and all(len(r) == 248 for r in ranked.values())
    capsys.readouterr()
    assert run(["eval-map", "--in", str(res), "--labels", str(data / "query.subl"),
                "--index", str(idx), "--out", str(ap)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert 0.0 < summary["mAP"] <= 1.0


def test_encode_embed_classify(workspace, capsys):
    root, data, model = workspace
    assert run(["encode", "--in", str(data / "query.subf"), "--model", str(model), "--out", str(root / "c.csv")]) == 0
    lines = (root / "c.csv").read_text().splitlines()
    assert lines[0] == "id,c0,c1" and len(lines) == 63
    assert run(["embed", "--in", str(data / "query.subf"), "--model", str(model), "--out", str(root / "z.csv")]) == 0
    assert len((root / "z.csv").read_text().splitlines()[0].split(",")) == 9
    idx = root / "q.subc"
    run(["index", "--in", str(data / "query.subf"), "--model", str(model),
         "--labels", str(data / "query.subl"), "--out", str(idx)])
    capsys.readouterr()
    assert run(["classify", "--index", str(idx), "--model", str(model), "--out", str(root / "p.csv")]) == 0
    assert 0.0 <= json.loads(capsys.readouterr().out)["accuracy"] <= 1.0


def test_pq_pipeline(workspace, capsys):
    root, data, _ = workspace
    cb = root / "pq.subq"
    assert run(["pq-train", "--in", str(data / "train.subf"), "--m", "2", "--k", "4", "--out", str(cb)]) == 0
    assert run(["pq-encode", "--in", str(data / "db.subf"), "--model", str(cb),
                "--labels", str(data / "db.subl"), "--out", str(root / "pq.subc")]) == 0
    assert run(["search", "--in", str(data / "query.subf"), "--model", str(cb),
                "--index", str(root / "pq.subc"), "--top-k", "5", "--out", str(root / "pqres.csv")]) == 0
    scores = read_results(root / "pqres.csv")[0].scores
    assert np.all(scores <= 0) and np.all(np.diff(scores) <= 0)


def test_diagnostics(workspace):
    root, data, model = workspace
    out = root / "diag.json"
    assert run(["diagnostics", "--in", str(data / "db.subf"), "--model", str(model), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["closeness"]) == 4
    assert rep["closeness"] == sorted(rep["closeness"], reverse=True)
    assert rep["support_histogram"] == sorted(rep["support_histogram"], reverse=True)
    assert sum(rep["support_histogram"]) == pytest.approx(1.0)


def test_bench(tmp_path):
    out = tmp_path / "bench.json"
    assert run(["bench", "--records", "1000", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["subic_adds"] == 8 and rep["hamming_expected_adds"] == 32.0
    assert rep["subic_gathers"] == 8 and rep["subic_additions"] == 7


def test_training_is_reproducible(workspace, tmp_path):
    _, data, _ = workspace
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.subm"
        assert run(["train", "--in", str(data / "train.subf"), "--labels", str(data / "train.subl"),
                    "--out", str(out), "--m", "2", "--k", "4", "--batch-size", "20",
                    "--num-batches", "30", "--seed", "5"]) == 0
        outs.append((out.read_bytes(), open(str(out) + ".log.csv", "rb").read()))
    assert outs[0] == outs[1]


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["train", "--in", "x"],
    ["bench", "--out", "b.json", "--k", "1"],
    ["bench", "--out", "b.json", "--m", "two"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1


def test_data_errors(workspace, tmp_path):
    _, data, model = workspace
    assert run(["encode", "--in", str(tmp_path / "missing.subf"), "--model", str(model),
                "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "junk").write_bytes(b"JUNKJUNKJUNK")
    assert run(["encode", "--in", str(data / "db.subf"), "--model", str(tmp_path / "junk"),
                "--out", str(tmp_path / "o")]) == 2
    save_features(tmp_path / "wide.subf", np.zeros((3, 5)))
    assert run(["encode", "--in", str(tmp_path / "wide.subf"), "--model", str(model),
                "--out", str(tmp_path / "o")]) == 2


def test_divergence_exit_code(tmp_path):
    rng = np.random.default_rng(0)
    save_features(tmp_path / "x.subf", rng.normal(size=(40, 4)))
    save_labels(tmp_path / "y.subl", np.arange(40) % 2, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        code = run(["train", "--in", str(tmp_path / "x.subf"), "--labels", str(tmp_path / "y.subl"),
                    "--out", str(tmp_path / "m.subm"), "--m", "2", "--k", "2", "--batch-size", "8",
                    "--num-batches", "50", "--lr", "1e308"])
    assert code == 3

