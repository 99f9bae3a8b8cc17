import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from certilip.cli import main
from certilip.data import LabeledDataset, generate, save_csv
from certilip.model import LinearModel, load_model, save_model

from factories import all_targets_interior


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture
def blobs(tmp_path):
    path = tmp_path / "blobs.csv"
    save_csv(generate("blobs", 60, 2, 3, seed=1, noise=0.08), path)
    return path


@pytest.fixture
def nn_cfg(tmp_path):
    path = tmp_path / "nn.cfg"
    path.write_text("model = nn\nhidden_units = 8\nepochs = 20\nstep_size = 0.5\n"
                    "regularizer = cross_lipschitz\nlambda = 1e-3  # strength\n")
    return path


def test_gen_data(tmp_path, capsys):
    out = tmp_path / "m.csv"
    assert run(["gen-data", "moons", "--n", 30, "--d", 3, "--out", out, "--seed", 4]) == 0
    assert len(out.read_text().splitlines()) == 31
    assert run(["gen-data", "xor", "--n", 10, "--seed", 4]) == 0
    assert capsys.readouterr().out.count("\n") == 11


def test_train_certify_attack(tmp_path, blobs, nn_cfg):
    model = tmp_path / "nn.model"
    assert run(["train", "--dataset", blobs, "--config", nn_cfg, "--out", model,
                "--test-dataset", blobs]) == 0
    report = json.loads((tmp_path / "nn.model.report.json").read_text())
    assert "wall_time" not in json.dumps(report) and report["test_error"] is not None
    assert load_model(model).kind == "nn"

    cert = tmp_path / "cert.jsonl"
    assert run(["certify", "--dataset", blobs, "--model", model, "--out", cert]) == 0
    recs = [json.loads(line) for line in cert.read_text().splitlines()]
    assert len(recs) == 60 and [r["id"] for r in recs] == list(range(60))
    assert all(r["guarantee_radius"] >= 0 for r in recs)

    glob = tmp_path / "glob.jsonl"
    assert run(["certify", "--dataset", blobs, "--model", model, "--backend", "global",
                "--out", glob]) == 0
    g = [json.loads(line)["guarantee_radius"] for line in glob.read_text().splitlines()]
    assert all(a <= b + 1e-12 for a, b in zip(g, (r["guarantee_radius"] for r in recs)))

    att, deltas = tmp_path / "att.jsonl", tmp_path / "deltas.csv"
    assert run(["attack", "--dataset", blobs, "--model", model, "--p", "inf", "--out", att,
                "--deltas", deltas]) == 0
    arecs = [json.loads(line) for line in att.read_text().splitlines()]
    assert len(arecs) == 60 and all(r["p"] == "inf" for r in arecs)
    rows = list(csv.reader(deltas.open()))
    assert rows[0] == ["id", "x0", "x1"] and len(rows) == 61
    for r, a in zip(rows[1:], arecs):
        if a["feasible"]:
            assert max(abs(float(v)) for v in r[1:]) == pytest.approx(a["norm"], rel=1e-12, abs=1e-15)


def test_outputs_are_byte_identical(tmp_path, blobs, nn_cfg):
    outs = []
    for k in range(2):
        model = tmp_path / f"m{k}.model"
        run(["train", "--dataset", blobs, "--config", nn_cfg, "--out", model, "--seed", 3])
        run(["certify", "--dataset", blobs, "--model", model, "--out", tmp_path / f"c{k}"])
        run(["attack", "--dataset", blobs, "--model", model, "--out", tmp_path / f"a{k}"])
        outs.append([(tmp_path / n).read_bytes() for n in (f"m{k}.model", f"m{k}.model.report.json",
                                                          f"c{k}", f"a{k}")])
    assert outs[0] == outs[1]


def test_workers_match_serial(tmp_path, blobs, nn_cfg, monkeypatch):
    model = tmp_path / "nn.model"
    run(["train", "--dataset", blobs, "--config", nn_cfg, "--out", model])
    run(["certify", "--dataset", blobs, "--model", model, "--out", tmp_path / "s"])
    run(["certify", "--dataset", blobs, "--model", model, "--out", tmp_path / "w", "--workers", 2])
    monkeypatch.setenv("CERTILIP_WORKERS", "2")
    run(["attack", "--dataset", blobs, "--model", model, "--out", tmp_path / "aw"])
    monkeypatch.delenv("CERTILIP_WORKERS")
    run(["attack", "--dataset", blobs, "--model", model, "--out", tmp_path / "as"])
    assert (tmp_path / "s").read_bytes() == (tmp_path / "w").read_bytes()
    assert (tmp_path / "as").read_bytes() == (tmp_path / "aw").read_bytes()


def test_exit_codes(tmp_path, blobs, capsys):
    assert run(["certify", "--dataset", tmp_path / "missing.csv", "--model", tmp_path / "x"]) == 2
    assert run(["train", "--dataset", blobs, "--out", tmp_path / "m", "--classes", "7"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("regularizer = dropout\n")
    assert run(["train", "--dataset", blobs, "--config", bad, "--out", tmp_path / "m"]) == 2
    diverge = tmp_path / "div.cfg"
    diverge.write_text("model = nn\nhidden_units = 4\nepochs = 50\nstep_size = 1e200\nuse_bias = true\n")
    with np.errstate(all="ignore"):
        assert run(["train", "--dataset", blobs, "--config", diverge, "--out", tmp_path / "m"]) == 3
    model = tmp_path / "nn.model"
    cfg = tmp_path / "k.cfg"
    cfg.write_text("model = kernel\nknn = 5\nepochs = 20\n")
    run(["train", "--dataset", blobs, "--config", cfg, "--out", model])
    assert run(["certify", "--dataset", blobs, "--model", model, "--backend", "global"]) == 2
    assert run(["attack", "--dataset", blobs, "--model", model, "--workers", 0]) == 2
    assert "error:" in capsys.readouterr().err


def test_verify(tmp_path, blobs, nn_cfg, capsys):
    model = tmp_path / "nn.model"
    run(["train", "--dataset", blobs, "--config", nn_cfg, "--out", model])
    capsys.readouterr()
    assert run(["verify", "--n", 30, "--samples", 300, "--model", model]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["solver_checks"] == 90 and summary["solver_mismatches"] == 0
    assert summary["bound_checks"] == 30 and summary["bound_violations"] == 0


def _interior_linear(tmp_path):
    # the first seed whose model has 40 points with every target reachable inside the box
    for seed in range(50):
        rng = np.random.default_rng(seed)
        model = LinearModel(rng.standard_normal((3, 4)))
        cand = 0.4 + 0.2 * rng.random((200, 4))
        X = np.array([x for x in cand if all_targets_interior(model, x, 2.0, margin=1e-6)][:40])
        if len(X) == 40:
            break
    assert len(X) == 40
    save_csv(LabeledDataset(X, np.argmax(model.outputs(X), axis=1), 3), tmp_path / "lin.csv")
    save_model(model, tmp_path / "lin.model")


def test_eval_linear_manifest(tmp_path, capsys):
    _interior_linear(tmp_path)
    (tmp_path / "m.json").write_text(json.dumps({
        "dataset": {"path": "lin.csv"},
        "runs": [{"name": "lin", "model": "lin.model"}],
        "p": 2, "backend": "linear",
    }))
    assert run(["eval", tmp_path / "m.json", "--out", tmp_path / "out"]) == 0
    row = next(csv.DictReader((tmp_path / "out" / "aggregate.csv").open()))
    assert row["n_correct"] == "40" and row["n_attack_failed"] == "0"
    assert float(row["mean_guarantee"]) == pytest.approx(float(row["mean_adv_norm"]), abs=1e-6)
    plot = list(csv.DictReader((tmp_path / "out" / "plot.csv").open()))
    assert [r["series"] for r in plot] == ["lower", "upper"]

    before = (tmp_path / "out" / "aggregate.csv").read_bytes()
    (tmp_path / "out" / "aggregate.csv").write_bytes(before)
    (tmp_path / "out" / "plot.csv").unlink()
    assert run(["report", "--out", tmp_path / "out"]) == 0
    assert (tmp_path / "out" / "aggregate.csv").read_bytes() == before
    assert (tmp_path / "out" / "plot.csv").exists()


def test_eval_kernel_cl_vs_wd(tmp_path):
    save_csv(generate("moons", 120, 2, seed=2, noise=0.1), tmp_path / "moons.csv")
    (tmp_path / "m.json").write_text(json.dumps({
        "dataset": {"path": "moons.csv", "n_train": 80, "seed": 1},
        "runs": [
            {"name": "cl", "settings": {"model": "kernel", "regularizer": "cross_lipschitz",
                                        "lambda": 1e-3, "knn": 10, "epochs": 50}},
            {"name": "wd", "settings": {"model": "kernel", "regularizer": "weight_decay",
                                        "lambda": 1e-3, "knn": 10, "epochs": 50}},
        ],
        "eval_points": 20,
    }))
    assert run(["eval", tmp_path / "m.json", "--out", tmp_path / "out"]) == 0
    rows = list(csv.DictReader((tmp_path / "out" / "aggregate.csv").open()))
    assert [r["run"] for r in rows] == ["cl", "wd"]
    assert [r["regularizer"] for r in rows] == ["cross_lipschitz", "weight_decay"]
    assert all(r["sandwich_violations"] == "0" and r["n_eval"] == "20" for r in rows)
    for name in ("cl", "wd"):
        assert (tmp_path / "out" / f"{name}.model").exists()


@pytest.mark.parametrize("manifest", [
    {"dataset": {"path": "d.csv", "classes": []}, "runs": [{"name": "a", "model": "x.model"}]},
    {"dataset": {"path": "d.csv"}, "runs": []},
    {"dataset": {"path": "d.csv"}, "runs": [{"name": "a", "model": "nope.model"}]},
    {"dataset": {"path": "d.csv"}, "runs": [{"name": "a", "settings": {"model": "nn"}}]},
    {"dataset": {"path": "d.csv"}, "runs": [{"name": "a", "settings": {"model": "nn"}}],
     "backend": "magic"},
])
def test_eval_manifest_errors(tmp_path, manifest):
    save_csv(generate("blobs", 10, 2, 2), tmp_path / "d.csv")
    save_model(LinearModel(np.eye(2)), tmp_path / "x.model")
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    assert run(["eval", tmp_path / "m.json", "--out", tmp_path / "out"]) == 2


def test_empty_class_subset(tmp_path, blobs):
    save_model(LinearModel(np.eye(2)), tmp_path / "x.model")
    assert run(["certify", "--dataset", blobs, "--model", tmp_path / "x.model", "--classes", ","]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "certilip", "gen-data", "blobs", "--n", "5"],
                          capture_output=True, text=True, check=True)
    assert len(proc.stdout.splitlines()) == 6
    proc = subprocess.run([sys.executable, "-m", "certilip", "report"], capture_output=True, text=True)
    assert proc.returncode == 2
