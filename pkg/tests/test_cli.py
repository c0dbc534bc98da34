import json
import subprocess
import sys

import numpy as np
import pytest

from hipath.cli import main
from hipath.report import Vocabulary
from hipath.synthetic import read_dataset, split_indices

SMALL = ["--n-cases", "40", "--d-vis", "16", "--d-txt", "24"]
TINY_MODEL = ["--set", "model.d=8", "--set", "model.n_heads=2", "--set", "model.text_hidden=16"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out-dir", str(out), "--seed", "5"] + SMALL) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(data_dir), "--out-dir", str(out), "--set", "epochs=2"] + TINY_MODEL)
    assert code == 0
    return out


def read_json(path):
    return json.loads(path.read_text())


def test_gen_data_outputs(data_dir):
    for name in ("dataset.jsonl", "dataset.jsonl.config.json", "vocab.json", "embeddings.npy", "manifest.json"):
        assert (data_dir / name).is_file()
    assert len((data_dir / "dataset.jsonl").read_text().splitlines()) == 40
    manifest = read_json(data_dir / "manifest.json")
    assert manifest["command"] == "gen-data" and manifest["seed"] == 5
    assert manifest["config"]["generator"]["n_cases"] == 40
    assert set(manifest["artifacts"].values()) >= {"dataset.jsonl", "vocab.json", "embeddings.npy"}


def test_gen_data_same_seed_is_byte_identical(tmp_path, data_dir):
    again = tmp_path / "again"
    assert main(["gen-data", "--out-dir", str(again), "--seed", "5"] + SMALL) == 0
    for name in ("dataset.jsonl", "dataset.jsonl.config.json", "vocab.json", "embeddings.npy", "manifest.json"):
        assert (again / name).read_bytes() == (data_dir / name).read_bytes(), name
    other = tmp_path / "other"
    assert main(["gen-data", "--out-dir", str(other), "--seed", "6"] + SMALL) == 0
    assert (other / "dataset.jsonl").read_bytes() != (data_dir / "dataset.jsonl").read_bytes()


def test_gen_data_default_case_count(tmp_path):
    # default n_cases, shrunk feature sizes to keep the file small
    out = tmp_path / "default"
    assert main(["gen-data", "--out-dir", str(out), "--d-vis", "8", "--d-txt", "8"]) == 0
    assert sum(1 for _ in (out / "dataset.jsonl").open()) == 2000


def test_signal_flag_recorded(tmp_path):
    out = tmp_path / "zero"
    assert main(["gen-data", "--out-dir", str(out), "--signal", "0"] + SMALL) == 0
    assert read_json(out / "manifest.json")["config"]["generator"]["signal_strength"] == 0.0
    assert "--signal" in read_json(out / "manifest.json")["argv"]


def test_replay_reproduces_gen_data(tmp_path, data_dir):
    out = tmp_path / "replayed"
    assert main(["replay", str(data_dir / "manifest.json"), "--out-dir", str(out)]) == 0
    assert (out / "dataset.jsonl").read_bytes() == (data_dir / "dataset.jsonl").read_bytes()


def test_train_outputs_and_log_header(trained):
    assert (trained / "checkpoint.bin").is_file()
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    header = json.loads(lines[0])["header"]
    assert header["epochs"] == 2 and header["config"]["model"]["d_vis"] == 16
    epochs = [json.loads(l) for l in lines[1:]]
    assert [e["epoch"] for e in epochs] == [1, 2]
    manifest = read_json(trained / "manifest.json")
    assert any(k.endswith("dataset.jsonl") for k in manifest["inputs"])
    assert all(len(h) == 64 for h in manifest["inputs"].values())


def test_train_paper_preset_echoes_hyperparameters(tmp_path, data_dir):
    out = tmp_path / "paper"
    code = main(["train", "--data", str(data_dir), "--out-dir", str(out), "--preset", "paper", "--max-steps", "1"])
    assert code == 0
    header = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])["header"]
    assert (header["epochs"], header["lr"], header["batch_size"]) == (50, 1e-4, 32)


def test_train_ablate_sets_coupled_flags(tmp_path, data_dir):
    out = tmp_path / "flat"
    code = main(["train", "--data", str(data_dir), "--out-dir", str(out), "--ablate", "flat_crossattn",
                 "--max-steps", "1"] + TINY_MODEL)
    assert code == 0
    abl = read_json(out / "manifest.json")["config"]["ablation"]
    assert abl["flat_crossattn"] and abl["no_hicl_local"] and not abl["no_hicl_global"]


def test_train_missing_dataset_exits_2(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nope"), "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert "dataset not found" in capsys.readouterr().err


def test_train_bad_override_exits_2(tmp_path, data_dir):
    assert main(["train", "--data", str(data_dir), "--out-dir", str(tmp_path), "--set", "nonsense=1"]) == 2


def test_train_divergence_exits_nonzero(tmp_path, data_dir, capsys):
    code = main(["train", "--data", str(data_dir), "--out-dir", str(tmp_path), "--set", "lr=1e300",
                 "--set", "epochs=3"] + TINY_MODEL)
    assert code == 1
    assert "non-finite" in capsys.readouterr().err


def test_resume_matches_straight_run(tmp_path, data_dir, trained):
    half = tmp_path / "half"
    full_args = ["--data", str(data_dir), "--set", "epochs=2"] + TINY_MODEL
    assert main(["train", "--out-dir", str(half), "--max-steps", "2"] + full_args) == 0
    rest = tmp_path / "rest"
    assert main(["train", "--out-dir", str(rest), "--resume", str(half / "checkpoint.bin")] + full_args) == 0
    assert (rest / "checkpoint.bin").read_bytes() == (trained / "checkpoint.bin").read_bytes()


def test_eval_checkpoint(tmp_path, data_dir, trained):
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(data_dir), "--checkpoint", str(trained / "checkpoint.bin"),
                 "--out-dir", str(out)]) == 0
    report = read_json(out / "metrics.json")
    assert [r["name"] for r in report["rows"]] == ["DIAG", "GRADE", "RES", "All"]
    assert report["rows"][-1]["N"] == sum(1 for _ in (out / "predictions.jsonl").open())
    assert 0.0 <= report["r_at_1"] <= 1.0
    # the predictions written by eval score to the same table when fed back in
    again = tmp_path / "again"
    assert main(["eval", "--data", str(data_dir), "--predictions", str(out / "predictions.jsonl"),
                 "--out-dir", str(again)]) == 0
    assert read_json(again / "metrics.json")["rows"] == report["rows"]


def test_eval_refuses_bad_checkpoint_version(tmp_path, data_dir, trained):
    raw = bytearray((trained / "checkpoint.bin").read_bytes())
    raw[8] = 7
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(raw))
    assert main(["eval", "--data", str(data_dir), "--checkpoint", str(bad), "--out-dir", str(tmp_path)]) == 2


def _oracle_predictions(data_dir, path, with_probs=True):
    vocab = Vocabulary.load(data_dir / "vocab.json")
    cases, _ = read_dataset(data_dir / "dataset.jsonl")
    _, test = split_indices(len(cases))
    with path.open("w") as fh:
        for i in test:
            for k, slot in enumerate(cases[i].slots):
                rec = {"case_id": cases[i].case_id, "slot": k, "pred": slot.truth_term}
                if with_probs:
                    rec["probs"] = np.eye(len(vocab.terms))[slot.truth_term].tolist()
                fh.write(json.dumps(rec) + "\n")


def test_eval_perfect_predictions_score_100(tmp_path, data_dir):
    preds = tmp_path / "oracle.jsonl"
    _oracle_predictions(data_dir, preds)
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(data_dir), "--predictions", str(preds), "--out-dir", str(out)]) == 0
    for row in read_json(out / "metrics.json")["rows"]:
        if row["N"]:
            assert all(row[c] == 100.0 for c in ("strict", "semantic", "coarse", "acceptable", "safety",
                                                  "top1", "top5")), row
    assert "100.00" in (out / "metrics.txt").read_text()


def test_eval_json_and_text_agree(tmp_path, data_dir):
    vocab = Vocabulary.load(data_dir / "vocab.json")
    cases, _ = read_dataset(data_dir / "dataset.jsonl")
    rng = np.random.default_rng(0)
    mask = vocab.type_mask()
    preds = tmp_path / "random.jsonl"
    with preds.open("w") as fh:
        for case in cases:
            for k, slot in enumerate(case.slots):
                ids = np.flatnonzero(mask[int(slot.slot_type)])
                fh.write(json.dumps({"case_id": case.case_id, "slot": k, "pred": int(rng.choice(ids))}) + "\n")
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(data_dir), "--predictions", str(preds), "--out-dir", str(out)]) == 0
    rows = {r["name"]: r for r in read_json(out / "metrics.json")["rows"]}
    text = (out / "metrics.txt").read_text().splitlines()
    names = [line.split()[0] for line in text[2:]]
    assert names == ["DIAG", "GRADE", "RES", "All"]
    for line in text[2:]:
        cells = line.split()
        row = rows[cells[0]]
        assert [float(c) for c in cells[2:]] == [row[c] for c in ("strict", "semantic", "coarse", "acceptable",
                                                                   "safety")]


def test_eval_unknown_case_exits_2(tmp_path, data_dir):
    preds = tmp_path / "p.jsonl"
    preds.write_text(json.dumps({"case_id": "nope", "slot": 0, "pred": 0}) + "\n")
    assert main(["eval", "--data", str(data_dir), "--predictions", str(preds), "--out-dir", str(tmp_path)]) == 2


def test_ablate_table(tmp_path):
    out = tmp_path / "abl"
    args = ["ablate", "--out-dir", str(out), "--seeds", "0", "1", "--n-cases", "30", "--d-vis", "16",
            "--d-txt", "24", "--set", "epochs=1"] + TINY_MODEL
    assert main(args) == 0
    text = (out / "ablation.txt").read_text().splitlines()
    assert [line.split("  ")[0].strip() for line in text[2:]] == ["Full", "w/o HiCL", "w/o HiPA", "Flat CrossAttn"]
    assert "±" in text[2]
    table = read_json(out / "ablation.json")
    assert len(table["full"]["runs"]) == 2
    assert len((out / "runs.jsonl").read_text().splitlines()) == 8
    again = tmp_path / "abl2"
    assert main(args[:2] + [str(again)] + args[3:]) == 0
    assert (again / "ablation.json").read_bytes() == (out / "ablation.json").read_bytes()


def test_grad_check_pass_and_fail(tmp_path, capsys):
    assert main(["grad-check", "--out-dir", str(tmp_path / "ok"), "--probes", "1"]) == 0
    assert read_json(tmp_path / "ok" / "gradcheck.json")["passed"]
    capsys.readouterr()
    assert main(["grad-check", "--out-dir", str(tmp_path / "bad"), "--probes", "1", "--tolerance", "0"]) == 1
    err = capsys.readouterr().err
    assert "FAILED" in err and "alpha" in err


def test_usage_error_exit_code():
    proc = subprocess.run([sys.executable, "-m", "hipath.cli", "train"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "--data" in proc.stderr
