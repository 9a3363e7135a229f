import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from fedadapt import cli, data, harness, nn, synthetic
from fedadapt.config import config_from_dict, load_config
from fedadapt.errors import ComparisonError, ConfigurationError

REPO = Path(__file__).resolve().parents[1]

SMOKE = {
    "seed": 0,
    "architecture": "mlp",
    "dataset": {"samples_per_class": 20},
    "federation": {"n_clients": 2, "n_types": 2, "samples_per_split": 10},
    "fl": {"rounds": 1, "lr": 0.05},
    "pfe": {"relu_index": 1, "q": 16},
    "fsc": {"mode": "full"},
    "adaptation": {"adaptation_rounds": 1},
}


def smoke_config(**overrides):
    raw = json.loads(json.dumps(SMOKE))
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return config_from_dict(raw)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    t0 = time.perf_counter()
    result = harness.run_experiment(smoke_config(), out)
    return result, out, time.perf_counter() - t0


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_seed_inheritance(self):
        cfg = smoke_config(seed=7, pfe={"seed": 3})
        assert cfg.fl.seed == 7 and cfg.fsc.anchor_seed == 7 and cfg.dataset.seed == 7
        assert cfg.pfe.seed == 3

    def test_seed_required(self):
        raw = dict(SMOKE)
        del raw["seed"]
        with pytest.raises(ConfigurationError, match="seed"):
            config_from_dict(raw)

    def test_unknown_keys(self):
        with pytest.raises(ConfigurationError, match="unknown keys in \\[fl\\]"):
            smoke_config(fl={"epochs": 3})
        with pytest.raises(ConfigurationError):
            smoke_config(model="x")

    def test_hash_tracks_content(self):
        assert smoke_config().config_hash == smoke_config().config_hash
        assert smoke_config().config_hash != smoke_config(seed=1).config_hash

    def test_missing_dataset_rejected_before_compute(self, tmp_path):
        cfg_file = tmp_path / "idx.toml"
        cfg_file.write_text(f'seed = 0\n[dataset]\nformat = "idx"\nimages = "{tmp_path / "no.idx"}"\nlabels = "x"\n')
        with pytest.raises(ConfigurationError, match="dataset.images not found"):
            load_config(cfg_file)
        assert cli.main(["run", str(cfg_file), "--out", str(tmp_path / "out")]) == 1
        assert not (tmp_path / "out").exists()

    def test_shipped_configs_parse(self):
        for path in sorted((REPO / "configs").glob("*.toml")):
            load_config(path)
        cfg = load_config(REPO / "configs" / "class_imbalance.toml", seed=5)
        assert cfg.seed == 5 and cfg.federation.n_clients == 25


class TestRun:
    def test_minimal_run_emits_declared_files(self, smoke_run):
        result, out, seconds = smoke_run
        assert result.status == 0 and seconds < 60
        manifest = json.loads((out / "manifest.json").read_text())
        declared = {f["path"] for f in manifest["files"]}
        on_disk = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
        assert declared == on_disk
        for name in (
            "fl_history.csv",
            "representations.json",
            "similarity.json",
            "groups.json",
            "upload_cost.json",
            "accuracy_baseline.csv",
            "accuracy_finetune.csv",
            "accuracy_random.csv",
            "accuracy_pfa.csv",
            "accuracy_federated.csv",
            "checkpoints/federated.ckpt",
        ):
            assert name in declared
        for entry in manifest["files"]:
            if not entry["volatile"]:
                assert len(entry["sha256"]) == 64

    def test_config_hash_in_every_output(self, smoke_run):
        result, out, _ = smoke_run
        h = result.config.config_hash
        for p in out.rglob("*.json"):
            assert json.loads(p.read_text())["config_hash"] == h
        for p in out.rglob("*.csv"):
            assert all(row["config_hash"] == h for row in read_csv(p))

    def test_csv_format(self, smoke_run):
        _, out, _ = smoke_run
        raw = (out / "fl_history.csv").read_bytes()
        assert b"\r" not in raw
        assert raw.splitlines()[0] == b"round,client_id,split,loss,accuracy,config_hash"
        rows = read_csv(out / "accuracy_pfa.csv")
        assert all(len(r["adapted_acc"].split(".")[1]) == 2 for r in rows)

    def test_upload_cost(self, smoke_run):
        _, out, _ = smoke_run
        cost = json.loads((out / "upload_cost.json").read_text())
        assert cost["bytes_per_client"] == 64 and cost["q"] == 16

    def test_rerun_byte_identical(self, smoke_run, tmp_path):
        result, out, _ = smoke_run
        again = harness.run_experiment(smoke_config(), tmp_path)
        assert again.status == 0
        first = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
        second = {p.relative_to(tmp_path): p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
        assert first.keys() == second.keys()
        differing = {str(k) for k in first if first[k] != second[k]}
        assert differing <= {"timings.json"}

    def test_stage_failure_keeps_partial_artifacts(self, tmp_path):
        result = harness.run_experiment(smoke_config(pfe={"q": 999}), tmp_path)
        assert result.status == 2 and result.failed_stage == "pfe"
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "failed" and manifest["failed_stage"] == "pfe"
        assert (tmp_path / "fl_history.csv").exists()
        assert not (tmp_path / "groups.json").exists()

    def test_reuse_federated_model(self, smoke_run, tmp_path):
        result, out, _ = smoke_run
        again = harness.run_experiment(
            smoke_config(), tmp_path, federated=(result.federated_model, result.fl_history)
        )
        assert (tmp_path / "accuracy_pfa.csv").read_bytes() == (out / "accuracy_pfa.csv").read_bytes()
        assert again.accuracy == result.accuracy


class TestSweep:
    def test_full_channel_q_matches_brute_force(self, smoke_run, tmp_path):
        result, _, _ = smoke_run
        cfg = smoke_config()
        sweep = harness.sweep_extraction(
            cfg, [1, 1, 2], [64], tmp_path, federated=(result.federated_model, [])
        )
        fed = result.federation
        model = result.federated_model
        rows = [r for r in sweep.rows if r[0] == 1]
        assert [r[2] for r in rows] == fed.client_ids  # relu 1 appears once
        counts = {}
        for c in fed:
            _, trace = nn.forward(model, c.train.images, capture=True)
            counts[c.client_id] = (trace.relu_output(1) == 0).mean(axis=0)
        for r in rows:
            expected = float(np.sqrt(((counts[r[2]] - counts[1]) ** 2).sum()))
            assert float(r[3]) == pytest.approx(expected, abs=1e-6)
        # relu 2 has 32 units: q=64 is reported as a warning row
        assert sweep.warnings and sweep.warnings[0][:2] == (2, 64)
        assert any(r[0] == 2 and r[4].startswith("warning") for r in sweep.rows)
        assert (tmp_path / "sweep.csv").exists() and (tmp_path / "sweep_summary.csv").exists()

    def test_anchor_separation(self):
        truth = {1: 1, 2: 1, 3: 2, 4: 2}
        assert harness.anchor_separation({1: 0.0, 2: 0.1, 3: 0.5, 4: 0.7}, truth, 1) == (0.5, 0.1)


def write_accuracy(path, values, config_hash="h"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(harness.ACCURACY_HEADER) + ["config_hash"])
        for cid, (t, acc) in values.items():
            w.writerow([cid, t, 0, "0.00", f"{acc:.2f}", config_hash])


class TestCompare:
    def test_hand_fixture(self, tmp_path):
        write_accuracy(tmp_path / "accuracy_federated.csv", {1: (1, 50), 2: (1, 60), 3: (2, 70)})
        write_accuracy(tmp_path / "accuracy_random.csv", {1: (1, 40), 2: (1, 80), 3: (2, 70)})
        write_accuracy(tmp_path / "accuracy_pfa.csv", {1: (1, 90), 2: (1, 80), 3: (2, 70)})
        summary = harness.compare_methods(tmp_path)
        assert summary["mean_accuracy"] == {"federated": 60.0, "random": 63.33, "pfa": 80.0}
        assert summary["type_mean_accuracy"]["1"] == {"federated": 55.0, "random": 60.0, "pfa": 85.0}
        assert set(summary["table8"]) == {"federated learning", "random selection", "sparsity-based selection"}
        assert sorted(summary["absent"]) == ["baseline", "finetune"]
        rows = read_csv(tmp_path / "comparison.csv")
        assert [r["winner"] for r in rows[:3]] == ["pfa", "", ""]
        assert rows[-1]["client_id"] == "average" and rows[-1]["pfa"] == "80.00"

    def test_identical_methods_no_winner(self, tmp_path):
        write_accuracy(tmp_path / "accuracy_finetune.csv", {1: (1, 50), 2: (1, 60)})
        write_accuracy(tmp_path / "accuracy_pfa.csv", {1: (1, 50), 2: (1, 60)})
        harness.compare_methods(tmp_path)
        assert all(r["winner"] == "" for r in read_csv(tmp_path / "comparison.csv"))

    def test_mixed_configs_rejected(self, tmp_path):
        write_accuracy(tmp_path / "accuracy_finetune.csv", {1: (1, 50)}, "a")
        write_accuracy(tmp_path / "accuracy_pfa.csv", {1: (1, 50)}, "b")
        with pytest.raises(ComparisonError, match="different configs"):
            harness.compare_methods(tmp_path)

    def test_nothing_to_compare(self, tmp_path):
        with pytest.raises(ComparisonError):
            harness.compare_methods(tmp_path)

    def test_compare_on_run_updates_manifest(self, smoke_run):
        _, out, _ = smoke_run
        harness.compare_methods(out)
        manifest = json.loads((out / "manifest.json").read_text())
        paths = {f["path"] for f in manifest["files"]}
        assert {"comparison.csv", "comparison.json", "fl_history.csv"} <= paths
        assert manifest["status"] == "ok"


class TestCli:
    def test_run_and_compare(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text((REPO / "configs" / "smoke.toml").read_text())
        out = tmp_path / "run"
        assert cli.main(["run", str(cfg), "--out", str(out), "--no-figures", "--seed", "3"]) == 0
        assert json.loads((out / "config.json").read_text())["config"]["seed"] == 3
        assert not (out / "figures").exists()
        assert cli.main(["compare", str(out)]) == 0

    def test_exit_codes(self, tmp_path, capsys):
        assert cli.main(["run", str(tmp_path / "missing.toml")]) == 1
        bad = tmp_path / "bad.toml"
        bad.write_text('seed = 0\narchitecture = "mlp"\n[dataset]\nsamples_per_class = 20\n'
                       '[federation]\nn_clients = 2\nn_types = 2\nsamples_per_split = 10\n'
                       '[fl]\nrounds = 1\n[pfe]\nq = 999\n')
        assert cli.main(["run", str(bad), "--out", str(tmp_path / "o"), "--no-figures"]) == 2
        assert "stage 'pfe'" in capsys.readouterr().err
        assert cli.main(["compare", str(tmp_path)]) == 1

    def test_generate_data_roundtrip(self, tmp_path):
        assert cli.main(["generate-data", "--samples-per-class", "3", "--out", str(tmp_path)]) == 0
        ds = data.load_idx(tmp_path / "glyphs-images.idx", tmp_path / "glyphs-labels.idx")
        images, labels = synthetic.make_glyphs(3, 12, seed=0)
        assert np.array_equal(ds.labels, labels)
        assert np.array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), images)
