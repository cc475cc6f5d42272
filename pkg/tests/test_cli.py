import json

import numpy as np
import pytest

from sglp import io, pipeline, planner, toynet
from sglp.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_activation_fixture(path, seed=0, layers=4, n=16, width=3):
    rng = np.random.Generator(np.random.Philox(seed))
    mats = [rng.standard_normal((n, width)) for _ in range(layers)]
    acts = io.ActivationSet.from_matrices([f"l{i}" for i in range(layers)], mats)
    io.write_activations_file(acts, path)
    return acts


class TestUsageErrors:
    def test_unknown_flag_is_fatal(self, capsys):
        code, _, err = run_cli(capsys, "segment", "--matrix", "m.csv", "--k", "2", "--out", "s.json", "--bogus")
        assert code == 1
        assert "bogus" in err

    def test_segment_k_zero(self, capsys, tmp_path):
        matrix = tmp_path / "m.csv"
        io.write_similarity_file(np.eye(3), matrix)
        code, _, err = run_cli(capsys, "segment", "--matrix", str(matrix), "--k", "0", "--out", str(tmp_path / "s.json"))
        assert code == 1
        assert "usage error" in err

    def test_missing_subcommand(self, capsys):
        code, _, err = run_cli(capsys)
        assert code == 1

    def test_plan_requires_one_score_source(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "plan", "--seg", "s.json", "--out", "p.json")
        assert code == 1
        assert "exactly one" in err


class TestDataErrors:
    def test_cka_truncated_activations(self, capsys, tmp_path):
        path = tmp_path / "acts.bin"
        write_activation_fixture(path)
        data = path.read_bytes()
        path.write_bytes(data[:-7])
        code, _, err = run_cli(capsys, "cka", "--activations", str(path), "--out", str(tmp_path / "m.csv"))
        assert code == 2
        assert "unexpected end" in err
        assert not (tmp_path / "m.csv").exists()

    def test_segment_infeasible_k_exits_2_without_artifact(self, capsys, tmp_path):
        matrix = tmp_path / "m.csv"
        io.write_similarity_file(np.eye(3), matrix)
        out = tmp_path / "s.json"
        code, _, err = run_cli(capsys, "segment", "--matrix", str(matrix), "--k", "9", "--out", str(out))
        assert code == 2
        assert not out.exists()


class TestStageCommands:
    def test_full_stage_flow(self, capsys, tmp_path):
        out_dir = tmp_path / "toy"
        code, out, _ = run_cli(
            capsys,
            "toy", "pretrain",
            "--layers", "6", "--width", "4", "--classes", "3",
            "--n-per-class", "40", "--epochs", "6", "--seed", "3",
            "--out-dir", str(out_dir),
        )
        assert code == 0
        assert "config[toy pretrain]" in out

        acts = tmp_path / "acts.bin"
        net_path = out_dir / "network.bin"
        network = toynet.load_network_file(net_path)
        train_x, train_y, _, _, score_batch = pipeline.load_dataset_doc(out_dir / "dataset.json")
        _, captured = toynet.forward(network, train_x[:score_batch], capture=True)
        io.write_activations_file(captured, acts)

        matrix = tmp_path / "m.csv"
        code, _, _ = run_cli(capsys, "cka", "--activations", str(acts), "--out", str(matrix))
        assert code == 0

        seg_path = tmp_path / "s.json"
        code, out, _ = run_cli(
            capsys, "segment", "--matrix", str(matrix), "--k", "3", "--out", str(seg_path), "--oracle"
        )
        assert code == 0
        assert "oracle: brute force agrees" in out

        plan_path = tmp_path / "p.json"
        code, _, _ = run_cli(
            capsys,
            "plan", "--seg", str(seg_path),
            "--net", str(net_path), "--data", str(out_dir / "dataset.json"),
            "--budget", "4", "--mode", "literal", "--seed", "5",
            "--jobs", "1", "--out", str(plan_path),
        )
        assert code == 0
        plan_obj = planner.plan_from_json(plan_path.read_text())
        assert len(plan_obj.kept) == 4

        pruned_path = tmp_path / "pruned.bin"
        code, out, _ = run_cli(
            capsys, "toy", "prune", "--net", str(net_path), "--plan", str(plan_path), "--out", str(pruned_path)
        )
        assert code == 0
        pruned = toynet.load_network_file(pruned_path)
        assert pruned.hidden_layers == 4

        code, out, _ = run_cli(
            capsys, "toy", "eval", "--net", str(pruned_path), "--data", str(out_dir / "dataset.json")
        )
        assert code == 0
        assert "accuracy[test]:" in out

    def test_plan_with_score_table(self, capsys, tmp_path):
        from sglp.segmentation import Segmentation, segmentation_to_json

        seg = Segmentation((0, 2), 4, 0.0)
        seg_path = tmp_path / "s.json"
        seg_path.write_text(segmentation_to_json(seg))
        records = []
        for index, size in enumerate(seg.sizes()):
            for mask in planner.enumerate_masks(size):
                records.append(io.ScoreRecord(index, mask, float(mask)))
        table_path = tmp_path / "t.tsv"
        io.write_score_table_file(io.ScoreTable(tuple(records)), table_path)
        plan_path = tmp_path / "p.json"
        code, _, _ = run_cli(
            capsys,
            "plan", "--seg", str(seg_path), "--scores", str(table_path),
            "--budget", "free", "--seed", "1", "--out", str(plan_path),
        )
        assert code == 0
        plan_obj = planner.plan_from_json(plan_path.read_text())
        assert plan_obj.kept == (0, 1, 2, 3)

    def test_seed_drawn_and_printed_when_omitted(self, capsys, tmp_path):
        from sglp.segmentation import Segmentation, segmentation_to_json

        seg = Segmentation((0,), 2, 0.0)
        seg_path = tmp_path / "s.json"
        seg_path.write_text(segmentation_to_json(seg))
        records = [io.ScoreRecord(0, m, float(m)) for m in (1, 2, 3)]
        table_path = tmp_path / "t.tsv"
        io.write_score_table_file(io.ScoreTable(tuple(records)), table_path)
        code, out, _ = run_cli(
            capsys, "plan", "--seg", str(seg_path), "--scores", str(table_path),
            "--out", str(tmp_path / "p.json"),
        )
        assert code == 0
        assert "seed:" in out and "drawn" in out


class TestRunAndSweep:
    def write_config(self, tmp_path):
        config = pipeline.PipelineConfig(
            source=pipeline.ToySource(
                hidden_layers=6,
                hidden_width=4,
                classes=3,
                n_train_per_class=40,
                n_test_per_class=20,
                pretrain=pipeline.TrainParams(epochs=6, lr=0.05, batch_size=32),
                score_batch=64,
            ),
            k=3,
            budget=4,
            mode="literal",
            seeds=pipeline.Seeds(1, 114, 3, 4),
            out_dir=str(tmp_path / "run_out"),
        )
        path = tmp_path / "config.json"
        path.write_text(json.dumps(pipeline.config_to_doc(config), indent=2))
        return path

    def test_run(self, capsys, tmp_path):
        config_path = self.write_config(tmp_path)
        code, out, _ = run_cli(capsys, "run", "--config", str(config_path), "--jobs", "1")
        assert code == 0
        assert (tmp_path / "run_out" / "plan.json").exists()
        assert "artifacts in" in out

    def test_sweep_baseline(self, capsys, tmp_path):
        config_path = self.write_config(tmp_path)
        code, out, _ = run_cli(
            capsys, "sweep", "baseline", "--config", str(config_path), "--trials", "2", "--jobs", "1"
        )
        assert code == 0
        summary = json.loads(out.strip().splitlines()[-1])
        assert summary["trials"] == 2

    def test_reference_config_round_trips(self, capsys, tmp_path):
        out = tmp_path / "ref.json"
        code, _, _ = run_cli(capsys, "reference-config", "--out", str(out), "--out-dir", str(tmp_path / "ref_run"))
        assert code == 0
        doc = json.loads(out.read_text())
        doc.pop("digest")
        doc.pop("rng")
        config = pipeline.config_from_doc(doc)
        assert config.k == 4 and config.budget == 8

    def test_jobs_env_fallback_rejects_garbage(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("SGLP_JOBS", "not-a-number")
        config_path = self.write_config(tmp_path)
        code, _, err = run_cli(capsys, "run", "--config", str(config_path))
        assert code == 2
        assert "SGLP_JOBS" in err


class TestSelfcheck:
    def test_selfcheck_passes(self, capsys):
        code, out, _ = run_cli(capsys, "selfcheck")
        assert code == 0
        lines = [line for line in out.splitlines() if line.startswith("selfcheck ")]
        assert len(lines) >= 5
        assert all(": ok" in line for line in lines)
