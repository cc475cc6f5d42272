import json
import warnings
from collections import OrderedDict

import numpy as np
import pytest
import torch
from torch import nn

import sglp
from sglp.io import read_activations_file, read_score_table_file
from sglp.segmentation import segmentation_from_json

from sglp_bridge import (
    BridgeError,
    TapSpec,
    export_activations,
    export_scores,
    read_segmentation,
    synthetic_batch,
)
from sglp_bridge.cli import main_export_acts, main_export_scores
from sglp_bridge.export import _grad_norm
from sglp_bridge.formats import apportion_budget, enumerate_masks


class Block(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.linear = nn.Linear(width, width)
        self.act = nn.ReLU()

    def forward(self, x):
        return x + self.act(self.linear(x))


def reference_model(width=6, blocks=3, classes=3, in_dim=4, seed=0):
    torch.manual_seed(seed)
    layers = OrderedDict()
    layers["stem"] = nn.Linear(in_dim, width)
    for i in range(blocks):
        layers[f"block{i}"] = Block(width)
    layers["head"] = nn.Linear(width, classes)
    return nn.Sequential(layers)


def conv_model(channels=5, classes=2, seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(
        OrderedDict(
            stem=nn.Conv2d(3, channels, 3, padding=1),
            block0=nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU()),
            block1=nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU()),
            pool=nn.AdaptiveAvgPool2d(1),
            flatten=nn.Flatten(),
            head=nn.Linear(channels, classes),
        )
    )


def segmentation_doc(split_starts_one_based, length):
    return json.dumps(
        {
            "k": len(split_starts_one_based),
            "split_starts": split_starts_one_based,
            "length": length,
            "loss": 0.0,
            "layer_names": None,
        }
    )


class TestExportActivations:
    def test_accepted_by_primary_reader(self, tmp_path):
        model = reference_model()
        batch, _ = synthetic_batch(model, 4, (4,), seed=1)
        out = tmp_path / "acts.actv"
        count = export_activations(model, batch, TapSpec(("block*",)), out)
        assert count == out.stat().st_size
        with warnings.catch_warnings():
            warnings.simplefilter("error")  # zero warnings allowed
            acts = read_activations_file(out)
        assert len(acts) == 3
        assert acts.n_samples == 4
        assert acts.layer_names == ("block0", "block1", "block2")
        assert all(layer.matrix.shape == (4, 6) for layer in acts.layers)

    def test_channel_mean_reduces_to_channels(self, tmp_path):
        model = conv_model(channels=5)
        batch, _ = synthetic_batch(model, 4, (3, 8, 8), seed=2)
        out = tmp_path / "conv.actv"
        export_activations(model, batch, TapSpec(("block*",), "channel-mean"), out)
        acts = read_activations_file(out)
        assert all(layer.matrix.shape == (4, 5) for layer in acts.layers)

    def test_flatten_keeps_everything(self, tmp_path):
        model = conv_model(channels=5)
        batch, _ = synthetic_batch(model, 4, (3, 8, 8), seed=2)
        out = tmp_path / "conv_flat.actv"
        export_activations(model, batch, TapSpec(("block*",), "flatten"), out)
        acts = read_activations_file(out)
        assert all(layer.matrix.shape == (4, 5 * 8 * 8) for layer in acts.layers)

    def test_zero_matches_rejected(self, tmp_path):
        model = reference_model()
        batch, _ = synthetic_batch(model, 4, (4,), seed=1)
        with pytest.raises(BridgeError, match="matched 0"):
            export_activations(model, batch, TapSpec(("nothing*",)), tmp_path / "x.actv")

    def test_single_match_rejected(self, tmp_path):
        model = reference_model()
        batch, _ = synthetic_batch(model, 4, (4,), seed=1)
        with pytest.raises(BridgeError, match="need at least 2"):
            export_activations(model, batch, TapSpec(("block0",)), tmp_path / "x.actv")

    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            model = reference_model(seed=7)
            batch, _ = synthetic_batch(model, 8, (4,), seed=9)
            export_activations(model, batch, TapSpec(("block*",)), tmp_path / f"{name}.actv")
        assert (tmp_path / "a.actv").read_bytes() == (tmp_path / "b.actv").read_bytes()


class TestExportScores:
    def test_acceptance_contract(self, tmp_path):
        """Bridge files parse through the primary readers with zero warnings,
        and the record count equals the planner's candidate_count."""
        model = reference_model()
        seg_text = segmentation_doc([1, 2], 3)
        (tmp_path / "seg.json").write_text(seg_text)
        layout = read_segmentation(seg_text)
        batch, labels = synthetic_batch(model, 16, (4,), seed=3)
        out = tmp_path / "scores.tsv"
        written, skipped = export_scores(
            model, layout, TapSpec(("block*",)), batch, labels, out, budget=None, seed=5
        )
        assert skipped == 0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            table = read_score_table_file(out)
        segmentation = segmentation_from_json(seg_text)
        assert len(table.records) == written == sglp.candidate_count(segmentation, None)

    def test_budgeted_record_count_matches_planner(self, tmp_path):
        model = reference_model(blocks=4)
        seg_text = segmentation_doc([1, 3], 4)
        layout = read_segmentation(seg_text)
        batch, labels = synthetic_batch(model, 8, (4,), seed=4)
        out = tmp_path / "scores.tsv"
        written, skipped = export_scores(
            model, layout, TapSpec(("block*",)), batch, labels, out, budget=2, seed=5
        )
        assert skipped == 0
        table = read_score_table_file(out)
        segmentation = segmentation_from_json(seg_text)
        assert len(table.records) == written == sglp.candidate_count(segmentation, 2)

    def test_all_kept_local_mode_equals_pretrained_grad_norm(self, tmp_path):
        model = reference_model()
        seg_text = segmentation_doc([1], 3)  # one segment of all 3 blocks
        layout = read_segmentation(seg_text)
        batch, labels = synthetic_batch(model, 16, (4,), seed=6)
        out = tmp_path / "scores.tsv"
        export_scores(
            model, layout, TapSpec(("block*",)), batch, labels, out, budget=None, mode="local", seed=7
        )
        table = read_score_table_file(out)
        all_kept = {r.keep_mask: r.score for r in table.records}[0b111]

        model.zero_grad(set_to_none=True)
        loss = nn.CrossEntropyLoss()(model(batch), labels)
        loss.backward()
        expected = _grad_norm(model)
        assert all_kept == pytest.approx(expected, rel=1e-9)

    def test_deterministic_bytes(self, tmp_path):
        seg_text = segmentation_doc([1, 2], 3)
        layout = read_segmentation(seg_text)
        for name in ("a", "b"):
            model = reference_model(seed=11)
            batch, labels = synthetic_batch(model, 8, (4,), seed=12)
            export_scores(
                model, layout, TapSpec(("block*",)), batch, labels, tmp_path / f"{name}.tsv", seed=13
            )
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    def test_layer_count_mismatch(self, tmp_path):
        model = reference_model(blocks=3)
        layout = read_segmentation(segmentation_doc([1, 2], 4))
        batch, labels = synthetic_batch(model, 8, (4,), seed=1)
        with pytest.raises(BridgeError, match="tap patterns match 3"):
            export_scores(model, layout, TapSpec(("block*",)), batch, labels, tmp_path / "x.tsv")

    def test_non_finite_loss_marks_file_partial(self, tmp_path):
        model = reference_model()
        with torch.no_grad():
            model.head.weight[0, 0] = float("nan")
        seg_text = segmentation_doc([1, 2], 3)
        layout = read_segmentation(seg_text)
        batch, labels = synthetic_batch(model, 8, (4,), seed=2)
        out = tmp_path / "partial.tsv"
        written, skipped = export_scores(
            model, layout, TapSpec(("block*",)), batch, labels, out, seed=3
        )
        assert written == 0 and skipped > 0
        assert "#!partial" in out.read_text()
        with pytest.raises(sglp.FormatError, match="partial"):
            read_score_table_file(out)


class TestBudgetCompatibility:
    def test_apportionment_matches_planner(self):
        from sglp.planner import apportion_budget as planner_apportion

        cases = [
            (8, [3, 3, 3, 3]),
            (7, [2, 3, 5]),
            (4, [1, 5, 3, 3]),
            (9, [1, 1, 8]),
            (5, [4, 1]),
        ]
        for total, sizes in cases:
            assert apportion_budget(total, sizes) == planner_apportion(total, sizes)

    def test_mask_enumeration_matches_planner(self):
        from sglp.planner import enumerate_masks as planner_masks

        for size in range(1, 9):
            assert enumerate_masks(size) == planner_masks(size)
            for count in range(1, size + 1):
                assert enumerate_masks(size, count) == planner_masks(size, count)


class TestCli:
    def test_export_acts_cli(self, tmp_path, capsys):
        model = reference_model()
        model_path = tmp_path / "model.pt"
        torch.save(model, model_path)
        out = tmp_path / "acts.actv"
        code = main_export_acts(
            [
                "--model", str(model_path),
                "--batch", "4",
                "--tap", "block*",
                "--input-shape", "4",
                "--seed", "1",
                "--out", str(out),
            ]
        )
        assert code == 0
        acts = read_activations_file(out)
        assert len(acts) == 3

    def test_export_scores_cli(self, tmp_path, capsys):
        model = reference_model()
        model_path = tmp_path / "model.pt"
        torch.save(model, model_path)
        seg_path = tmp_path / "seg.json"
        seg_path.write_text(segmentation_doc([1, 2], 3))
        out = tmp_path / "scores.tsv"
        code = main_export_scores(
            [
                "--model", str(model_path),
                "--seg", str(seg_path),
                "--tap", "block*",
                "--budget", "free",
                "--mode", "literal",
                "--batch", "8",
                "--input-shape", "4",
                "--seed", "2",
                "--out", str(out),
            ]
        )
        assert code == 0
        table = read_score_table_file(out)
        assert len(table.records) == (2**1 - 1) + (2**2 - 1)

    def test_missing_model_file(self, tmp_path, capsys):
        code = main_export_acts(
            [
                "--model", str(tmp_path / "nope.pt"),
                "--batch", "4",
                "--tap", "block*",
                "--input-shape", "4",
                "--out", str(tmp_path / "x.actv"),
            ]
        )
        assert code == 2
        assert "cannot load model" in capsys.readouterr().err


class TestEndToEndWithPlanner:
    def test_bridge_files_drive_the_primary_pipeline(self, tmp_path):
        """Full loop: bridge exports -> primary analyzes, segments, plans."""
        from sglp.pipeline import FileSource, PipelineConfig, Seeds, run

        model = reference_model(width=8, blocks=4)
        batch, labels = synthetic_batch(model, 32, (4,), seed=21)
        acts_path = tmp_path / "acts.actv"
        export_activations(model, batch, TapSpec(("block*",)), acts_path)

        # primary computes the segmentation these activations imply
        acts = read_activations_file(acts_path)
        matrix = sglp.similarity_matrix(acts)
        segmentation = sglp.fisher_segment(sglp.row_sums(matrix), 2, layer_names=matrix.layer_names)
        seg_json = sglp.segmentation_to_json(segmentation)
        layout = read_segmentation(seg_json)

        scores_path = tmp_path / "scores.tsv"
        export_scores(model, layout, TapSpec(("block*",)), batch, labels, scores_path, seed=22)

        config = PipelineConfig(
            source=FileSource(activations=str(acts_path), scores=str(scores_path)),
            k=2,
            budget=None,
            mode="literal",
            seeds=Seeds(0, 0, 22, 0),
            out_dir=str(tmp_path / "plan_run"),
        )
        result = run(config)
        assert result.plan.segmentation.split_starts == segmentation.split_starts
        assert len(result.plan.kept) >= 2
        assert result.row["candidate_count"] == sglp.candidate_count(segmentation, None)
