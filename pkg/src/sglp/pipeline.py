"""End-to-end orchestration: activations -> similarity -> segmentation ->
plan -> prune -> fine-tune, plus the desk-scale sweep experiments.

A run works from one of two sources: the built-in miniature network trained
on synthetic blob data (the self-contained path), or a pair of files (an
activation dump plus an externally computed score table) in which case the
pipeline stops after planning. Every run persists its artifacts under one
output directory:

    config.json         resolved configuration, all four seeds, digest
    dataset.json        synthetic dataset parameters (toy source only)
    network_*.bin       pretrained / pruned / fine-tuned checkpoints
    activations.actv    captured activations (ACTV1)
    similarity.csv      pairwise layer similarity matrix
    segmentation.json   the k-segment partition
    plan.json           the pruning plan with all candidate scores
    report.jsonl        append-only run records

All computation is a pure function of the config's seeds: re-running an
identical config reproduces the plan byte for byte. Wall-time fields in
report rows are the one deliberate exception.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import cka, io, planner, segmentation as seg_mod, toynet
from .errors import DataError, SglpError, StageError


@dataclass(frozen=True)
class TrainParams:
    epochs: int
    lr: float
    batch_size: int


@dataclass(frozen=True)
class Seeds:
    build: int
    data: int
    score: int
    finetune: int

    def as_dict(self) -> dict[str, int]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ToySource:
    """Self-contained source: train a miniature network on synthetic blobs."""

    input_dim: int = 2
    hidden_width: int = 8
    hidden_layers: int = 12
    classes: int = 4
    residual: bool = True
    n_train_per_class: int = 500
    n_test_per_class: int = 250
    spread: float = 1.1
    pretrain: TrainParams = TrainParams(epochs=40, lr=0.05, batch_size=64)
    score_batch: int = 256


@dataclass(frozen=True)
class FileSource:
    """External source: an ACTV1 activation dump plus a score table."""

    activations: str
    scores: str


@dataclass(frozen=True)
class PipelineConfig:
    source: ToySource | FileSource
    k: int
    budget: int | tuple[int, ...] | None
    mode: str
    seeds: Seeds
    out_dir: str
    finetune: TrainParams | None = None

    def resolved_finetune(self) -> TrainParams:
        """Fine-tuning defaults to a quarter of the pretraining epochs."""
        if self.finetune is not None:
            return self.finetune
        if not isinstance(self.source, ToySource):
            raise DataError("fine-tune parameters are only derivable for the toy source")
        p = self.source.pretrain
        return TrainParams(epochs=max(1, p.epochs // 4), lr=p.lr, batch_size=p.batch_size)


def config_to_doc(config: PipelineConfig) -> dict:
    doc = dataclasses.asdict(config)
    doc["source_kind"] = "toy" if isinstance(config.source, ToySource) else "file"
    if isinstance(config.budget, tuple):
        doc["budget"] = list(config.budget)
    return doc


def config_from_doc(doc: dict) -> PipelineConfig:
    try:
        kind = doc["source_kind"]
        raw_source = dict(doc["source"])
        if kind == "toy":
            raw_source["pretrain"] = TrainParams(**raw_source["pretrain"])
            source: ToySource | FileSource = ToySource(**raw_source)
        elif kind == "file":
            source = FileSource(**raw_source)
        else:
            raise DataError(f"unknown source kind {kind!r}")
        finetune = doc.get("finetune")
        budget = doc.get("budget")
        return PipelineConfig(
            source=source,
            k=int(doc["k"]),
            budget=tuple(budget) if isinstance(budget, list) else budget,
            mode=str(doc["mode"]),
            seeds=Seeds(**doc["seeds"]),
            out_dir=str(doc["out_dir"]),
            finetune=TrainParams(**finetune) if finetune else None,
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"invalid pipeline config: {exc}") from exc


def config_digest(config: PipelineConfig) -> str:
    """Identity of the computation: every config field except the output path."""
    doc = config_to_doc(config)
    doc.pop("out_dir")
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except SglpError as exc:
        raise StageError(f"stage {name!r}: {exc}") from exc


@dataclass
class _ToyState:
    """Everything the toy source produces before analysis starts."""

    network: toynet.Network
    history: list[toynet.EpochStats]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    score_x: np.ndarray
    score_y: np.ndarray


def _stratified_split(
    x: np.ndarray, y: np.ndarray, first_per_class: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    taken: dict[int, int] = {}
    in_first = np.zeros(len(y), dtype=bool)
    for i, label in enumerate(y):
        label = int(label)
        if taken.get(label, 0) < first_per_class:
            in_first[i] = True
            taken[label] = taken.get(label, 0) + 1
    return x[in_first], y[in_first], x[~in_first], y[~in_first]


def _prepare_toy(config: PipelineConfig) -> _ToyState:
    source = config.source
    assert isinstance(source, ToySource)
    with _stage("dataset"):
        x, y = toynet.make_blobs(
            n_per_class=source.n_train_per_class + source.n_test_per_class,
            classes=source.classes,
            dim=source.input_dim,
            spread=source.spread,
            seed=config.seeds.data,
        )
        train_x, train_y, test_x, test_y = _stratified_split(x, y, source.n_train_per_class)
    with _stage("pretrain"):
        spec = toynet.NetworkSpec(
            input_dim=source.input_dim,
            hidden_width=source.hidden_width,
            hidden_layers=source.hidden_layers,
            classes=source.classes,
            residual=source.residual,
            seed=config.seeds.build,
        )
        network = toynet.build_network(spec)
        network, history = toynet.train(
            network,
            train_x,
            train_y,
            epochs=source.pretrain.epochs,
            lr=source.pretrain.lr,
            batch_size=source.pretrain.batch_size,
            seed=config.seeds.build,
        )
    size = min(source.score_batch, len(train_x))
    return _ToyState(
        network=network,
        history=history,
        train_x=train_x,
        train_y=train_y,
        test_x=test_x,
        test_y=test_y,
        score_x=train_x[:size],
        score_y=train_y[:size],
    )


def _analyze(
    activations: io.ActivationSet, k: int, out: Path | None
) -> tuple[cka.SimilarityMatrix, seg_mod.Segmentation]:
    with _stage("similarity"):
        similarity = cka.similarity_matrix(activations)
        if out is not None:
            io.write_similarity_file(similarity.values, out / "similarity.csv")
    with _stage("segment"):
        sums = seg_mod.row_sums(similarity)
        segmentation = seg_mod.fisher_segment(sums, k, layer_names=similarity.layer_names)
        if out is not None:
            io.atomic_write_text(out / "segmentation.json", seg_mod.segmentation_to_json(segmentation))
    return similarity, segmentation


@dataclass
class RunResult:
    plan: planner.PruningPlan
    row: dict
    out_dir: Path


def _evaluate_and_report(
    config: PipelineConfig,
    state: _ToyState,
    plan_obj: planner.PruningPlan,
    out: Path,
    label: str,
    started: float,
    persist_networks: bool = True,
) -> dict:
    with _stage("prune"):
        pruned = toynet.prune(state.network, plan_obj.kept)
        if persist_networks:
            toynet.save_network_file(pruned, out / "network_pruned.bin")
    with _stage("finetune"):
        params = config.resolved_finetune()
        tuned, _ = toynet.train(
            pruned,
            state.train_x,
            state.train_y,
            epochs=params.epochs,
            lr=params.lr,
            batch_size=params.batch_size,
            seed=config.seeds.finetune,
        )
        if persist_networks:
            toynet.save_network_file(tuned, out / "network_finetuned.bin")
    with _stage("evaluate"):
        pre = toynet.accuracy(state.network, state.test_x, state.test_y)
        post = toynet.accuracy(pruned, state.test_x, state.test_y)
        final = toynet.accuracy(tuned, state.test_x, state.test_y)
        for value in (pre, post, final):
            if not 0.0 <= value <= 1.0:
                raise DataError(f"accuracy {value} outside [0, 1]")
    row = {
        "label": label,
        "config_digest": config_digest(config),
        "seeds": config.seeds.as_dict(),
        "k": plan_obj.segmentation.k,
        "budget": list(plan_obj.budget) if plan_obj.budget is not None else None,
        "plan": {"kept": list(plan_obj.kept), "removed": list(plan_obj.removed)},
        "pre_prune_accuracy": pre,
        "post_prune_accuracy": post,
        "post_finetune_accuracy": final,
        "params_before": state.network.param_count,
        "params_after": pruned.param_count,
        "candidate_count": sum(c.candidates_evaluated for c in plan_obj.per_segment),
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    _append_report_row(out, row)
    return row


def _append_report_row(out: Path, row: dict) -> None:
    with open(out / "report.jsonl", "a", encoding="utf-8") as handle:
        handle.write(json.dumps(row, sort_keys=True) + "\n")


def _write_config(config: PipelineConfig, out: Path) -> None:
    doc = config_to_doc(config)
    doc["digest"] = config_digest(config)
    doc["rng"] = "philox"
    io.atomic_write_text(out / "config.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _write_dataset_doc(config: PipelineConfig, out: Path) -> None:
    source = config.source
    assert isinstance(source, ToySource)
    doc = {
        "kind": "blobs",
        "n_train_per_class": source.n_train_per_class,
        "n_test_per_class": source.n_test_per_class,
        "classes": source.classes,
        "dim": source.input_dim,
        "spread": source.spread,
        "seed": config.seeds.data,
        "score_batch": source.score_batch,
    }
    io.atomic_write_text(out / "dataset.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_dataset_doc(path: Path | str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int]:
    """Regenerate (train_x, train_y, test_x, test_y, score_batch) from dataset.json."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("kind") != "blobs":
            raise DataError(f"unknown dataset kind {doc.get('kind')!r}")
        x, y = toynet.make_blobs(
            n_per_class=int(doc["n_train_per_class"]) + int(doc["n_test_per_class"]),
            classes=int(doc["classes"]),
            dim=int(doc["dim"]),
            spread=float(doc["spread"]),
            seed=int(doc["seed"]),
        )
        train_x, train_y, test_x, test_y = _stratified_split(x, y, int(doc["n_train_per_class"]))
        return train_x, train_y, test_x, test_y, int(doc.get("score_batch", len(train_x)))
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise DataError(f"invalid dataset document {path}: {exc}") from exc


def run(config: PipelineConfig, jobs: int = 1) -> RunResult:
    """Execute the full pipeline and persist every artifact.

    Toy source: pretrain, capture activations, similarity, segmentation,
    plan, prune, fine-tune, evaluate. File source: read the activation dump
    and score table, then stop after the plan is written.
    """
    started = time.perf_counter()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(config, out)

    if isinstance(config.source, ToySource):
        state = _prepare_toy(config)
        _write_dataset_doc(config, out)
        toynet.save_network_file(state.network, out / "network_pretrained.bin")
        with _stage("capture"):
            _, activations = toynet.forward(state.network, state.score_x, capture=True)
            assert activations is not None
            io.write_activations_file(activations, out / "activations.actv")
        _, segmentation = _analyze(activations, config.k, out)
        with _stage("plan"):
            scorer = planner.ToyGradNormScorer(
                network=state.network,
                batch=state.score_x,
                labels=state.score_y,
                segmentation=segmentation,
                mode=config.mode,
                seed=config.seeds.score,
            )
            plan_obj = planner.plan(
                scorer, segmentation, config.budget, config.mode, config.seeds.score, jobs=jobs
            )
            io.atomic_write_text(out / "plan.json", planner.plan_to_json(plan_obj))
        row = _evaluate_and_report(config, state, plan_obj, out, "run", started)
        return RunResult(plan_obj, row, out)

    with _stage("read-activations"):
        activations = io.read_activations_file(config.source.activations)
    _, segmentation = _analyze(activations, config.k, out)
    with _stage("read-scores"):
        table = io.read_score_table_file(config.source.scores)
        sizes = segmentation.sizes()
        for record in table.records:
            if record.segment_index >= len(sizes):
                raise DataError(
                    f"score table references segment {record.segment_index}, "
                    f"but the activations imply only {len(sizes)} segments"
                )
            if record.keep_mask >= 1 << sizes[record.segment_index]:
                raise DataError(
                    f"score table mask {record.keep_mask:#x} exceeds segment "
                    f"{record.segment_index} width {sizes[record.segment_index]}"
                )
    with _stage("plan"):
        plan_obj = planner.plan(
            planner.TableScorer(table), segmentation, config.budget, config.mode, config.seeds.score
        )
        io.atomic_write_text(out / "plan.json", planner.plan_to_json(plan_obj))
    row = {
        "label": "run",
        "config_digest": config_digest(config),
        "seeds": config.seeds.as_dict(),
        "k": segmentation.k,
        "budget": list(plan_obj.budget) if plan_obj.budget is not None else None,
        "plan": {"kept": list(plan_obj.kept), "removed": list(plan_obj.removed)},
        "pre_prune_accuracy": None,
        "post_prune_accuracy": None,
        "post_finetune_accuracy": None,
        "params_before": None,
        "params_after": None,
        "candidate_count": sum(c.candidates_evaluated for c in plan_obj.per_segment),
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    _append_report_row(out, row)
    return RunResult(plan_obj, row, out)


def replan(out_dir: Path | str) -> planner.PruningPlan:
    """Re-run only the planning stage from a finished run's artifacts.

    Loads config.json, the pretrained checkpoint and segmentation.json,
    regenerates the score batch from dataset.json, and plans again. The
    result must match the original plan exactly.
    """
    out = Path(out_dir)
    try:
        doc = json.loads((out / "config.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load config.json from {out}: {exc}") from exc
    doc.pop("digest", None)
    doc.pop("rng", None)
    config = config_from_doc(doc)
    if not isinstance(config.source, ToySource):
        raise DataError("replan only applies to toy-source runs")
    with _stage("replan"):
        network = toynet.load_network_file(out / "network_pretrained.bin")
        train_x, train_y, _, _, score_batch = load_dataset_doc(out / "dataset.json")
        size = min(score_batch, len(train_x))
        segmentation = seg_mod.segmentation_from_json(
            (out / "segmentation.json").read_text(encoding="utf-8")
        )
        scorer = planner.ToyGradNormScorer(
            network=network,
            batch=train_x[:size],
            labels=train_y[:size],
            segmentation=segmentation,
            mode=config.mode,
            seed=config.seeds.score,
        )
        return planner.plan(scorer, segmentation, config.budget, config.mode, config.seeds.score)


@dataclass
class ExperimentReport:
    rows: list[dict]
    summary: dict


def k_sweep(
    config: PipelineConfig, k_values: Sequence[int], fixed_total_kept: int, jobs: int = 1
) -> ExperimentReport:
    """Run the pipeline once per k with the same retained-layer total.

    The summary reports the post-finetune accuracy per k and the max-min
    spread across them.
    """
    if not isinstance(config.source, ToySource):
        raise DataError("sweeps need the toy source")
    layers = config.source.hidden_layers
    for k in k_values:
        if not 1 <= k <= layers or not k <= fixed_total_kept <= layers:
            raise DataError(f"k={k} with total {fixed_total_kept} infeasible for {layers} layers")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    accuracies = {}
    for k in k_values:
        sub = dataclasses.replace(
            config, k=int(k), budget=int(fixed_total_kept), out_dir=str(out / f"k_{k}")
        )
        result = run(sub, jobs=jobs)
        row = dict(result.row, label=f"k={k}")
        rows.append(row)
        accuracies[int(k)] = row["post_finetune_accuracy"]
        _append_report_row(out, row)
    values = list(accuracies.values())
    summary = {
        "kind": "k_sweep",
        "fixed_total_kept": int(fixed_total_kept),
        "accuracy_by_k": {str(k): v for k, v in accuracies.items()},
        "spread": max(values) - min(values),
    }
    _append_report_row(out, dict(summary, label="summary"))
    return ExperimentReport(rows, summary)


def depth_sweep(
    config: PipelineConfig, kept_totals: Sequence[int], jobs: int = 1
) -> ExperimentReport:
    """Run the pipeline once per retained-layer total at fixed k."""
    if not isinstance(config.source, ToySource):
        raise DataError("sweeps need the toy source")
    layers = config.source.hidden_layers
    for total in kept_totals:
        if not config.k <= total <= layers:
            raise DataError(f"kept total {total} outside {config.k}..{layers}")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    by_total: dict[int, dict] = {}
    for total in kept_totals:
        sub = dataclasses.replace(config, budget=int(total), out_dir=str(out / f"total_{total}"))
        result = run(sub, jobs=jobs)
        row = dict(result.row, label=f"total={total}")
        rows.append(row)
        by_total[int(total)] = row
        _append_report_row(out, row)
    summary = {
        "kind": "depth_sweep",
        "totals": [int(t) for t in kept_totals],
        "accuracy_by_total": {str(t): by_total[t]["post_finetune_accuracy"] for t in by_total},
        "params_by_total": {str(t): by_total[t]["params_after"] for t in by_total},
        "unpruned_accuracy": rows[0]["pre_prune_accuracy"] if rows else None,
    }
    _append_report_row(out, dict(summary, label="summary"))
    return ExperimentReport(rows, summary)


def baseline_compare(config: PipelineConfig, trials: int, jobs: int = 1) -> ExperimentReport:
    """One planned run plus ``trials`` random plans under the same budget.

    The random baselines share the pretrained network, segmentation, budget
    and fine-tuning schedule; only the kept masks differ. Rows: 1 + trials.
    """
    if trials < 1:
        raise DataError(f"trials must be >= 1, got {trials}")
    if not isinstance(config.source, ToySource):
        raise DataError("baseline comparison needs the toy source")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sglp_dir = dataclasses.replace(config, out_dir=str(out / "planned"))
    result = run(sglp_dir, jobs=jobs)
    rows = [dict(result.row, label="sglp")]
    _append_report_row(out, rows[0])

    state = _prepare_toy(config)
    segmentation = result.plan.segmentation
    random_accs = []
    for trial in range(trials):
        started = time.perf_counter()
        trial_seed = toynet.derive_seed(config.seeds.score, 1 + trial)
        plan_obj = planner.random_plan(segmentation, config.budget, seed=trial_seed)
        sub = out / f"random_{trial}"
        sub.mkdir(parents=True, exist_ok=True)
        io.atomic_write_text(sub / "plan.json", planner.plan_to_json(plan_obj))
        row = _evaluate_and_report(
            config, state, plan_obj, sub, f"random_trial={trial}", started, persist_networks=False
        )
        row = dict(row, label=f"random_trial={trial}")
        rows.append(row)
        random_accs.append(row["post_finetune_accuracy"])
        _append_report_row(out, row)
    summary = {
        "kind": "baseline_compare",
        "trials": trials,
        "sglp_accuracy": rows[0]["post_finetune_accuracy"],
        "random_mean": float(np.mean(random_accs)),
        "random_min": float(np.min(random_accs)),
        "random_max": float(np.max(random_accs)),
    }
    _append_report_row(out, dict(summary, label="summary"))
    return ExperimentReport(rows, summary)
