"""Command-line surface for each pipeline stage and the end-to-end runs.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal
error. Every subcommand prints its resolved configuration before doing any
work, and artifacts are written atomically (never partially).
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import sys
import traceback
from pathlib import Path

import numpy as np

from . import cka, io, pipeline, planner, reference, segmentation as seg_mod, toynet
from .errors import DataError, SglpError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: A002 - argparse API
        raise UsageError(message)


def _echo_config(name: str, values: dict) -> None:
    printable = {k: v for k, v in values.items() if v is not None and not callable(v)}
    print(f"config[{name}]: {json.dumps(printable, sort_keys=True, default=str)}")


def _resolve_seed(seed: int | None) -> int:
    if seed is None:
        seed = secrets.randbits(63)
        print(f"seed: {seed} (drawn; pass --seed {seed} to reproduce)")
    return int(seed)


def _resolve_jobs(jobs: int | None) -> int:
    if jobs is None:
        env = os.environ.get("SGLP_JOBS")
        if env is not None:
            try:
                jobs = int(env)
            except ValueError:
                raise DataError(f"SGLP_JOBS must be an integer, got {env!r}") from None
        else:
            jobs = os.cpu_count() or 1
    if jobs < 1:
        raise DataError(f"--jobs must be >= 1, got {jobs}")
    return jobs


def _parse_budget(text: str | None):
    if text is None or text == "free":
        return None
    if "," in text:
        try:
            return tuple(int(part) for part in text.split(","))
        except ValueError:
            raise UsageError(f"invalid budget {text!r}") from None
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"invalid budget {text!r} (expected 'free', an integer, or a comma list)") from None


def _cmd_cka(args) -> int:
    _echo_config("cka", {"activations": args.activations, "out": args.out})
    activations = io.read_activations_file(args.activations)
    matrix = cka.similarity_matrix(activations)
    io.write_similarity_file(matrix.values, args.out)
    print(f"wrote {args.out}: {len(matrix)}x{len(matrix)} similarity matrix")
    return 0


def _cmd_segment(args) -> int:
    if args.k < 1:
        raise UsageError(f"--k must be >= 1, got {args.k}")
    _echo_config("segment", {"matrix": args.matrix, "k": args.k, "out": args.out, "oracle": args.oracle})
    values = io.read_similarity_file(args.matrix)
    sums = seg_mod.row_sums(values)
    names = tuple(f"layer_{i + 1}" for i in range(len(sums)))
    result = seg_mod.fisher_segment(sums, args.k, layer_names=names)
    if args.oracle:
        check = seg_mod.brute_force_segment(sums, args.k, layer_names=names)
        if check.split_starts != result.split_starts or check.loss != result.loss:
            raise DataError(
                f"oracle mismatch: dp {result.split_starts}/{result.loss!r} "
                f"vs brute force {check.split_starts}/{check.loss!r}"
            )
        print(f"oracle: brute force agrees over {seg_mod.count_segmentations(len(sums), args.k)} candidates")
    io.atomic_write_text(args.out, seg_mod.segmentation_to_json(result))
    print(f"wrote {args.out}: k={result.k} loss={result.loss:.6g} sizes={result.sizes()}")
    return 0


def _cmd_plan(args) -> int:
    if (args.scores is None) == (args.net is None):
        raise UsageError("pass exactly one of --scores or --net/--data")
    if args.net is not None and args.data is None:
        raise UsageError("--net requires --data")
    seed = _resolve_seed(args.seed)
    jobs = _resolve_jobs(args.jobs)
    _echo_config(
        "plan",
        {
            "seg": args.seg,
            "net": args.net,
            "data": args.data,
            "scores": args.scores,
            "budget": args.budget,
            "mode": args.mode,
            "seed": seed,
            "jobs": jobs,
            "out": args.out,
        },
    )
    segmentation = seg_mod.segmentation_from_json(Path(args.seg).read_text(encoding="utf-8"))
    budget = _parse_budget(args.budget)
    if args.scores is not None:
        scorer: planner.Scorer = planner.TableScorer(io.read_score_table_file(args.scores))
    else:
        network = toynet.load_network_file(args.net)
        train_x, train_y, _, _, score_batch = pipeline.load_dataset_doc(args.data)
        size = min(score_batch, len(train_x))
        scorer = planner.ToyGradNormScorer(
            network=network,
            batch=train_x[:size],
            labels=train_y[:size],
            segmentation=segmentation,
            mode=args.mode,
            seed=seed,
        )
    result = planner.plan(scorer, segmentation, budget, args.mode, seed, jobs=jobs)
    io.atomic_write_text(args.out, planner.plan_to_json(result))
    print(f"wrote {args.out}: kept {len(result.kept)}/{result.segmentation.length} layers {list(result.kept)}")
    return 0


def _cmd_toy_pretrain(args) -> int:
    seed = _resolve_seed(args.seed)
    _echo_config("toy pretrain", vars(args) | {"seed": seed})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = pipeline.PipelineConfig(
        source=pipeline.ToySource(
            input_dim=args.input_dim,
            hidden_width=args.width,
            hidden_layers=args.layers,
            classes=args.classes,
            residual=not args.plain,
            n_train_per_class=args.n_per_class,
            n_test_per_class=max(1, args.n_per_class // 2),
            spread=args.spread,
            pretrain=pipeline.TrainParams(args.epochs, args.lr, args.batch_size),
            score_batch=args.score_batch,
        ),
        k=2,
        budget=None,
        mode="literal",
        seeds=pipeline.Seeds(build=seed, data=seed + 1, score=seed + 2, finetune=seed + 3),
        out_dir=str(out),
    )
    state = pipeline._prepare_toy(config)
    pipeline._write_dataset_doc(config, out)
    toynet.save_network_file(state.network, out / "network.bin")
    trace = [
        {"epoch": s.epoch, "loss": s.loss, "accuracy": s.accuracy} for s in state.history
    ]
    io.atomic_write_text(out / "pretrain_trace.json", json.dumps(trace, indent=2) + "\n")
    final = state.history[-1] if state.history else None
    test_acc = toynet.accuracy(state.network, state.test_x, state.test_y)
    print(
        f"wrote {out / 'network.bin'}: train acc "
        f"{final.accuracy if final else float('nan'):.4f}, test acc {test_acc:.4f}"
    )
    return 0


def _cmd_toy_prune(args) -> int:
    _echo_config("toy prune", {"net": args.net, "plan": args.plan, "out": args.out})
    network = toynet.load_network_file(args.net)
    plan_obj = planner.plan_from_json(Path(args.plan).read_text(encoding="utf-8"))
    if plan_obj.segmentation.length != network.hidden_layers:
        raise DataError(
            f"plan covers {plan_obj.segmentation.length} layers, network has {network.hidden_layers}"
        )
    pruned = toynet.prune(network, plan_obj.kept)
    toynet.save_network_file(pruned, args.out)
    print(
        f"wrote {args.out}: {pruned.hidden_layers} units, "
        f"{pruned.param_count} parameters (was {network.param_count})"
    )
    return 0


def _cmd_toy_eval(args) -> int:
    _echo_config("toy eval", {"net": args.net, "data": args.data, "split": args.split})
    network = toynet.load_network_file(args.net)
    train_x, train_y, test_x, test_y, _ = pipeline.load_dataset_doc(args.data)
    x, y = (train_x, train_y) if args.split == "train" else (test_x, test_y)
    value = toynet.accuracy(network, x, y)
    print(f"accuracy[{args.split}]: {value:.6f} over {len(y)} samples")
    return 0


def _load_pipeline_config(path: str) -> pipeline.PipelineConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    doc.pop("digest", None)
    doc.pop("rng", None)
    return pipeline.config_from_doc(doc)


def _cmd_run(args) -> int:
    jobs = _resolve_jobs(args.jobs)
    config = _load_pipeline_config(args.config)
    _echo_config("run", pipeline.config_to_doc(config) | {"jobs": jobs})
    result = pipeline.run(config, jobs=jobs)
    print(json.dumps(result.row, sort_keys=True))
    print(f"artifacts in {result.out_dir}")
    return 0


def _cmd_sweep(args) -> int:
    jobs = _resolve_jobs(args.jobs)
    config = _load_pipeline_config(args.config)
    if args.what == "k":
        k_values = [int(v) for v in args.k_values.split(",")]
        _echo_config("sweep k", {"config": args.config, "k_values": k_values, "total": args.total})
        report = pipeline.k_sweep(config, k_values, args.total, jobs=jobs)
    elif args.what == "depth":
        totals = [int(v) for v in args.totals.split(",")]
        _echo_config("sweep depth", {"config": args.config, "totals": totals})
        report = pipeline.depth_sweep(config, totals, jobs=jobs)
    else:
        _echo_config("sweep baseline", {"config": args.config, "trials": args.trials})
        report = pipeline.baseline_compare(config, args.trials, jobs=jobs)
    print(json.dumps(report.summary, sort_keys=True))
    return 0


def _cmd_reference_config(args) -> int:
    _echo_config("reference-config", {"out": args.out, "out_dir": args.out_dir})
    config = reference.reference_config(args.out_dir, k=args.k, budget=_parse_budget(args.budget))
    doc = pipeline.config_to_doc(config)
    doc["digest"] = pipeline.config_digest(config)
    doc["rng"] = "philox"
    io.atomic_write_text(args.out, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    print(f"wrote {args.out}")
    return 0


def _cmd_selfcheck(args) -> int:
    _echo_config("selfcheck", {})
    failures = 0

    def report(name: str, ok: bool, detail: str = "") -> None:
        nonlocal failures
        status = "ok" if ok else "FAIL"
        print(f"selfcheck {name}: {status}{' - ' + detail if detail else ''}")
        if not ok:
            failures += 1

    rng = np.random.Generator(np.random.Philox(99))

    # activation round-trip
    try:
        import io as std_io

        mats = [rng.standard_normal((6, d)).astype(np.float32) for d in (3, 4, 2)]
        acts = io.ActivationSet.from_matrices(["a", "b", "c"], mats)
        buffer = std_io.BytesIO()
        count = io.write_activations(acts, buffer)
        buffer.seek(0)
        back = io.read_activations(buffer)
        ok = count == len(buffer.getvalue()) and all(
            np.array_equal(x.matrix, y.matrix) for x, y in zip(acts.layers, back.layers)
        )
        report("activation-roundtrip", ok)
    except Exception as exc:  # pragma: no cover - selfcheck reports, never raises
        report("activation-roundtrip", False, str(exc))

    # CKA invariances
    try:
        x = rng.standard_normal((40, 5))
        y = rng.standard_normal((40, 3))
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        ok = (
            abs(cka.cka_pair(x, x) - 1.0) <= 1e-9
            and abs(cka.cka_pair(x, y) - cka.cka_pair(x @ q, y)) <= 1e-6
            and abs(cka.cka_pair(x, y) - cka.cka_pair(-3.0 * x, y)) <= 1e-9
            and abs(cka.cka_pair(x, y) - cka.cka_pair_gram(x, y)) <= 1e-9
        )
        report("cka-invariance", ok)
    except Exception as exc:  # pragma: no cover
        report("cka-invariance", False, str(exc))

    # segmentation dp vs brute force
    try:
        ok = True
        for trial in range(30):
            length = int(rng.integers(2, 11))
            k = int(rng.integers(1, min(length, 5) + 1))
            a = rng.standard_normal(length)
            dp = seg_mod.fisher_segment(a, k)
            bf = seg_mod.brute_force_segment(a, k)
            if dp.split_starts != bf.split_starts or dp.loss != bf.loss:
                ok = False
                break
        report("segmentation-oracle", ok)
    except Exception as exc:  # pragma: no cover
        report("segmentation-oracle", False, str(exc))

    # gradient vs finite differences
    try:
        spec = toynet.NetworkSpec(3, 4, 3, 3, residual=True, seed=12)
        net = toynet.build_network(spec)
        bx = rng.standard_normal((8, 3))
        by = rng.integers(0, 3, size=8)
        grads = toynet.backward(net, bx, by)
        worst = 0.0
        step = 1e-5
        for param, grad in zip(net.parameters(), grads.tensors()):
            flat_p = param.ravel()
            flat_g = grad.ravel()
            for idx in range(0, flat_p.size, max(1, flat_p.size // 4)):
                orig = flat_p[idx]
                flat_p[idx] = orig + step
                up = toynet.loss(toynet.forward(net, bx)[0], by)
                flat_p[idx] = orig - step
                down = toynet.loss(toynet.forward(net, bx)[0], by)
                flat_p[idx] = orig
                fd = (up - down) / (2 * step)
                err = abs(fd - flat_g[idx]) / max(abs(fd), abs(flat_g[idx]), 1e-3)
                worst = max(worst, err)
        report("gradient-oracle", worst <= 1e-4, f"max rel err {worst:.2e}")
    except Exception as exc:  # pragma: no cover
        report("gradient-oracle", False, str(exc))

    # planner argmax + tie-break
    try:
        seg = seg_mod.Segmentation((0, 2), 4, 0.0)
        records = []
        for index, size in enumerate(seg.sizes()):
            for mask in planner.enumerate_masks(size):
                records.append(io.ScoreRecord(index, mask, float(bin(mask).count("1"))))
        table = io.ScoreTable(tuple(records))
        result = planner.plan(planner.TableScorer(table), seg)
        report("planner-argmax", result.kept == (0, 1, 2, 3))
    except Exception as exc:  # pragma: no cover
        report("planner-argmax", False, str(exc))

    if failures:
        print(f"selfcheck: {failures} suite(s) failed")
        return 2
    print("selfcheck: all suites passed")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="sglp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cka", help="activation dump -> similarity matrix")
    p.add_argument("--activations", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cka)

    p = sub.add_parser("segment", help="similarity matrix -> k-segment partition")
    p.add_argument("--matrix", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", action="store_true", help="cross-check against brute force")
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("plan", help="segmentation + scores -> pruning plan")
    p.add_argument("--seg", required=True)
    p.add_argument("--net")
    p.add_argument("--data")
    p.add_argument("--scores")
    p.add_argument("--budget", default=None, help="'free', a total, or per-segment comma list")
    p.add_argument("--mode", choices=("literal", "local"), default="literal")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plan)

    toy = sub.add_parser("toy", help="miniature network utilities")
    toy_sub = toy.add_subparsers(dest="toy_command", required=True)

    p = toy_sub.add_parser("pretrain", help="train a fresh miniature network on blob data")
    p.add_argument("--input-dim", type=int, default=2)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--plain", action="store_true", help="disable residual skips")
    p.add_argument("--n-per-class", type=int, default=500)
    p.add_argument("--spread", type=float, default=1.1)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--score-batch", type=int, default=256)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_toy_pretrain)

    p = toy_sub.add_parser("prune", help="apply a plan to a checkpoint")
    p.add_argument("--net", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_toy_prune)

    p = toy_sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("--net", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=_cmd_toy_eval)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="multi-run experiments")
    sweep_sub = p.add_subparsers(dest="what", required=True)
    pk = sweep_sub.add_parser("k", help="same kept total across several k values")
    pk.add_argument("--config", required=True)
    pk.add_argument("--k-values", required=True)
    pk.add_argument("--total", type=int, required=True)
    pk.add_argument("--jobs", type=int)
    pk.set_defaults(func=_cmd_sweep, what="k")
    pd = sweep_sub.add_parser("depth", help="accuracy versus kept-layer total")
    pd.add_argument("--config", required=True)
    pd.add_argument("--totals", required=True)
    pd.add_argument("--jobs", type=int)
    pd.set_defaults(func=_cmd_sweep, what="depth")
    pb = sweep_sub.add_parser("baseline", help="planned run versus random plans")
    pb.add_argument("--config", required=True)
    pb.add_argument("--trials", type=int, default=10)
    pb.add_argument("--jobs", type=int)
    pb.set_defaults(func=_cmd_sweep, what="baseline")

    p = sub.add_parser("reference-config", help="write the canonical desk-scale config")
    p.add_argument("--out", required=True)
    p.add_argument("--out-dir", default="runs/reference", help="artifact directory the config points at")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--budget", default="8")
    p.set_defaults(func=_cmd_reference_config)

    p = sub.add_parser("selfcheck", help="run the embedded oracle suites")
    p.set_defaults(func=_cmd_selfcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SglpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 3
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
