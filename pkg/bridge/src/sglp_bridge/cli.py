"""Command-line entry points: ``export-acts`` and ``export-scores``.

Models are loaded with ``torch.load`` (full pickles, trusted checkpoints
only). Batches are synthesized deterministically from the seed; pass
--input-shape to match the model's expected input.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .export import export_activations, export_scores, synthetic_batch
from .formats import BridgeError, read_segmentation
from .taps import TapSpec


def _load_model(path: str) -> torch.nn.Module:
    try:
        model = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise BridgeError(f"cannot load model {path}: {exc}") from exc
    if not isinstance(model, torch.nn.Module):
        raise BridgeError(f"{path} does not contain a torch module")
    return model


def _shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid shape {text!r}") from None


def main_export_acts(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="export-acts", description="capture per-layer activations into an ACTV1 file"
    )
    parser.add_argument("--model", required=True)
    parser.add_argument("--batch", type=int, required=True, help="synthetic batch size")
    parser.add_argument("--tap", action="append", required=True, help="module-path pattern (repeatable)")
    parser.add_argument("--input-shape", type=_shape, required=True, help="e.g. 3,32,32")
    parser.add_argument("--flatten", choices=("flatten", "channel-mean"), default="flatten")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    try:
        model = _load_model(args.model)
        tap = TapSpec(tuple(args.tap), args.flatten)
        batch, _ = synthetic_batch(model, args.batch, args.input_shape, args.seed)
        count = export_activations(model, batch, tap, args.out)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}: {count} bytes")
    return 0


def main_export_scores(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="export-scores",
        description="score every keep-mask candidate and write the planner's score table",
    )
    parser.add_argument("--model", required=True)
    parser.add_argument("--seg", required=True, help="segmentation document from the planner")
    parser.add_argument("--tap", action="append", required=True, help="module-path pattern (repeatable)")
    parser.add_argument("--budget", default=None, help="'free', a total, or a comma list")
    parser.add_argument("--mode", choices=("literal", "local"), default="literal")
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--input-shape", type=_shape, required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    try:
        model = _load_model(args.model)
        layout = read_segmentation(Path(args.seg).read_text(encoding="utf-8"))
        tap = TapSpec(tuple(args.tap), "flatten")
        batch, labels = synthetic_batch(model, args.batch, args.input_shape, args.seed)
        written, skipped = export_scores(
            model,
            layout,
            tap,
            batch,
            labels,
            args.out,
            budget=args.budget,
            mode=args.mode,
            seed=args.seed,
        )
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    status = f"{written} records"
    if skipped:
        status += f", {skipped} skipped (file marked partial)"
    print(f"wrote {args.out}: {status}")
    return 0 if not skipped else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main_export_acts())
