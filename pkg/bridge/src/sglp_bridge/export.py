"""The two export operations: activation dumps and gradient-norm score tables.

Scoring follows the planner's hybrid-initialization contract: for each
candidate keep mask, the kept tapped units retain the pretrained weights and
the other tapped units are re-drawn from a candidate-specific generator
(every unit outside the searched segment too in ``literal`` mode, only the
segment's own units in ``local`` mode); one forward/backward pass on the
fixed batch then yields the Euclidean norm of all parameter gradients.
Everything is single-threaded and keyed by explicit seeds: determinism
outranks speed here.
"""

from __future__ import annotations

import io
import math
import os
import tempfile

import numpy as np
import torch
from torch import nn

from .formats import (
    BridgeError,
    SegmentLayout,
    enumerate_masks,
    mask_positions,
    resolve_budget,
    write_activations,
    write_score_table,
)
from .taps import TapSpec, capture_activations, match_taps


def _atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=os.path.basename(path) + ".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_activations(
    model: nn.Module, batch: torch.Tensor, tap: TapSpec, out_path: str | os.PathLike
) -> int:
    """Capture every tapped unit's output and write an ACTV1 file.

    Layer names are the module paths, in forward execution order. Returns the
    byte count written.
    """
    if not torch.isfinite(batch).all():
        raise BridgeError("batch contains non-finite values")
    names, matrices = capture_activations(model, batch, tap)
    buffer = io.BytesIO()
    count = write_activations(names, matrices, buffer)
    _atomic_write(out_path, buffer.getvalue())
    return count


def _candidate_generator(seed: int, segment: int, mask: int) -> torch.Generator:
    mixed = int(np.random.SeedSequence([int(seed), segment, mask]).generate_state(1, np.uint64)[0])
    generator = torch.Generator()
    generator.manual_seed(mixed & (2**63 - 1))
    return generator


def _reinit_module(module: nn.Module, generator: torch.Generator) -> None:
    # fan-in-scaled uniform, mirroring the planner's re-initialization convention
    with torch.no_grad():
        for parameter in module.parameters():
            if parameter.dim() >= 2:
                fan_in = int(np.prod(parameter.shape[1:]))
            else:
                fan_in = max(1, parameter.shape[0])
            bound = 1.0 / math.sqrt(fan_in)
            parameter.uniform_(-bound, bound, generator=generator)


def _grad_norm(model: nn.Module) -> float:
    total = 0.0
    for parameter in model.parameters():
        if parameter.grad is not None:
            total += float(parameter.grad.detach().to(torch.float64).pow(2).sum())
    return math.sqrt(total)


def export_scores(
    model: nn.Module,
    layout: SegmentLayout,
    tap: TapSpec,
    batch: torch.Tensor,
    labels: torch.Tensor,
    out_path: str | os.PathLike,
    budget: str | int | None = None,
    mode: str = "literal",
    seed: int = 0,
) -> tuple[int, int]:
    """Score every (segment, keep mask) candidate and write the table.

    Returns (records written, candidates skipped). A skipped candidate (non-
    finite loss or out-of-memory) is logged in the file and the whole table is
    marked partial, which the planner refuses by design.
    """
    if mode not in ("literal", "local"):
        raise BridgeError(f"unknown mode {mode!r}")
    taps = match_taps(model, tap)
    if len(taps) != layout.length:
        raise BridgeError(
            f"segmentation covers {layout.length} layers but tap patterns match {len(taps)} modules"
        )
    counts = resolve_budget(budget, layout)
    snapshot = {name: tensor.detach().clone() for name, tensor in model.state_dict().items()}
    loss_fn = nn.CrossEntropyLoss()
    records: list[tuple[int, int, float]] = []
    skipped: list[tuple[int, int, str]] = []
    model.train(False)
    for segment_index, (start, stop) in enumerate(layout.bounds):
        size = stop - start + 1
        masks = enumerate_masks(size, None if counts is None else counts[segment_index])
        for mask in masks:
            kept_global = {start + p for p in mask_positions(mask)}
            if mode == "literal":
                targets = [i for i in range(layout.length) if i not in kept_global]
            else:
                targets = [i for i in range(start, stop + 1) if i not in kept_global]
            generator = _candidate_generator(seed, segment_index, mask)
            try:
                model.load_state_dict(snapshot)
                for index in targets:
                    _reinit_module(taps[index][1], generator)
                model.zero_grad(set_to_none=True)
                output = model(batch)
                loss = loss_fn(output, labels)
                if not torch.isfinite(loss):
                    skipped.append((segment_index, mask, "non-finite loss"))
                    continue
                loss.backward()
                score = _grad_norm(model)
                if not math.isfinite(score):
                    skipped.append((segment_index, mask, "non-finite gradient norm"))
                    continue
                records.append((segment_index, mask, score))
            except torch.cuda.OutOfMemoryError as exc:  # pragma: no cover - CPU runs
                skipped.append((segment_index, mask, f"out of memory: {exc}"))
            finally:
                model.zero_grad(set_to_none=True)
    model.load_state_dict(snapshot)
    text = io.StringIO()
    write_score_table(records, text, skipped=skipped)
    _atomic_write(out_path, text.getvalue().encode("utf-8"))
    return len(records), len(skipped)


def synthetic_batch(
    model: nn.Module, batch_size: int, input_shape: tuple[int, ...], seed: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic standard-normal batch plus labels sized to the model's output."""
    generator = torch.Generator()
    generator.manual_seed(int(seed) & (2**63 - 1))
    batch = torch.randn((batch_size, *input_shape), generator=generator, dtype=torch.float32)
    model.train(False)
    with torch.no_grad():
        output = model(batch)
    if output.dim() != 2:
        raise BridgeError(f"model output must be (batch, classes), got {tuple(output.shape)}")
    classes = output.shape[1]
    labels = torch.randint(0, classes, (batch_size,), generator=generator)
    return batch, labels
