"""Segment-wise keep-set search: enumerate masks per segment, pick the argmax.

Each segment of the layer segmentation is searched independently. A keep
mask is a bitmask over the segment's positions (bit j set = keep the j-th
layer of the segment); candidates are every non-empty mask, or every mask
of a fixed popcount when a budget is set. The scorer assigns each mask a
scalar and the largest score wins, ties going to the numerically smallest
mask. Scores come either from the built-in network (hybrid re-init, one
backward pass, gradient norm) or from an externally supplied score table.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import toynet
from .errors import DataError
from .io import ScoreTable
from .segmentation import Segmentation, segmentation_from_json, segmentation_to_json

#: Segments wider than this would enumerate more than 2^20 - 1 masks.
MAX_SEGMENT_BITS = 20


def enumerate_masks(segment_size: int, keep_count: int | None = None) -> list[int]:
    """All candidate keep masks for one segment, in ascending numeric order.

    Without ``keep_count``: every non-zero mask (2^size - 1 of them). With
    ``keep_count``: every mask of exactly that popcount, C(size, count) of
    them, enumerated with Gosper's hack.
    """
    if not 1 <= segment_size <= MAX_SEGMENT_BITS:
        raise DataError(
            f"segment size {segment_size} outside 1..{MAX_SEGMENT_BITS}; "
            "use a larger segment count k to get smaller segments"
        )
    if keep_count is None:
        return list(range(1, 1 << segment_size))
    if not 1 <= keep_count <= segment_size:
        raise DataError(f"keep count {keep_count} outside 1..{segment_size}")
    masks = []
    mask = (1 << keep_count) - 1
    limit = 1 << segment_size
    while mask < limit:
        masks.append(mask)
        low = mask & -mask
        ripple = mask + low
        mask = ripple | (((mask ^ ripple) >> 2) // low)
    return masks


def mask_to_positions(mask: int) -> tuple[int, ...]:
    """Set-bit positions of a mask, ascending."""
    if mask < 0:
        raise DataError(f"mask must be non-negative, got {mask}")
    out = []
    position = 0
    while mask:
        if mask & 1:
            out.append(position)
        mask >>= 1
        position += 1
    return tuple(out)


def apportion_budget(total: int, sizes: Sequence[int]) -> tuple[int, ...]:
    """Split a global keep total across segments, proportionally to size.

    Largest-remainder rounding, then a minimal repair pass keeping every
    count in [1, size]. Feasible iff k <= total <= sum(sizes).
    """
    sizes = [int(s) for s in sizes]
    k = len(sizes)
    length = sum(sizes)
    if any(s < 1 for s in sizes):
        raise DataError("segment sizes must all be >= 1")
    if not k <= total <= length:
        raise DataError(f"keep total {total} infeasible for {k} segments of {length} layers")
    quotas = [total * s / length for s in sizes]
    counts = [math.floor(q) for q in quotas]
    remainders = sorted(range(k), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in remainders[: total - sum(counts)]:
        counts[i] += 1
    # Repair bound violations by moving units from/to the segment whose
    # count is farthest above/below its quota.
    while any(c < 1 for c in counts):
        need = counts.index(min(counts))
        donors = [i for i in range(k) if counts[i] > 1]
        donor = max(donors, key=lambda i: (counts[i] - quotas[i], -i))
        counts[donor] -= 1
        counts[need] += 1
    while any(c > s for c, s in zip(counts, sizes)):
        over = next(i for i in range(k) if counts[i] > sizes[i])
        takers = [i for i in range(k) if counts[i] < sizes[i]]
        taker = min(takers, key=lambda i: (counts[i] - quotas[i], i))
        counts[over] -= 1
        counts[taker] += 1
    return tuple(counts)


def resolve_budget(
    budget: int | Sequence[int] | str | None, segmentation: Segmentation
) -> tuple[int, ...] | None:
    """Normalize a budget spec to per-segment keep counts (None = free search)."""
    sizes = segmentation.sizes()
    if budget is None or budget == "free":
        return None
    if isinstance(budget, (int, np.integer)):
        return apportion_budget(int(budget), sizes)
    counts = tuple(int(b) for b in budget)
    if len(counts) != len(sizes):
        raise DataError(f"{len(counts)} budget entries for {len(sizes)} segments")
    for count, size in zip(counts, sizes):
        if not 1 <= count <= size:
            raise DataError(f"per-segment keep count {count} outside 1..{size}")
    return counts


def candidate_count(segmentation: Segmentation, budget: int | Sequence[int] | str | None = None) -> int:
    """Total masks a plan over this segmentation will score."""
    segmentation.validate()
    counts = resolve_budget(budget, segmentation)
    total = 0
    for index, size in enumerate(segmentation.sizes()):
        if counts is None:
            total += (1 << size) - 1
        else:
            total += math.comb(size, counts[index])
    return total


class Scorer(Protocol):
    def score(self, segment_index: int, keep_mask: int) -> float: ...


class TableScorer:
    """Looks candidate scores up in an externally produced table."""

    def __init__(self, table: ScoreTable):
        self.table = table
        self._scores = table.as_dict()

    def score(self, segment_index: int, keep_mask: int) -> float:
        try:
            return self._scores[(segment_index, keep_mask)]
        except KeyError:
            raise DataError(
                f"score table has no record for segment {segment_index}, mask {keep_mask:#x}"
            ) from None


@dataclass(frozen=True)
class ToyGradNormScorer:
    """Scores a keep mask by the gradient norm of a hybrid-initialized network.

    The mask's layers (global indices) keep the pretrained weights; other
    units are re-drawn per the scope, then one backward pass on the fixed
    batch yields the Euclidean norm of all parameter gradients. Each
    (segment, mask) candidate re-draws from its own derived seed, so scoring
    order (or parallelism) cannot change any score.
    """

    network: toynet.Network
    batch: np.ndarray
    labels: np.ndarray
    segmentation: Segmentation
    mode: str = "literal"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("literal", "local"):
            raise DataError(f"unknown mode {self.mode!r} (expected 'literal' or 'local')")
        if self.segmentation.length != self.network.hidden_layers:
            raise DataError(
                f"segmentation covers {self.segmentation.length} layers but the network "
                f"has {self.network.hidden_layers}"
            )

    def score(self, segment_index: int, keep_mask: int) -> float:
        start, stop = self.segmentation.bounds()[segment_index]
        kept = [start + p for p in mask_to_positions(keep_mask)]
        if not kept or kept[-1] > stop:
            raise DataError(f"mask {keep_mask:#x} outside segment {segment_index}")
        candidate_seed = toynet.derive_seed(self.seed, segment_index, keep_mask)
        candidate = toynet.hybrid_init(
            self.network,
            kept,
            scope=self.mode,
            segment_range=(start, stop) if self.mode == "local" else None,
            seed=candidate_seed,
        )
        grads = toynet.backward(candidate, self.batch, self.labels)
        return toynet.grad_norm(grads)


@dataclass(frozen=True)
class SegmentChoice:
    segment_index: int
    keep_mask: int
    best_score: float | None
    candidates_evaluated: int
    candidate_scores: tuple[tuple[int, float], ...] = ()


@dataclass(frozen=True)
class PruningPlan:
    """The planner's output: which layers stay, which go, and why.

    ``kept``/``removed`` are 0-based global layer indices partitioning the
    whole layer range; every candidate score is retained for audit.
    """

    segmentation: Segmentation
    kept: tuple[int, ...]
    removed: tuple[int, ...]
    per_segment: tuple[SegmentChoice, ...]
    mode: str
    budget: tuple[int, ...] | None
    seed: int

    def validate(self) -> None:
        self.segmentation.validate()
        all_layers = set(range(self.segmentation.length))
        kept_set, removed_set = set(self.kept), set(self.removed)
        if kept_set | removed_set != all_layers or kept_set & removed_set:
            raise DataError("kept and removed sets must partition the layer range")
        bounds = self.segmentation.bounds()
        if len(self.per_segment) != len(bounds):
            raise DataError("one choice per segment is required")
        for choice, (start, stop) in zip(self.per_segment, bounds):
            positions = mask_to_positions(choice.keep_mask)
            if not positions:
                raise DataError(f"segment {choice.segment_index} keeps no layers")
            if positions[-1] > stop - start:
                raise DataError(f"segment {choice.segment_index} mask exceeds segment width")
            if self.budget is not None and len(positions) != self.budget[choice.segment_index]:
                raise DataError(
                    f"segment {choice.segment_index} keeps {len(positions)} layers, "
                    f"budget says {self.budget[choice.segment_index]}"
                )
            global_kept = {start + p for p in positions}
            if global_kept != kept_set & set(range(start, stop + 1)):
                raise DataError(f"segment {choice.segment_index} mask disagrees with kept set")


def _assemble_plan(
    segmentation: Segmentation,
    choices: list[SegmentChoice],
    mode: str,
    budget: tuple[int, ...] | None,
    seed: int,
) -> PruningPlan:
    kept: list[int] = []
    for choice, (start, _stop) in zip(choices, segmentation.bounds()):
        kept.extend(start + p for p in mask_to_positions(choice.keep_mask))
    kept_t = tuple(sorted(kept))
    removed = tuple(i for i in range(segmentation.length) if i not in set(kept_t))
    plan_obj = PruningPlan(
        segmentation=segmentation,
        kept=kept_t,
        removed=removed,
        per_segment=tuple(choices),
        mode=mode,
        budget=budget,
        seed=seed,
    )
    plan_obj.validate()
    return plan_obj


def plan(
    scorer: Scorer,
    segmentation: Segmentation,
    budget: int | Sequence[int] | str | None = None,
    mode: str = "literal",
    seed: int = 0,
    jobs: int = 1,
) -> PruningPlan:
    """Score every candidate mask per segment and keep the argmax.

    Ties break toward the smallest mask. ``jobs`` > 1 fans candidate scoring
    out to a thread pool; the reduction stays in ascending-mask order, so the
    result is identical to a serial run.
    """
    segmentation.validate()
    counts = resolve_budget(budget, segmentation)
    choices: list[SegmentChoice] = []
    for index, size in enumerate(segmentation.sizes()):
        masks = enumerate_masks(size, None if counts is None else counts[index])
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                scores = list(pool.map(lambda m: scorer.score(index, m), masks))
        else:
            scores = [scorer.score(index, m) for m in masks]
        for mask, value in zip(masks, scores):
            if not math.isfinite(value):
                raise DataError(f"non-finite score for segment {index}, mask {mask:#x}")
        best = 0
        for i in range(1, len(masks)):
            if scores[i] > scores[best]:
                best = i
        choices.append(
            SegmentChoice(
                segment_index=index,
                keep_mask=masks[best],
                best_score=scores[best],
                candidates_evaluated=len(masks),
                candidate_scores=tuple(zip(masks, scores)),
            )
        )
    return _assemble_plan(segmentation, choices, mode, counts, seed)


def random_plan(
    segmentation: Segmentation,
    budget: int | Sequence[int] | str | None = None,
    seed: int = 0,
) -> PruningPlan:
    """Baseline plan: per segment, a uniformly random feasible keep mask."""
    segmentation.validate()
    counts = resolve_budget(budget, segmentation)
    rng = toynet.generator(seed)
    choices = []
    for index, size in enumerate(segmentation.sizes()):
        masks = enumerate_masks(size, None if counts is None else counts[index])
        mask = masks[int(rng.integers(len(masks)))]
        choices.append(
            SegmentChoice(
                segment_index=index,
                keep_mask=mask,
                best_score=None,
                candidates_evaluated=0,
            )
        )
    return _assemble_plan(segmentation, choices, "random", counts, seed)


def plan_to_json(plan_obj: PruningPlan) -> str:
    plan_obj.validate()
    doc = {
        "segmentation": json.loads(segmentation_to_json(plan_obj.segmentation)),
        "kept": list(plan_obj.kept),
        "removed": list(plan_obj.removed),
        "mode": plan_obj.mode,
        "budget": list(plan_obj.budget) if plan_obj.budget is not None else None,
        "seed": plan_obj.seed,
        "rng": "philox",
        "per_segment": [
            {
                "segment_index": c.segment_index,
                "keep_mask": c.keep_mask,
                "best_score": c.best_score,
                "candidates_evaluated": c.candidates_evaluated,
                "candidate_scores": [[m, s] for m, s in c.candidate_scores],
            }
            for c in plan_obj.per_segment
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def plan_from_json(text: str) -> PruningPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid plan document: {exc}") from exc
    try:
        segmentation = segmentation_from_json(json.dumps(doc["segmentation"]))
        budget = doc.get("budget")
        plan_obj = PruningPlan(
            segmentation=segmentation,
            kept=tuple(int(i) for i in doc["kept"]),
            removed=tuple(int(i) for i in doc["removed"]),
            per_segment=tuple(
                SegmentChoice(
                    segment_index=int(c["segment_index"]),
                    keep_mask=int(c["keep_mask"]),
                    best_score=None if c["best_score"] is None else float(c["best_score"]),
                    candidates_evaluated=int(c["candidates_evaluated"]),
                    candidate_scores=tuple(
                        (int(m), float(s)) for m, s in c.get("candidate_scores", [])
                    ),
                )
                for c in doc["per_segment"]
            ),
            mode=str(doc["mode"]),
            budget=tuple(int(b) for b in budget) if budget is not None else None,
            seed=int(doc["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid plan document: {exc}") from exc
    plan_obj.validate()
    return plan_obj
