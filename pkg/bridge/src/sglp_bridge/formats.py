"""Self-contained writers/readers for the planner's wire formats.

The bridge deliberately re-implements these instead of importing the planner
package: the byte and text layouts are the contract between the two sides,
and keeping the implementations independent means the contract itself is what
gets tested.

ACTV1: magic ``SGLPACT1``, u32 layer count, then per layer a u16 name length,
UTF-8 name, u32 sample count, u32 feature count, and the values as binary32,
all little-endian. Score tables are ``segment<TAB>mask_hex<TAB>score`` lines;
a ``#!partial`` line poisons the file so the planner refuses it.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence, TextIO

import numpy as np

ACTIVATIONS_MAGIC = b"SGLPACT1"


class BridgeError(ValueError):
    pass


def write_activations(
    names: Sequence[str], matrices: Sequence[np.ndarray], destination: BinaryIO
) -> int:
    """Write named (n, d) float matrices as one ACTV1 record; returns bytes written."""
    if len(names) != len(matrices):
        raise BridgeError(f"{len(names)} names for {len(matrices)} matrices")
    if len(matrices) < 2:
        raise BridgeError(f"need at least 2 layers, got {len(matrices)}")
    mats = [np.ascontiguousarray(m, dtype="<f4") for m in matrices]
    sample_count = mats[0].shape[0]
    for name, m in zip(names, mats):
        if m.ndim != 2 or m.shape[0] != sample_count or m.shape[1] < 1 or m.shape[0] < 2:
            raise BridgeError(f"layer {name!r}: bad shape {m.shape}")
        if not np.isfinite(m).all():
            raise BridgeError(f"layer {name!r}: non-finite activations")
    written = destination.write(ACTIVATIONS_MAGIC)
    written += destination.write(struct.pack("<I", len(mats)))
    for name, m in zip(names, mats):
        encoded = name.encode("utf-8")
        written += destination.write(struct.pack("<H", len(encoded)))
        written += destination.write(encoded)
        written += destination.write(struct.pack("<II", m.shape[0], m.shape[1]))
        written += destination.write(m.tobytes())
    return written


def write_score_table(
    records: Sequence[tuple[int, int, float]],
    destination: TextIO,
    skipped: Sequence[tuple[int, int, str]] = (),
) -> None:
    """Write (segment, mask, score) records; any skipped candidate marks the file partial."""
    for segment, mask, reason in skipped:
        destination.write(f"# skipped segment={segment} mask={mask:x}: {reason}\n")
    if skipped:
        destination.write("#!partial\n")
    for segment, mask, score in records:
        if mask == 0:
            raise BridgeError("empty keep mask is not allowed")
        if not math.isfinite(score):
            raise BridgeError(f"non-finite score for segment {segment}, mask {mask:#x}")
        destination.write(f"{segment}\t{mask:x}\t{score:.17g}\n")


@dataclass(frozen=True)
class SegmentLayout:
    """What the bridge needs from a segmentation document: the segment extents."""

    bounds: tuple[tuple[int, int], ...]  # 0-based inclusive (start, stop) per segment

    @property
    def length(self) -> int:
        return self.bounds[-1][1] + 1

    def sizes(self) -> tuple[int, ...]:
        return tuple(stop - start + 1 for start, stop in self.bounds)


def read_segmentation(text: str) -> SegmentLayout:
    """Parse the planner's segmentation document (1-based split starts)."""
    try:
        doc = json.loads(text)
        starts = [int(s) - 1 for s in doc["split_starts"]]
        length = int(doc["length"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise BridgeError(f"invalid segmentation document: {exc}") from exc
    if not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
        raise BridgeError(f"invalid split starts {starts}")
    if starts[-1] >= length:
        raise BridgeError(f"split start beyond length {length}")
    ends = starts[1:] + [length]
    return SegmentLayout(tuple((s, e - 1) for s, e in zip(starts, ends)))


def enumerate_masks(segment_size: int, keep_count: int | None = None) -> list[int]:
    """Candidate keep masks in ascending order; matches the planner's enumeration."""
    if not 1 <= segment_size <= 20:
        raise BridgeError(f"segment size {segment_size} outside 1..20")
    if keep_count is None:
        return list(range(1, 1 << segment_size))
    if not 1 <= keep_count <= segment_size:
        raise BridgeError(f"keep count {keep_count} outside 1..{segment_size}")
    return [
        mask for mask in range(1, 1 << segment_size) if bin(mask).count("1") == keep_count
    ]


def apportion_budget(total: int, sizes: Sequence[int]) -> tuple[int, ...]:
    """Planner-compatible split of a keep total: proportional shares, largest
    remainder, then bound repairs toward the quota."""
    k = len(sizes)
    length = sum(sizes)
    if not k <= total <= length:
        raise BridgeError(f"keep total {total} infeasible for {k} segments of {length} layers")
    quotas = [total * s / length for s in sizes]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(k), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
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


def resolve_budget(budget: str | int | None, layout: SegmentLayout) -> tuple[int, ...] | None:
    sizes = layout.sizes()
    if budget is None or budget == "free":
        return None
    if isinstance(budget, str):
        if "," in budget:
            counts = tuple(int(part) for part in budget.split(","))
        else:
            counts = apportion_budget(int(budget), sizes)
    elif isinstance(budget, int):
        counts = apportion_budget(budget, sizes)
    else:
        raise BridgeError(f"unsupported budget {budget!r}")
    if len(counts) != len(sizes):
        raise BridgeError(f"{len(counts)} budget entries for {len(sizes)} segments")
    for count, size in zip(counts, sizes):
        if not 1 <= count <= size:
            raise BridgeError(f"keep count {count} outside 1..{size}")
    return counts


def mask_positions(mask: int) -> tuple[int, ...]:
    out = []
    position = 0
    while mask:
        if mask & 1:
            out.append(position)
        mask >>= 1
        position += 1
    return tuple(out)
