"""Optimal segmentation of an ordered sequence into contiguous segments.

The sequence being segmented is the vector of similarity-matrix row sums:
one number per layer, in forward order. A segmentation into k contiguous
segments is scored by the total within-segment sum of squared deviations
about each segment's own mean (the segment "diameter"); the exact optimum
is found by dynamic programming over all C(L-1, k-1) placements, with a
brute-force enumerator kept alongside as an oracle.

Losses from both solvers are accumulated over segments in the same
(right-to-left) order so that optimal values compare exactly, float for
float. Ties are broken toward the lexicographically smallest segment-start
vector in both solvers.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .cka import SimilarityMatrix
from .errors import DataError

#: brute_force_segment refuses instances with more candidate segmentations.
BRUTE_FORCE_LIMIT = 10**6


def row_sums(similarity: SimilarityMatrix | np.ndarray) -> np.ndarray:
    """Row sums of the similarity matrix: one scalar per layer, forward order."""
    if isinstance(similarity, SimilarityMatrix):
        similarity.validate()
        values = similarity.values
    else:
        values = np.asarray(similarity, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise DataError(f"similarity matrix must be square, got shape {values.shape}")
    return values.sum(axis=1)


def _as_sequence(values: np.ndarray) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).ravel()
    if a.size < 2:
        raise DataError(f"sequence needs at least 2 entries, got {a.size}")
    if not np.isfinite(a).all():
        raise DataError("sequence contains non-finite values")
    return a


def diameter(values: np.ndarray, start: int, stop: int) -> float:
    """Sum of squared deviations of values[start..stop] about the segment mean.

    Indices are 0-based and inclusive. Direct two-pass evaluation; the
    prefix-sum table below must agree with this within 1e-9.
    """
    a = _as_sequence(values)
    if not 0 <= start <= stop < a.size:
        raise DataError(f"invalid segment [{start}, {stop}] for length {a.size}")
    segment = a[start : stop + 1]
    mean = segment.mean()
    return float(((segment - mean) ** 2).sum())


@dataclass(frozen=True)
class DiameterTable:
    """Upper-triangular table of segment diameters, D[r, s] for r <= s."""

    values: np.ndarray

    def d(self, start: int, stop: int) -> float:
        if not 0 <= start <= stop < self.values.shape[0]:
            raise DataError(f"invalid segment [{start}, {stop}] for length {self.values.shape[0]}")
        return float(self.values[start, stop])

    def __len__(self) -> int:
        return int(self.values.shape[0])


def diameter_table(values: np.ndarray) -> DiameterTable:
    """All segment diameters in O(L^2) via prefix sums of A and A^2.

    Cancellation in the prefix-sum formula can leave ulp-scale negatives and
    ulp-scale violations of the growth law D(r,s) >= max(D(r+1,s), D(r,s-1));
    a final pass pins both, leaving every entry within 1e-9 of the direct
    evaluation.
    """
    a = _as_sequence(values)
    length = a.size
    p1 = np.concatenate(([0.0], np.cumsum(a)))
    p2 = np.concatenate(([0.0], np.cumsum(a * a)))
    table = np.zeros((length, length), dtype=np.float64)
    for r in range(length):
        s = np.arange(r, length)
        counts = s - r + 1
        sums = p1[s + 1] - p1[r]
        squares = p2[s + 1] - p2[r]
        table[r, r:] = squares - sums * sums / counts
        table[r, r] = 0.0  # singletons are exactly 0; prefix rounding says otherwise
    for r in range(length - 1, -1, -1):
        for s in range(r, length):
            d = table[r, s]
            if d < 0.0:
                d = 0.0
            if r + 1 <= s and table[r + 1, s] > d:
                d = table[r + 1, s]
            if s - 1 >= r and table[r, s - 1] > d:
                d = table[r, s - 1]
            table[r, s] = d
    return DiameterTable(table)


@dataclass(frozen=True)
class Segmentation:
    """A partition of 0..length-1 into k contiguous segments.

    ``split_starts`` holds the 0-based first index of each segment in order;
    the first entry is always 0. ``loss`` is the total within-segment
    diameter. The serialized document uses 1-based starts.
    """

    split_starts: tuple[int, ...]
    length: int
    loss: float
    layer_names: tuple[str, ...] | None = None

    def validate(self) -> None:
        if self.length < 2:
            raise DataError(f"segmentation length {self.length} below minimum of 2")
        k = len(self.split_starts)
        if not 1 <= k <= self.length:
            raise DataError(f"segment count {k} invalid for length {self.length}")
        if self.split_starts[0] != 0:
            raise DataError("first segment must start at index 0")
        if any(b <= a for a, b in zip(self.split_starts, self.split_starts[1:])):
            raise DataError("segment starts must be strictly increasing")
        if self.split_starts[-1] >= self.length:
            raise DataError("segment start beyond sequence end")
        if self.layer_names is not None and len(self.layer_names) != self.length:
            raise DataError("layer name count does not match segmentation length")
        if not math.isfinite(self.loss) or self.loss < 0.0:
            raise DataError(f"segmentation loss must be finite and >= 0, got {self.loss}")

    @property
    def k(self) -> int:
        return len(self.split_starts)

    def bounds(self) -> tuple[tuple[int, int], ...]:
        """Per-segment (start, stop) index pairs, 0-based inclusive."""
        starts = self.split_starts
        ends = tuple(starts[1:]) + (self.length,)
        return tuple((s, e - 1) for s, e in zip(starts, ends))

    def sizes(self) -> tuple[int, ...]:
        return tuple(stop - start + 1 for start, stop in self.bounds())

    def segment_of(self, layer_index: int) -> int:
        for i, (start, stop) in enumerate(self.bounds()):
            if start <= layer_index <= stop:
                return i
        raise DataError(f"layer index {layer_index} outside 0..{self.length - 1}")


def _segment_loss(table: DiameterTable, starts: tuple[int, ...], length: int) -> float:
    # Right-to-left accumulation; must match the DP's addition order exactly.
    ends = tuple(starts[1:]) + (length,)
    loss = 0.0
    for start, end in zip(reversed(starts), reversed(ends)):
        loss = table.values[start, end - 1] + loss
    return loss


def _check_k(k: int, length: int) -> None:
    if not isinstance(k, (int, np.integer)):
        raise DataError(f"segment count must be an integer, got {k!r}")
    if k < 1 or k > length:
        raise DataError(f"segment count {k} out of range 1..{length}")


def fisher_segment(
    values: np.ndarray,
    k: int,
    layer_names: tuple[str, ...] | None = None,
    table: DiameterTable | None = None,
) -> Segmentation:
    """Exact minimum-loss segmentation into k contiguous segments.

    Dynamic program over suffixes: best(i, j) is the optimal loss of
    segmenting values[i:] into j segments. Reconstruction walks left to
    right, always taking the earliest boundary that still achieves the
    optimum, which yields the lexicographically smallest start vector.
    """
    a = _as_sequence(values)
    length = a.size
    _check_k(k, length)
    if table is None:
        table = diameter_table(a)
    d = table.values
    # best[j][i]: optimal loss for a[i:] in j segments; j in 1..k
    best = np.full((k + 1, length + 1), np.inf)
    best[1, :length] = d[np.arange(length), length - 1]
    for j in range(2, k + 1):
        # a[i:] holds length - i elements and must fit j non-empty segments
        for i in range(0, length - j + 1):
            candidates = d[i, np.arange(i, length - j + 1)] + best[j - 1, np.arange(i + 1, length - j + 2)]
            best[j, i] = candidates.min()
    starts = [0]
    i = 0
    for j in range(k, 1, -1):
        target = best[j, i]
        for t in range(i + 1, length - (j - 1) + 1):
            if d[i, t - 1] + best[j - 1, t] == target:
                starts.append(t)
                i = t
                break
        else:  # pragma: no cover - would indicate a DP bookkeeping bug
            raise AssertionError("segmentation backtrack failed")
    starts_t = tuple(starts)
    result = Segmentation(starts_t, length, _segment_loss(table, starts_t, length), layer_names)
    result.validate()
    return result


def brute_force_segment(
    values: np.ndarray,
    k: int,
    layer_names: tuple[str, ...] | None = None,
    table: DiameterTable | None = None,
) -> Segmentation:
    """Exact optimum by enumerating every contiguous segmentation.

    Candidates are generated in lexicographic order of their start vectors,
    and only strictly better losses replace the incumbent, so ties resolve
    exactly like :func:`fisher_segment`. Guarded to C(L-1, k-1) <= 10^6.
    """
    a = _as_sequence(values)
    length = a.size
    _check_k(k, length)
    total = math.comb(length - 1, k - 1)
    if total > BRUTE_FORCE_LIMIT:
        raise DataError(
            f"{total} candidate segmentations exceed the brute-force guard of {BRUTE_FORCE_LIMIT}; "
            "use fisher_segment instead"
        )
    if table is None:
        table = diameter_table(a)
    best_starts: tuple[int, ...] | None = None
    best_loss = math.inf
    for boundaries in itertools.combinations(range(1, length), k - 1):
        starts = (0,) + boundaries
        loss = _segment_loss(table, starts, length)
        if loss < best_loss:
            best_loss = loss
            best_starts = starts
    assert best_starts is not None
    result = Segmentation(best_starts, length, best_loss, layer_names)
    result.validate()
    return result


def count_segmentations(length: int, k: int) -> int:
    """Number of ways to split ``length`` ordered items into k contiguous segments."""
    if length < 1:
        raise DataError(f"length must be >= 1, got {length}")
    _check_k(k, length)
    result = math.comb(length - 1, k - 1)
    if result > 2**63 - 1:
        raise DataError(f"segmentation count C({length - 1}, {k - 1}) exceeds 64-bit range")
    return result


def segmentation_to_json(segmentation: Segmentation) -> str:
    """Serialize a segmentation; split starts are 1-based in the document."""
    segmentation.validate()
    doc = {
        "k": segmentation.k,
        "split_starts": [s + 1 for s in segmentation.split_starts],
        "length": segmentation.length,
        "loss": segmentation.loss,
        "layer_names": list(segmentation.layer_names) if segmentation.layer_names else None,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def segmentation_from_json(text: str) -> Segmentation:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid segmentation document: {exc}") from exc
    try:
        starts = tuple(int(s) - 1 for s in doc["split_starts"])
        names = doc.get("layer_names")
        seg = Segmentation(
            split_starts=starts,
            length=int(doc["length"]),
            loss=float(doc["loss"]),
            layer_names=tuple(names) if names else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid segmentation document: {exc}") from exc
    seg.validate()
    if "k" in doc and int(doc["k"]) != seg.k:
        raise DataError(f"segmentation document k={doc['k']} disagrees with {seg.k} split starts")
    return seg
